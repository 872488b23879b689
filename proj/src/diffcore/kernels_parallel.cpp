#include "osteo/diffcore/kernels.hpp"

#include <algorithm>
#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace osteo::kernels {

namespace {

using Index = std::int64_t;

inline void axpy(double* __restrict y, double a, const double* __restrict x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void im2col_one(const ConvGeom& g, const double* x, double* col) {
  const std::size_t oh = g.out_h(), ow = g.out_w(), P = oh * ow;
  for (std::size_t c = 0; c < g.in_channels; ++c)
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki)
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        double* row = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * P;
        const double* plane = x + c * g.height * g.width;
        for (std::size_t i = 0; i < oh; ++i) {
          const long ih = static_cast<long>(i * g.stride + ki) - static_cast<long>(g.padding);
          double* out = row + i * ow;
          if (ih < 0 || ih >= static_cast<long>(g.height)) {
            std::fill(out, out + ow, 0.0);
            continue;
          }
          const double* src = plane + ih * g.width;
          for (std::size_t j = 0; j < ow; ++j) {
            const long iw = static_cast<long>(j * g.stride + kj) - static_cast<long>(g.padding);
            out[j] = (iw < 0 || iw >= static_cast<long>(g.width)) ? 0.0 : src[iw];
          }
        }
      }
}

void col2im_one(const ConvGeom& g, const double* col, double* dx) {
  const std::size_t oh = g.out_h(), ow = g.out_w(), P = oh * ow;
  for (std::size_t c = 0; c < g.in_channels; ++c)
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki)
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        const double* row = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * P;
        double* plane = dx + c * g.height * g.width;
        for (std::size_t i = 0; i < oh; ++i) {
          const long ih = static_cast<long>(i * g.stride + ki) - static_cast<long>(g.padding);
          if (ih < 0 || ih >= static_cast<long>(g.height)) continue;
          double* dst = plane + ih * g.width;
          const double* in = row + i * ow;
          for (std::size_t j = 0; j < ow; ++j) {
            const long iw = static_cast<long>(j * g.stride + kj) - static_cast<long>(g.padding);
            if (iw >= 0 && iw < static_cast<long>(g.width)) dst[iw] += in[j];
          }
        }
      }
}

}  // namespace

double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace parallel {

void im2col(const ConvGeom& g, std::span<const double> x, Columns& cols) {
  const std::size_t K = g.patch_len(), P = g.out_pixels();
  const std::size_t in_plane = g.in_channels * g.height * g.width;
  cols.resize(g.batch * K * P);
#pragma omp parallel for schedule(static)
  for (Index n = 0; n < static_cast<Index>(g.batch); ++n) {
    im2col_one(g, x.data() + n * in_plane, cols.data() + n * K * P);
  }
}

void conv2d_forward(const ConvGeom& g, std::span<const double> x, std::span<const double> w,
                    std::span<double> y, Columns* keep_cols) {
  const std::size_t K = g.patch_len(), P = g.out_pixels(), Co = g.out_channels;
  Columns local;
  Columns& cols = keep_cols ? *keep_cols : local;
  im2col(g, x, cols);
  // Blocks of four output channels share each pass over a column row.
  const std::size_t blocks = (Co + 3) / 4;
#pragma omp parallel for collapse(2) schedule(static)
  for (Index n = 0; n < static_cast<Index>(g.batch); ++n) {
    for (Index b = 0; b < static_cast<Index>(blocks); ++b) {
      const double* col = cols.data() + n * K * P;
      const std::size_t c0 = b * 4;
      const std::size_t cn = std::min<std::size_t>(4, Co - c0);
      double* yb = y.data() + (n * Co + c0) * P;
      std::fill(yb, yb + cn * P, 0.0);
      if (cn == 4) {
        double* y0 = yb;
        double* y1 = yb + P;
        double* y2 = yb + 2 * P;
        double* y3 = yb + 3 * P;
        const double* w0 = w.data() + (c0 + 0) * K;
        const double* w1 = w.data() + (c0 + 1) * K;
        const double* w2 = w.data() + (c0 + 2) * K;
        const double* w3 = w.data() + (c0 + 3) * K;
        for (std::size_t k = 0; k < K; ++k) {
          const double* __restrict c = col + k * P;
          const double a0 = w0[k], a1 = w1[k], a2 = w2[k], a3 = w3[k];
          for (std::size_t p = 0; p < P; ++p) {
            const double v = c[p];
            y0[p] += a0 * v;
            y1[p] += a1 * v;
            y2[p] += a2 * v;
            y3[p] += a3 * v;
          }
        }
      } else {
        for (std::size_t r = 0; r < cn; ++r) {
          const double* wr = w.data() + (c0 + r) * K;
          for (std::size_t k = 0; k < K; ++k) axpy(yb + r * P, wr[k], col + k * P, P);
        }
      }
    }
  }
}

void conv2d_backward_input(const ConvGeom& g, std::span<const double> w,
                           std::span<const double> dy, std::span<double> dx) {
  const std::size_t K = g.patch_len(), P = g.out_pixels(), Co = g.out_channels;
  const std::size_t in_plane = g.in_channels * g.height * g.width;
#pragma omp parallel
  {
    std::vector<double> dcol(K * P);
#pragma omp for schedule(static)
    for (Index n = 0; n < static_cast<Index>(g.batch); ++n) {
      std::fill(dcol.begin(), dcol.end(), 0.0);
      const double* dyn = dy.data() + n * Co * P;
      for (std::size_t k = 0; k < K; ++k) {
        double* __restrict d = dcol.data() + k * P;
        for (std::size_t co = 0; co < Co; ++co) axpy(d, w[co * K + k], dyn + co * P, P);
      }
      col2im_one(g, dcol.data(), dx.data() + n * in_plane);
    }
  }
}

void conv2d_backward_weight(const ConvGeom& g, const Columns& cols, std::span<const double> dy,
                            std::span<double> dw) {
  const std::size_t K = g.patch_len(), P = g.out_pixels(), Co = g.out_channels;
#pragma omp parallel for schedule(static)
  for (Index co = 0; co < static_cast<Index>(Co); ++co) {
    for (std::size_t k = 0; k < K; ++k) {
      double s = 0.0;
      for (std::size_t n = 0; n < g.batch; ++n) {
        s += dot(dy.data() + (n * Co + co) * P, cols.data() + (n * K + k) * P, P);
      }
      dw[co * K + k] += s;
    }
  }
}

void matmul_acc(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
                std::span<const double> b, std::span<double> c) {
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < static_cast<Index>(m); ++i) {
    double* ci = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) axpy(ci, a[i * k + p], b.data() + p * n, n);
  }
}

void matmul_nt_acc(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
                   std::span<const double> b, std::span<double> c) {
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < static_cast<Index>(m); ++i) {
    for (std::size_t j = 0; j < n; ++j) c[i * n + j] += dot(a.data() + i * k, b.data() + j * k, k);
  }
}

void matmul_tn_acc(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
                   std::span<const double> b, std::span<double> c) {
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < static_cast<Index>(m); ++i) {
    double* ci = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) axpy(ci, a[p * m + i], b.data() + p * n, n);
  }
}

}  // namespace parallel
}  // namespace osteo::kernels
