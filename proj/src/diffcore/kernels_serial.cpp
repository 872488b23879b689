#include "osteo/diffcore/kernels.hpp"

namespace osteo::kernels::serial {

void conv2d_forward(const ConvGeom& g, std::span<const double> x, std::span<const double> w,
                    std::span<double> y) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t co = 0; co < g.out_channels; ++co)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = 0.0;
          for (std::size_t ci = 0; ci < g.in_channels; ++ci)
            for (std::size_t ki = 0; ki < g.kernel_h; ++ki)
              for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
                const long ih = static_cast<long>(i * g.stride + ki) - static_cast<long>(g.padding);
                const long iw = static_cast<long>(j * g.stride + kj) - static_cast<long>(g.padding);
                if (ih < 0 || iw < 0 || ih >= static_cast<long>(g.height) ||
                    iw >= static_cast<long>(g.width))
                  continue;
                acc += x[((n * g.in_channels + ci) * g.height + ih) * g.width + iw] *
                       w[((co * g.in_channels + ci) * g.kernel_h + ki) * g.kernel_w + kj];
              }
          y[((n * g.out_channels + co) * oh + i) * ow + j] = acc;
        }
}

void conv2d_backward_input(const ConvGeom& g, std::span<const double> w,
                           std::span<const double> dy, std::span<double> dx) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t co = 0; co < g.out_channels; ++co)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          const double d = dy[((n * g.out_channels + co) * oh + i) * ow + j];
          for (std::size_t ci = 0; ci < g.in_channels; ++ci)
            for (std::size_t ki = 0; ki < g.kernel_h; ++ki)
              for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
                const long ih = static_cast<long>(i * g.stride + ki) - static_cast<long>(g.padding);
                const long iw = static_cast<long>(j * g.stride + kj) - static_cast<long>(g.padding);
                if (ih < 0 || iw < 0 || ih >= static_cast<long>(g.height) ||
                    iw >= static_cast<long>(g.width))
                  continue;
                dx[((n * g.in_channels + ci) * g.height + ih) * g.width + iw] +=
                    d * w[((co * g.in_channels + ci) * g.kernel_h + ki) * g.kernel_w + kj];
              }
        }
}

void conv2d_backward_weight(const ConvGeom& g, std::span<const double> x,
                            std::span<const double> dy, std::span<double> dw) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t co = 0; co < g.out_channels; ++co)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          const double d = dy[((n * g.out_channels + co) * oh + i) * ow + j];
          for (std::size_t ci = 0; ci < g.in_channels; ++ci)
            for (std::size_t ki = 0; ki < g.kernel_h; ++ki)
              for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
                const long ih = static_cast<long>(i * g.stride + ki) - static_cast<long>(g.padding);
                const long iw = static_cast<long>(j * g.stride + kj) - static_cast<long>(g.padding);
                if (ih < 0 || iw < 0 || ih >= static_cast<long>(g.height) ||
                    iw >= static_cast<long>(g.width))
                  continue;
                dw[((co * g.in_channels + ci) * g.kernel_h + ki) * g.kernel_w + kj] +=
                    d * x[((n * g.in_channels + ci) * g.height + ih) * g.width + iw];
              }
        }
}

void matmul_acc(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
                std::span<const double> b, std::span<double> c) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] += acc;
    }
}

void matmul_nt_acc(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
                   std::span<const double> b, std::span<double> c) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[j * k + p];
      c[i * n + j] += acc;
    }
}

void matmul_tn_acc(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
                   std::span<const double> b, std::span<double> c) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * b[p * n + j];
      c[i * n + j] += acc;
    }
}

}  // namespace osteo::kernels::serial
