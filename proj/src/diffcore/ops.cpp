#include "osteo/diffcore/ops.hpp"

#include <algorithm>
#include <cmath>

#include "osteo/diffcore/errors.hpp"
#include "osteo/diffcore/kernels.hpp"

namespace osteo::diffcore {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// Views a spatial tensor as [N,C,H,W].
struct Spatial {
  std::size_t n, c, h, w;
  bool batched;
};

Spatial spatial_of(const Tensor& x, const char* op) {
  if (x.dim() == 3) return {1, x.size(0), x.size(1), x.size(2), false};
  if (x.dim() == 4) return {x.size(0), x.size(1), x.size(2), x.size(3), true};
  throw DimensionError(std::string(op) + ": expected [C,H,W] or [N,C,H,W], got " +
                       shape_str(x.shape()));
}

Shape spatial_shape(const Spatial& s, std::size_t c, std::size_t h, std::size_t w) {
  if (s.batched) return {s.n, c, h, w};
  return {c, h, w};
}

template <typename F>
Tensor unary(const Tensor& a, F&& f) {
  std::vector<double> out(a.numel());
  auto v = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(v[i]);
  return Tensor(a.shape(), std::move(out));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  Tensor y(a.shape(), std::move(out));
  record_op({a, b}, y, [a, b, y]() mutable {
    auto g = y.grad();
    for (const Tensor* t : {&a, &b}) {
      if (!t->requires_grad()) continue;
      auto d = t->mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
  return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  Tensor y(a.shape(), std::move(out));
  record_op({a, b}, y, [a, b, y]() mutable {
    auto g = y.grad();
    if (a.requires_grad()) {
      auto d = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (b.requires_grad()) {
      auto d = b.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
    }
  });
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Tensor y(a.shape(), std::move(out));
  record_op({a, b}, y, [a, b, y]() mutable {
    auto g = y.grad();
    if (a.requires_grad()) {
      auto d = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * b[i];
    }
    if (b.requires_grad()) {
      auto d = b.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * a[i];
    }
  });
  return y;
}

Tensor scale(const Tensor& a, double s) {
  Tensor y = unary(a, [s](double v) { return v * s; });
  record_op({a}, y, [a, y, s]() mutable {
    auto g = y.grad();
    auto d = a.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * s;
  });
  return y;
}

Tensor add_scalar(const Tensor& a, double s) {
  Tensor y = unary(a, [s](double v) { return v + s; });
  record_op({a}, y, [a, y]() mutable {
    auto g = y.grad();
    auto d = a.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
  return y;
}

Tensor relu(const Tensor& a) {
  Tensor y = unary(a, [](double v) { return v > 0.0 ? v : 0.0; });
  record_op({a}, y, [a, y]() mutable {
    auto g = y.grad();
    auto d = a.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (a[i] > 0.0) d[i] += g[i];
  });
  return y;
}

Tensor exp(const Tensor& a) {
  Tensor y = unary(a, [](double v) { return std::exp(v); });
  record_op({a}, y, [a, y]() mutable {
    auto g = y.grad();
    auto d = a.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * y[i];
  });
  return y;
}

Tensor log(const Tensor& a) {
  for (double v : a.values()) {
    if (!(v > 0.0)) throw ContractError("log of non-positive value");
  }
  Tensor y = unary(a, [](double v) { return std::log(v); });
  record_op({a}, y, [a, y]() mutable {
    auto g = y.grad();
    auto d = a.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] / a[i];
  });
  return y;
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  Tensor y = Tensor::scalar(s);
  record_op({a}, y, [a, y]() mutable {
    const double g = y.grad()[0];
    for (auto& d : a.mutable_grad()) d += g;
  });
  return y;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  Tensor y(std::move(shape), std::vector<double>(a.values().begin(), a.values().end()));
  record_op({a}, y, [a, y]() mutable {
    auto g = y.grad();
    auto d = a.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
  return y;
}

Tensor transpose(const Tensor& a) {
  if (a.dim() != 2) throw DimensionError("transpose expects a matrix, got " + shape_str(a.shape()));
  const std::size_t m = a.size(0), n = a.size(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  Tensor y({n, m}, std::move(out));
  record_op({a}, y, [a, y, m, n]() mutable {
    auto g = y.grad();
    auto d = a.mutable_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) d[i * n + j] += g[j * m + i];
  });
  return y;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.size(1) != b.size(0)) {
    throw DimensionError("matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  Tensor y = Tensor::zeros({m, n});
  kernels::parallel::matmul_acc(m, k, n, a.values(), b.values(), y.mutable_values());
  record_op({a, b}, y, [a, b, y, m, k, n]() mutable {
    auto g = y.grad();
    if (a.requires_grad()) kernels::parallel::matmul_nt_acc(m, n, k, g, b.values(), a.mutable_grad());
    if (b.requires_grad()) kernels::parallel::matmul_tn_acc(k, m, n, a.values(), g, b.mutable_grad());
  });
  return y;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.dim() != 2 || b.dim() != 1 || b.size(0) != w.size(0)) {
    throw DimensionError("linear: weight " + shape_str(w.shape()) + " bias " + shape_str(b.shape()));
  }
  Tensor y = linear(x, w);
  const std::size_t out = w.size(0);
  const std::size_t rows = y.numel() / out;
  auto yv = y.mutable_values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < out; ++o) yv[r * out + o] += b[o];
  if (should_record({&b})) {
    Tensor z(y.shape(), std::vector<double>(yv.begin(), yv.end()));
    record_op({y, b}, z, [y, b, z, rows, out]() mutable {
      auto g = z.grad();
      if (y.requires_grad()) {
        auto d = y.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
      if (b.requires_grad()) {
        auto d = b.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t o = 0; o < out; ++o) d[o] += g[r * out + o];
      }
    });
    return z;
  }
  return y;
}

Tensor linear(const Tensor& x, const Tensor& w) {
  if (w.dim() != 2) throw DimensionError("linear: weight must be [out,in]");
  const std::size_t in = w.size(1), out = w.size(0);
  const bool vec = x.dim() == 1;
  if ((vec && x.size(0) != in) || (!vec && (x.dim() != 2 || x.size(1) != in))) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(w.shape()));
  }
  const std::size_t rows = vec ? 1 : x.size(0);
  Tensor y = Tensor::zeros(vec ? Shape{out} : Shape{rows, out});
  kernels::parallel::matmul_nt_acc(rows, in, out, x.values(), w.values(), y.mutable_values());
  record_op({x, w}, y, [x, w, y, rows, in, out]() mutable {
    auto g = y.grad();
    if (x.requires_grad()) kernels::parallel::matmul_acc(rows, out, in, g, w.values(), x.mutable_grad());
    if (w.requires_grad()) kernels::parallel::matmul_tn_acc(out, rows, in, g, x.values(), w.mutable_grad());
  });
  return y;
}

namespace {

kernels::ConvGeom conv_geom(const Spatial& s, const Tensor& kernel, std::size_t stride,
                            std::size_t padding) {
  if (kernel.dim() != 4) throw DimensionError("conv2d: kernel must be [Cout,Cin,kh,kw]");
  if (kernel.size(1) != s.c) {
    throw DimensionError("conv2d: input has " + std::to_string(s.c) + " channels, kernel expects " +
                         std::to_string(kernel.size(1)));
  }
  if (stride == 0) throw ContractError("conv2d: stride must be >= 1");
  kernels::ConvGeom g;
  g.batch = s.n;
  g.in_channels = s.c;
  g.height = s.h;
  g.width = s.w;
  g.out_channels = kernel.size(0);
  g.kernel_h = kernel.size(2);
  g.kernel_w = kernel.size(3);
  g.stride = stride;
  g.padding = padding;
  if (g.kernel_h > s.h + 2 * padding || g.kernel_w > s.w + 2 * padding) {
    throw DimensionError("conv2d: kernel larger than padded input");
  }
  return g;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t padding) {
  const Spatial s = spatial_of(x, "conv2d");
  const kernels::ConvGeom g = conv_geom(s, kernel, stride, padding);
  Tensor y = Tensor::zeros(spatial_shape(s, g.out_channels, g.out_h(), g.out_w()));
  const bool rec = should_record({&x, &kernel});
  auto cols = std::make_shared<kernels::parallel::Columns>();
  kernels::parallel::conv2d_forward(g, x.values(), kernel.values(), y.mutable_values(),
                                    rec ? cols.get() : nullptr);
  if (rec) {
    record_op({x, kernel}, y, [x, kernel, y, g, cols]() mutable {
      auto gy = y.grad();
      if (x.requires_grad()) {
        kernels::parallel::conv2d_backward_input(g, kernel.values(), gy, x.mutable_grad());
      }
      if (kernel.requires_grad()) {
        kernels::parallel::conv2d_backward_weight(g, *cols, gy, kernel.mutable_grad());
      }
    });
  }
  return y;
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  if (bias.dim() != 1 || bias.size(0) != kernel.size(0)) {
    throw DimensionError("conv2d: bias must have one entry per output channel");
  }
  Tensor y = conv2d(x, kernel, stride, padding);
  const Spatial s = spatial_of(y, "conv2d");
  const std::size_t plane = s.h * s.w;
  std::vector<double> out(y.values().begin(), y.values().end());
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      double* p = out.data() + (n * s.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] += bias[c];
    }
  Tensor z(y.shape(), std::move(out));
  record_op({y, bias}, z, [y, bias, z, s, plane]() mutable {
    auto g = z.grad();
    if (y.requires_grad()) {
      auto d = y.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (bias.requires_grad()) {
      auto d = bias.mutable_grad();
      for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c) {
          const double* p = g.data() + (n * s.c + c) * plane;
          double acc = 0.0;
          for (std::size_t i = 0; i < plane; ++i) acc += p[i];
          d[c] += acc;
        }
    }
  });
  return z;
}

Tensor avg_pool(const Tensor& x, std::size_t window) {
  const Spatial s = spatial_of(x, "avg_pool");
  if (window == 0 || s.h % window != 0 || s.w % window != 0) {
    throw DimensionError("avg_pool: " + shape_str(x.shape()) + " not divisible by window " +
                         std::to_string(window));
  }
  const std::size_t oh = s.h / window, ow = s.w / window;
  const double inv = 1.0 / static_cast<double>(window * window);
  Tensor y = Tensor::zeros(spatial_shape(s, s.c, oh, ow));
  auto yv = y.mutable_values();
  for (std::size_t p = 0; p < s.n * s.c; ++p)
    for (std::size_t i = 0; i < s.h; ++i)
      for (std::size_t j = 0; j < s.w; ++j)
        yv[(p * oh + i / window) * ow + j / window] += x[(p * s.h + i) * s.w + j] * inv;
  record_op({x}, y, [x, y, s, oh, ow, window, inv]() mutable {
    auto g = y.grad();
    auto d = x.mutable_grad();
    for (std::size_t p = 0; p < s.n * s.c; ++p)
      for (std::size_t i = 0; i < s.h; ++i)
        for (std::size_t j = 0; j < s.w; ++j)
          d[(p * s.h + i) * s.w + j] += g[(p * oh + i / window) * ow + j / window] * inv;
  });
  return y;
}

Tensor global_avg_pool(const Tensor& x) {
  const Spatial s = spatial_of(x, "global_avg_pool");
  const std::size_t plane = s.h * s.w;
  const double inv = 1.0 / static_cast<double>(plane);
  Tensor y = Tensor::zeros(s.batched ? Shape{s.n, s.c} : Shape{s.c});
  auto yv = y.mutable_values();
  for (std::size_t p = 0; p < s.n * s.c; ++p) {
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) acc += x[p * plane + i];
    yv[p] = acc * inv;
  }
  record_op({x}, y, [x, y, s, plane, inv]() mutable {
    auto g = y.grad();
    auto d = x.mutable_grad();
    for (std::size_t p = 0; p < s.n * s.c; ++p)
      for (std::size_t i = 0; i < plane; ++i) d[p * plane + i] += g[p] * inv;
  });
  return y;
}

Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  const Spatial s = spatial_of(x, "upsample_nearest");
  if (factor == 0) throw ContractError("upsample_nearest: factor must be >= 1");
  const std::size_t oh = s.h * factor, ow = s.w * factor;
  Tensor y = Tensor::zeros(spatial_shape(s, s.c, oh, ow));
  auto yv = y.mutable_values();
  for (std::size_t p = 0; p < s.n * s.c; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j)
        yv[(p * oh + i) * ow + j] = x[(p * s.h + i / factor) * s.w + j / factor];
  record_op({x}, y, [x, y, s, oh, ow, factor]() mutable {
    auto g = y.grad();
    auto d = x.mutable_grad();
    for (std::size_t p = 0; p < s.n * s.c; ++p)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j)
          d[(p * s.h + i / factor) * s.w + j / factor] += g[(p * oh + i) * ow + j];
  });
  return y;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  const Spatial sa = spatial_of(a, "concat_channels");
  const Spatial sb = spatial_of(b, "concat_channels");
  if (sa.batched != sb.batched || sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw DimensionError("concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t plane = sa.h * sa.w, c = sa.c + sb.c;
  std::vector<double> out(sa.n * c * plane);
  for (std::size_t n = 0; n < sa.n; ++n) {
    std::copy_n(a.values().data() + n * sa.c * plane, sa.c * plane, out.data() + n * c * plane);
    std::copy_n(b.values().data() + n * sb.c * plane, sb.c * plane,
                out.data() + (n * c + sa.c) * plane);
  }
  Tensor y(spatial_shape(sa, c, sa.h, sa.w), std::move(out));
  record_op({a, b}, y, [a, b, y, sa, sb, plane, c]() mutable {
    auto g = y.grad();
    for (std::size_t n = 0; n < sa.n; ++n) {
      if (a.requires_grad()) {
        auto d = a.mutable_grad();
        for (std::size_t i = 0; i < sa.c * plane; ++i) d[n * sa.c * plane + i] += g[n * c * plane + i];
      }
      if (b.requires_grad()) {
        auto d = b.mutable_grad();
        for (std::size_t i = 0; i < sb.c * plane; ++i)
          d[n * sb.c * plane + i] += g[(n * c + sa.c) * plane + i];
      }
    }
  });
  return y;
}

namespace {

struct AxisView {
  std::size_t outer, len, inner;
};

AxisView axis_view(const Tensor& x, std::size_t axis) {
  if (axis >= x.dim()) throw DimensionError("softmax axis out of range");
  AxisView v{1, x.size(axis), 1};
  for (std::size_t i = 0; i < axis; ++i) v.outer *= x.size(i);
  for (std::size_t i = axis + 1; i < x.dim(); ++i) v.inner *= x.size(i);
  return v;
}

}  // namespace

Tensor softmax(const Tensor& x) { return softmax(x, x.dim() - 1); }

Tensor softmax(const Tensor& x, std::size_t axis) {
  const AxisView v = axis_view(x, axis);
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.len * v.inner + in;
      double mx = x[base];
      for (std::size_t k = 1; k < v.len; ++k) mx = std::max(mx, x[base + k * v.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < v.len; ++k) {
        const double e = std::exp(x[base + k * v.inner] - mx);
        out[base + k * v.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < v.len; ++k) out[base + k * v.inner] /= z;
    }
  Tensor y(x.shape(), std::move(out));
  record_op({x}, y, [x, y, v]() mutable {
    auto g = y.grad();
    auto d = x.mutable_grad();
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t in = 0; in < v.inner; ++in) {
        const std::size_t base = o * v.len * v.inner + in;
        double dotv = 0.0;
        for (std::size_t k = 0; k < v.len; ++k) dotv += g[base + k * v.inner] * y[base + k * v.inner];
        for (std::size_t k = 0; k < v.len; ++k) {
          const std::size_t i = base + k * v.inner;
          d[i] += y[i] * (g[i] - dotv);
        }
      }
  });
  return y;
}

Tensor log_softmax(const Tensor& x) { return log_softmax(x, x.dim() - 1); }

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const AxisView v = axis_view(x, axis);
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.len * v.inner + in;
      double mx = x[base];
      for (std::size_t k = 1; k < v.len; ++k) mx = std::max(mx, x[base + k * v.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < v.len; ++k) z += std::exp(x[base + k * v.inner] - mx);
      const double lz = mx + std::log(z);
      for (std::size_t k = 0; k < v.len; ++k) out[base + k * v.inner] = x[base + k * v.inner] - lz;
    }
  Tensor y(x.shape(), std::move(out));
  record_op({x}, y, [x, y, v]() mutable {
    auto g = y.grad();
    auto d = x.mutable_grad();
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t in = 0; in < v.inner; ++in) {
        const std::size_t base = o * v.len * v.inner + in;
        double gs = 0.0;
        for (std::size_t k = 0; k < v.len; ++k) gs += g[base + k * v.inner];
        for (std::size_t k = 0; k < v.len; ++k) {
          const std::size_t i = base + k * v.inner;
          d[i] += g[i] - std::exp(y[i]) * gs;
        }
      }
  });
  return y;
}

Tensor select(const Tensor& x, std::size_t index) {
  if (index >= x.numel()) throw DimensionError("select: index out of range");
  Tensor y = Tensor::scalar(x[index]);
  record_op({x}, y, [x, y, index]() mutable { x.mutable_grad()[index] += y.grad()[0]; });
  return y;
}

Tensor pick(const Tensor& x, std::span<const std::size_t> columns) {
  if (x.dim() != 2 || columns.size() != x.size(0)) {
    throw DimensionError("pick: expected [n,k] with n column indices");
  }
  const std::size_t n = x.size(0), k = x.size(1);
  std::vector<std::size_t> cols(columns.begin(), columns.end());
  std::vector<double> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    if (cols[r] >= k) throw DimensionError("pick: column out of range");
    out[r] = x[r * k + cols[r]];
  }
  Tensor y({n}, std::move(out));
  record_op({x}, y, [x, y, cols, k]() mutable {
    auto g = y.grad();
    auto d = x.mutable_grad();
    for (std::size_t r = 0; r < cols.size(); ++r) d[r * k + cols[r]] += g[r];
  });
  return y;
}

Tensor l2_normalize_rows(const Tensor& x) {
  if (x.dim() != 2) throw DimensionError("l2_normalize_rows expects [n,d]");
  const std::size_t n = x.size(0), dm = x.size(1);
  std::vector<double> norms(n);
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < dm; ++j) s += x[r * dm + j] * x[r * dm + j];
    norms[r] = std::max(std::sqrt(s), 1e-12);
    for (std::size_t j = 0; j < dm; ++j) out[r * dm + j] = x[r * dm + j] / norms[r];
  }
  Tensor y(x.shape(), std::move(out));
  record_op({x}, y, [x, y, norms, n, dm]() mutable {
    auto g = y.grad();
    auto d = x.mutable_grad();
    for (std::size_t r = 0; r < n; ++r) {
      double gy = 0.0;
      for (std::size_t j = 0; j < dm; ++j) gy += g[r * dm + j] * y[r * dm + j];
      for (std::size_t j = 0; j < dm; ++j) d[r * dm + j] += (g[r * dm + j] - y[r * dm + j] * gy) / norms[r];
    }
  });
  return y;
}

Tensor stack(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("stack of zero tensors");
  const Shape inner = parts.front().shape();
  const std::size_t len = parts.front().numel();
  std::vector<double> out;
  out.reserve(len * parts.size());
  for (const auto& p : parts) {
    if (p.shape() != inner) throw DimensionError("stack: mismatched shapes");
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  Shape shape{parts.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  Tensor y(std::move(shape), std::move(out));
  record_op(parts, y, [parts, y, len]() mutable {
    auto g = y.grad();
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (!parts[i].requires_grad()) continue;
      auto d = parts[i].mutable_grad();
      for (std::size_t j = 0; j < len; ++j) d[j] += g[i * len + j];
    }
  });
  return y;
}

Tensor slice(const Tensor& x, std::size_t begin, std::size_t end) {
  if (x.dim() < 1 || begin >= end || end > x.size(0)) throw DimensionError("slice: bad range");
  const std::size_t row = x.numel() / x.size(0);
  Shape shape = x.shape();
  shape[0] = end - begin;
  Tensor y(std::move(shape), std::vector<double>(x.values().begin() + begin * row,
                                                 x.values().begin() + end * row));
  record_op({x}, y, [x, y, begin, row]() mutable {
    auto g = y.grad();
    auto d = x.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) d[begin * row + i] += g[i];
  });
  return y;
}

Tensor take(const Tensor& x, std::span<const std::size_t> rows) {
  if (x.dim() < 1) throw DimensionError("take needs at least one axis");
  const std::size_t row = x.numel() / std::max<std::size_t>(x.size(0), 1);
  std::vector<double> out(rows.size() * row);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= x.size(0)) throw DimensionError("take: row " + std::to_string(rows[r]) + " out of range");
    std::copy_n(x.values().data() + rows[r] * row, row, out.data() + r * row);
  }
  Shape shape = x.shape();
  shape[0] = rows.size();
  Tensor y(std::move(shape), std::move(out));
  record_op({x}, y, [x, y, idx = std::vector<std::size_t>(rows.begin(), rows.end()), row]() mutable {
    auto g = y.grad();
    auto d = x.mutable_grad();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t i = 0; i < row; ++i) d[idx[r] * row + i] += g[r * row + i];
  });
  return y;
}

}  // namespace osteo::diffcore
