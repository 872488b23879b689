#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "osteo/diffcore/tape.hpp"
#include "osteo/diffcore/tensor.hpp"

// Differentiable primitives. Each records itself on the active tape when an
// input requires a gradient; otherwise it is a pure function of its inputs.
//
// Spatial operations accept [C,H,W] (one image) or [N,C,H,W] (a batch) and
// return a tensor of the same rank.

namespace osteo::diffcore {

// Elementwise, same shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);

// Reductions to a one-element tensor.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);

/// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
/// x [n,in] (or [in]) with w [out,in] and b [out] -> [n,out] (or [out]).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor linear(const Tensor& x, const Tensor& w);

/// Zero-padded cross-correlation; kernel [Cout,Cin,kh,kw].
Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t padding);
/// Same with a per-output-channel bias [Cout].
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              std::size_t padding);

Tensor avg_pool(const Tensor& x, std::size_t window);
/// Per-channel spatial mean: [C,H,W] -> [C], [N,C,H,W] -> [N,C].
Tensor global_avg_pool(const Tensor& x);
Tensor upsample_nearest(const Tensor& x, std::size_t factor);
/// Concatenate along the channel axis.
Tensor concat_channels(const Tensor& a, const Tensor& b);

/// Max-stabilised softmax over `axis` (default: last axis).
Tensor softmax(const Tensor& x);
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x, std::size_t axis);

/// Single element as a one-element tensor.
Tensor select(const Tensor& x, std::size_t index);
/// x [n,k], one column index per row -> [n].
Tensor pick(const Tensor& x, std::span<const std::size_t> columns);
/// Rows of x [n,d] scaled to unit L2 norm.
Tensor l2_normalize_rows(const Tensor& x);

/// Stack equally shaped tensors along a new leading axis.
Tensor stack(const std::vector<Tensor>& parts);
/// Sub-range [begin,end) of the leading axis.
Tensor slice(const Tensor& x, std::size_t begin, std::size_t end);
/// Rows of the leading axis in the given order (repeats allowed).
Tensor take(const Tensor& x, std::span<const std::size_t> rows);

}  // namespace osteo::diffcore
