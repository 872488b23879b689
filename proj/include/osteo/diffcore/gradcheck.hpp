#pragma once

#include <functional>

#include "osteo/diffcore/tensor.hpp"

namespace osteo::diffcore {

/// Compares the tape gradient of a scalar function with central finite
/// differences. Returns max_i |analytic_i - numeric_i| / max(1, |analytic_i|).
double grad_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& point,
                  double step = 1e-4);

}  // namespace osteo::diffcore
