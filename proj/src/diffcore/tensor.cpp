#include "osteo/diffcore/tensor.hpp"

#include <sstream>

#include "osteo/diffcore/errors.hpp"

namespace osteo::diffcore {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor() : impl_(std::make_shared<Impl>()) {
  impl_->shape = {1};
  impl_->values = {0.0};
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : impl_(std::make_shared<Impl>()) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match buffer of length " +
                         std::to_string(values.size()));
  }
  impl_->shape = std::move(shape);
  impl_->values = std::move(values);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev, bool requires_grad) {
  std::normal_distribution<double> normal(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = normal(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

std::size_t Tensor::size(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  }
  return impl_->shape[axis];
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->values[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

std::span<double> Tensor::mutable_grad() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() const {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->values, false); }

}  // namespace osteo::diffcore
