#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace osteo::diffcore {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles with an optional gradient buffer.
///
/// Copies share storage (handle semantics), which is what lets recorded
/// operations write gradients back into the tensors a caller holds. Use
/// clone() for a deep copy.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0,
                      bool requires_grad = false);

  const Shape& shape() const { return impl_->shape; }
  std::size_t dim() const { return impl_->shape.size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const { return impl_->values.size(); }

  std::span<const double> values() const { return impl_->values; }
  std::span<double> mutable_values() { return impl_->values; }
  std::vector<double>& storage() { return impl_->values; }
  double operator[](std::size_t i) const { return impl_->values[i]; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const { return impl_->is_leaf; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  /// Gradient buffer, allocated as zeros on first access. Const because the
  /// gradient slot belongs to the shared storage, not to this handle.
  std::span<double> mutable_grad() const;
  void zero_grad() const;
  void release_grad() const { impl_->grad.clear(); }

  /// Deep copy of the values without gradient tracking.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  friend class Tape;
  friend void mark_interior(Tensor& t);

  struct Impl {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;
    bool is_leaf = true;
  };
  std::shared_ptr<Impl> impl_;
};

}  // namespace osteo::diffcore
