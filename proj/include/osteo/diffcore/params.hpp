#pragma once

#include <string>
#include <utility>
#include <vector>

#include "osteo/diffcore/tensor.hpp"

namespace osteo::diffcore {

/// Ordered, named collection of trainable tensors. Order is the
/// serialization order of checkpoints.
class ParamSet {
 public:
  void add(std::string name, Tensor t);
  void extend(const std::string& prefix, const ParamSet& other);

  std::size_t size() const { return items_.size(); }
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::vector<std::pair<std::string, Tensor>>& items() { return items_; }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;

  void zero_grad();
  void set_requires_grad(bool on);
  std::size_t total_numel() const;
  /// Concatenated values; used for bit-identity checks.
  std::vector<double> flat_values() const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

/// He-normal initialisation for a conv or linear weight.
Tensor he_init(Shape shape, std::size_t fan_in, std::mt19937_64& rng);

}  // namespace osteo::diffcore
