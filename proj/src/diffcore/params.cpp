#include "osteo/diffcore/params.hpp"

#include <cmath>

#include "osteo/diffcore/errors.hpp"

namespace osteo::diffcore {

void ParamSet::add(std::string name, Tensor t) {
  for (const auto& [n, _] : items_) {
    if (n == name) throw ContractError("duplicate parameter name '" + name + "'");
  }
  t.set_requires_grad(true);
  items_.emplace_back(std::move(name), std::move(t));
}

void ParamSet::extend(const std::string& prefix, const ParamSet& other) {
  for (const auto& [n, t] : other.items_) add(prefix + n, t);
}

Tensor& ParamSet::at(const std::string& name) {
  for (auto& [n, t] : items_)
    if (n == name) return t;
  throw ContractError("unknown parameter '" + name + "'");
}

const Tensor& ParamSet::at(const std::string& name) const {
  for (const auto& [n, t] : items_)
    if (n == name) return t;
  throw ContractError("unknown parameter '" + name + "'");
}

void ParamSet::zero_grad() {
  for (auto& [_, t] : items_) t.zero_grad();
}

void ParamSet::set_requires_grad(bool on) {
  for (auto& [_, t] : items_) t.set_requires_grad(on);
}

std::size_t ParamSet::total_numel() const {
  std::size_t n = 0;
  for (const auto& [_, t] : items_) n += t.numel();
  return n;
}

std::vector<double> ParamSet::flat_values() const {
  std::vector<double> out;
  out.reserve(total_numel());
  for (const auto& [_, t] : items_) out.insert(out.end(), t.values().begin(), t.values().end());
  return out;
}

Tensor he_init(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  return Tensor::randn(std::move(shape), rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

}  // namespace osteo::diffcore
