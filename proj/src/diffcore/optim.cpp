#include "osteo/diffcore/optim.hpp"

#include <cmath>

namespace osteo::diffcore {

void Adam::step(ParamSet& params) {
  auto& items = params.items();
  if (m_.size() != items.size()) {
    m_.assign(items.size(), {});
    v_.assign(items.size(), {});
    for (std::size_t i = 0; i < items.size(); ++i) {
      m_[i].assign(items[i].second.numel(), 0.0);
      v_[i].assign(items[i].second.numel(), 0.0);
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < items.size(); ++i) {
    Tensor& p = items[i].second;
    if (!p.has_grad()) continue;
    auto w = p.mutable_values();
    auto g = p.grad();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
      v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j];
      w[j] -= lr_ * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_);
    }
  }
}

void sgd_step(ParamSet& params, double lr) {
  for (auto& [_, p] : params.items()) {
    if (!p.has_grad()) continue;
    auto w = p.mutable_values();
    auto g = p.grad();
    for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr * g[j];
  }
}

}  // namespace osteo::diffcore
