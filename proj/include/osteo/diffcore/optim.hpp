#pragma once

#include <vector>

#include "osteo/diffcore/params.hpp"

namespace osteo::diffcore {

/// Adam with bias correction. State is kept per parameter in ParamSet order.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamSet& params);
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Plain gradient descent: w <- w - lr * g.
void sgd_step(ParamSet& params, double lr);

}  // namespace osteo::diffcore
