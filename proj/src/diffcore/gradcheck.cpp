#include "osteo/diffcore/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "osteo/diffcore/tape.hpp"

namespace osteo::diffcore {

double grad_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& point,
                  double step) {
  Tensor x = point.detach();
  x.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor loss = fn(x);
    tape.backward(loss);
  }
  const std::vector<double> analytic(x.grad().begin(), x.grad().end());

  double worst = 0.0;
  NoGradScope no_grad;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    Tensor probe = point.detach();
    auto v = probe.mutable_values();
    const double orig = v[i];
    v[i] = orig + step;
    const double up = fn(probe).item();
    v[i] = orig - step;
    const double down = fn(probe).item();
    const double numeric = (up - down) / (2.0 * step);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

}  // namespace osteo::diffcore
