#include <doctest.h>

#include <cmath>
#include <random>

#include "osteo/diffcore/errors.hpp"
#include "osteo/diffcore/gradcheck.hpp"
#include "osteo/diffcore/ops.hpp"
#include "osteo/diffcore/rng.hpp"
#include "osteo/diffcore/tape.hpp"
#include "osteo/otcoupling/otcoupling.hpp"

using namespace osteo;
using namespace osteo::ot;
namespace dc = osteo::diffcore;

namespace {

LabelMap mask2x2(std::initializer_list<std::uint8_t> v) {
  LabelMap m(2, 2);
  std::copy(v.begin(), v.end(), m.labels.begin());
  return m;
}

CostMatrix random_costs(std::size_t n, std::size_t m, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(n * m);
  for (auto& x : v) x = u(rng);
  return CostMatrix(n, m, std::move(v));
}

std::vector<double> random_simplex(std::size_t m, Rng& rng) {
  std::exponential_distribution<double> e(1.0);
  std::vector<double> b(m);
  double s = 0.0;
  for (auto& x : b) s += (x = e(rng));
  for (auto& x : b) x /= s;
  return b;
}

void check_feasible(const CouplingPlan& p, std::span<const double> beta, double gamma, double tol) {
  for (double t : p.plan) CHECK(t >= 0.0);
  const auto cols = p.col_sums();
  for (std::size_t j = 0; j < cols.size(); ++j) CHECK(std::abs(cols[j] - beta[j]) < tol);
  for (double r : p.row_sums()) CHECK(r <= gamma + tol);
}

}  // namespace

TEST_CASE("pair_cost on hand-built masks") {
  const auto a = mask2x2({1, 1, 0, 0});
  const auto b = mask2x2({0, 1, 0, 1});
  CHECK(pair_cost(a, a) == 0.0);
  CHECK(pair_cost(a, b) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(pair_cost(a, mask2x2({0, 0, 1, 1})) == 1.0);

  // scores whose argmax reproduces `a`
  Tensor s({2, 2, 2}, {0.1, 0.2, 0.9, 0.7, 0.9, 0.8, 0.1, 0.3});
  CHECK(argmax_labels(s) == a);
  CHECK(pair_cost(s, b) == doctest::Approx(2.0 / 3.0));
  CHECK_THROWS_AS(pair_cost(a, LabelMap(3, 2)), DimensionError);
}

TEST_CASE("pair_cost is symmetric and bounded") {
  Rng rng(7);
  std::uniform_int_distribution<int> lab(0, 3);
  for (int t = 0; t < 200; ++t) {
    LabelMap a(5, 6), b(5, 6);
    for (auto& v : a.labels) v = static_cast<std::uint8_t>(lab(rng));
    for (auto& v : b.labels) v = static_cast<std::uint8_t>(lab(rng));
    const double ab = pair_cost(a, b);
    CHECK(ab == pair_cost(b, a));
    CHECK(ab >= 0.0);
    CHECK(ab <= 1.0);
  }
}

TEST_CASE("soft cost equals the hard cost on one-hot inputs") {
  Rng rng(11);
  std::uniform_int_distribution<int> lab(0, 2);
  const std::size_t n = 3, classes = 3, h = 4, w = 5;
  std::vector<LabelMap> atoms(n, LabelMap(h, w)), ann(2, LabelMap(h, w));
  for (auto* set : {&atoms, &ann})
    for (auto& m : *set)
      for (auto& v : m.labels) v = static_cast<std::uint8_t>(lab(rng));
  std::vector<double> onehot(n * classes * h * w, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < h * w; ++p) onehot[(i * classes + atoms[i].labels[p]) * h * w + p] = 1.0;
  const Tensor soft = soft_cost_matrix(Tensor({n, classes, h, w}, onehot), ann);
  const CostMatrix hard = cost_matrix(atoms, ann);
  for (std::size_t k = 0; k < hard.values.size(); ++k) CHECK(soft[k] == doctest::Approx(hard.values[k]).epsilon(1e-14));
}

TEST_CASE("soft cost gradient matches finite differences") {
  Rng rng(3);
  std::uniform_int_distribution<int> lab(0, 2);
  const std::size_t n = 2, classes = 3, h = 3, w = 3;
  std::vector<LabelMap> ann(2, LabelMap(h, w));
  for (auto& m : ann)
    for (auto& v : m.labels) v = static_cast<std::uint8_t>(lab(rng));
  const Tensor weights = Tensor::randn({n, 2}, rng, 1.0, false);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor logits = Tensor::randn({n, classes, h, w}, rng, 1.0, true);
    auto fn = [&](const Tensor& x) {
      return dc::sum(dc::mul(soft_cost_matrix(dc::softmax(x, 1), ann), weights));
    };
    CHECK(dc::grad_check(fn, logits) < 1e-4);
  }
}

TEST_CASE("solve_relaxed reference cases") {
  SUBCASE("forced mass") {
    const std::vector<double> beta{1.0};
    const auto p = solve_relaxed(CostMatrix(1, 1, {0.4}), beta, 1.0);
    CHECK(p.plan[0] == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("zero-cost matching") {
    const std::vector<double> beta{0.5, 0.5};
    const CostMatrix c(2, 2, {0, 1, 1, 0});
    const auto p = solve_relaxed(c, beta, 1.0, 1e-3);
    CHECK(p.at(0, 0) == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(p.at(1, 1) == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(p.transport_cost(c) < 1e-9);
  }
  SUBCASE("capped instance agrees with the exact oracle") {
    const std::vector<double> beta{0.5, 0.5};
    const CostMatrix c(2, 2, {0.2, 0.8, 0.6, 0.3});
    const auto p = solve_relaxed(c, beta, 0.7);
    const auto q = brute_force_coupling(c, beta, 0.7);
    for (std::size_t k = 0; k < 4; ++k) CHECK(std::abs(p.plan[k] - q.plan[k]) < 1e-3);
  }
  SUBCASE("errors") {
    const CostMatrix c(2, 2, {0, 1, 1, 0});
    const std::vector<double> bad{0.5, 0.6}, ok{0.5, 0.5};
    CHECK_THROWS_AS(solve_relaxed(c, bad, 1.0), ContractError);
    CHECK_THROWS_AS(solve_relaxed(c, ok, 0.4), InfeasibleError);
    CHECK_THROWS_AS(solve_relaxed(c, ok, 1.0, 0.0), ContractError);
  }
}

TEST_CASE("brute_force_coupling reference cases") {
  SUBCASE("inactive cap picks column minima") {
    const std::vector<double> beta{0.3, 0.7};
    const CostMatrix c(3, 2, {0.5, 0.9, 0.1, 0.4, 0.8, 0.2});
    const auto p = brute_force_coupling(c, beta, 1.0);
    CHECK(p.at(1, 0) == doctest::Approx(0.3));
    CHECK(p.at(2, 1) == doctest::Approx(0.7));
  }
  SUBCASE("cap at 1/N binds every row") {
    Rng rng(5);
    const auto c = random_costs(3, 2, rng);
    const std::vector<double> beta{0.4, 0.6};
    const auto p = brute_force_coupling(c, beta, 1.0 / 3.0);
    for (double r : p.row_sums()) CHECK(r == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  }
  SUBCASE("too large") {
    Rng rng(1);
    const std::vector<double> beta{0.5, 0.5};
    CHECK_THROWS_AS(brute_force_coupling(random_costs(4, 2, rng), beta, 1.0), ContractError);
  }
}

TEST_CASE("solver plans are feasible and near the oracle") {
  Rng rng(2024);
  const std::pair<std::size_t, std::size_t> shapes[] = {{1, 1}, {2, 1}, {1, 3}, {2, 2}, {3, 2}, {2, 3}, {6, 1}, {1, 6}};
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 160; ++t) {
    const auto [n, m] = shapes[t % std::size(shapes)];
    const auto c = random_costs(n, m, rng);
    const auto beta = random_simplex(m, rng);
    const double gamma = 1.0 / static_cast<double>(n) + u(rng) * (1.0 - 1.0 / static_cast<double>(n));
    const auto p = solve_relaxed(c, beta, gamma);
    check_feasible(p, beta, gamma, 1e-6);
    const double exact = brute_force_coupling(c, beta, gamma).transport_cost(c);
    CHECK(std::abs(p.transport_cost(c) - exact) <= 1e-3 + 2 * 0.01 * std::log(static_cast<double>(n * m)));
  }
}

TEST_CASE("feasibility at the tightest cap on larger instances") {
  Rng rng(99);
  for (int t = 0; t < 20; ++t) {
    const auto c = random_costs(16, 3, rng);
    const auto beta = random_simplex(3, rng);
    check_feasible(solve_relaxed(c, beta, 1.0 / 16.0), beta, 1.0 / 16.0, 1e-6);
    check_feasible(solve_relaxed(c, beta, 0.75), beta, 0.75, 1e-6);
  }
}

// One atom cheap for every annotation: the collapse the row cap is there to
// prevent, and the regime the annealed cap operates in during training.
CostMatrix dominant_atom_costs(std::size_t n, std::size_t m, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(n * m);
  for (std::size_t k = 0; k < v.size(); ++k) v[k] = k < m ? 0.05 * u(rng) : 0.1 + 0.9 * u(rng);
  return CostMatrix(n, m, std::move(v));
}

TEST_CASE("transport cost does not increase as the cap loosens") {
  Rng rng(77);
  const std::vector<double> beta{0.5, 0.5};
  for (int t = 0; t < 50; ++t) {
    const auto c = dominant_atom_costs(16, 2, rng);
    double prev = std::numeric_limits<double>::infinity();
    for (int k = 0; k < 10; ++k) {
      const double cost = solve_relaxed(c, beta, 0.75 + 0.25 * k / 9.0).transport_cost(c);
      CHECK(cost <= prev + 1e-12);
      prev = cost;
    }
  }
}

TEST_CASE("exact transport cost is monotone in the cap") {
  Rng rng(78);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 100; ++t) {
    const auto c = random_costs(3, 2, rng);
    const auto beta = random_simplex(2, rng);
    double prev = std::numeric_limits<double>::infinity();
    for (int k = 0; k < 10; ++k) {
      const double gamma = 1.0 / 3.0 + (2.0 / 3.0) * k / 9.0;
      const double cost = brute_force_coupling(c, beta, gamma).transport_cost(c);
      CHECK(cost <= prev + 1e-12);
      prev = cost;
    }
  }
}

TEST_CASE("entropic bias bounds monotonicity slips on dense instances") {
  // The regularised optimum may trade a little transport cost for entropy
  // once the cap stops binding; the slip stays far below the 1e-3 slack.
  Rng rng(79);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const auto c = random_costs(4, 3, rng);
    const auto beta = random_simplex(3, rng);
    double prev = std::numeric_limits<double>::infinity();
    for (int k = 0; k < 10; ++k) {
      const double cost = solve_relaxed(c, beta, 0.75 + 0.25 * k / 9.0).transport_cost(c);
      worst = std::max(worst, cost - prev);
      prev = cost;
    }
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("solver converges at smaller temperatures") {
  Rng rng(80);
  for (int t = 0; t < 60; ++t) {
    const std::size_t n = 2 + t % 15, m = 1 + t % 3;
    const auto c = random_costs(n, m, rng);
    const auto beta = random_simplex(m, rng);
    for (double gamma : {std::max(0.75, 1.0 / n), 0.9, 1.0}) {
      const auto p = solve_relaxed(c, beta, gamma, 1e-3);
      CHECK(p.residual < 1e-6);
      check_feasible(p, beta, gamma, 1e-9);
    }
  }
}

TEST_CASE("anneal_gamma ramp") {
  CHECK(anneal_gamma(0, 100, 0.75) == 0.75);
  CHECK(anneal_gamma(100, 100, 0.75) == 1.0);
  CHECK(anneal_gamma(50, 100, 0.6) == doctest::Approx(0.8));
  CHECK(anneal_gamma(400, 100, 0.6) == 1.0);
}

TEST_CASE("assemble_loss terms") {
  CouplingPlan p;
  p.rows = p.cols = 2;
  p.plan = {0.5, 0, 0, 0.5};
  const Tensor costs({2, 2}, {0, 1, 1, 0});
  const Tensor alpha({2}, {0.5, 0.5});
  for (double lambda : {0.0, 1.0, 3.0}) {
    const auto l = assemble_loss(p, costs, alpha, lambda);
    CHECK(l.total.item() == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(l.kl_term.item() == doctest::Approx(0.0).epsilon(1e-15));
  }
  const auto l0 = assemble_loss(p, Tensor({2, 2}, {0.3, 1, 1, 0.1}), Tensor({2}, {0.9, 0.1}), 0.0);
  CHECK(l0.total.item() == l0.transport_term.item());
  const auto l1 = assemble_loss(p, costs, Tensor({2}, {0.9, 0.1}), 1.0);
  CHECK(l1.kl_term.item() == doctest::Approx(0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1)));
  CHECK_THROWS_AS(assemble_loss(p, costs, alpha, -1.0), ContractError);
  CHECK_THROWS_AS(assemble_loss(p, Tensor({2, 3}, std::vector<double>(6)), alpha, 1.0), DimensionError);
}

TEST_CASE("routing gradient through the loss matches finite differences") {
  Rng rng(31);
  for (int t = 0; t < 20; ++t) {
    const auto c = random_costs(4, 2, rng);
    const auto beta = random_simplex(2, rng);
    const auto plan = solve_relaxed(c, beta, 0.6);
    const Tensor costs({4, 2}, c.values);
    Tensor logits = Tensor::randn({2}, rng, 1.0, true);
    // Two routes, two atoms each: alpha_i = pi_k / S.
    auto fn = [&](const Tensor& z) {
      const Tensor pi = dc::softmax(z);
      const Tensor half = dc::scale(pi, 0.5);
      const Tensor a0 = dc::select(half, 0);
      const Tensor a1 = dc::select(half, 1);
      const Tensor a = dc::reshape(dc::stack({a0, a0, a1, a1}), {4});
      return assemble_loss(plan, costs, a, 1.0).total;
    };
    CHECK(dc::grad_check(fn, logits) < 1e-4);
  }
}

TEST_CASE("ged_distance closed forms") {
  const auto a = mask2x2({1, 1, 0, 0});
  const auto b = mask2x2({0, 0, 1, 1});
  const auto c = mask2x2({0, 1, 0, 1});
  CHECK(ged_distance({{a}, {1.0}}, {{a}, {1.0}}) == 0.0);
  CHECK(ged_distance({{a}, {1.0}}, {{b}, {1.0}}) == doctest::Approx(std::sqrt(2.0)));
  const WeightedMasks p{{a, b}, {0.5, 0.5}}, q{{c}, {1.0}};
  const double dac = pair_cost(a, c), dbc = pair_cost(b, c), dab = pair_cost(a, b);
  const double ged2 = 2 * (0.5 * dac + 0.5 * dbc) - 0.5 * dab;
  CHECK(ged_distance(p, q) == doctest::Approx(std::sqrt(ged2)));
  CHECK_THROWS_AS(ged_distance({{a, b}, {0.5, 0.6}}, q), ContractError);
}
