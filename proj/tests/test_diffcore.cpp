#include <cmath>
#include <filesystem>
#include <functional>
#include <random>

#include "doctest.h"
#include "osteo/diffcore/checkpoint.hpp"
#include "osteo/diffcore/errors.hpp"
#include "osteo/diffcore/gradcheck.hpp"
#include "osteo/diffcore/kernels.hpp"
#include "osteo/diffcore/ops.hpp"
#include "osteo/diffcore/optim.hpp"

using namespace osteo;
using namespace osteo::diffcore;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng) { return Tensor::randn(std::move(shape), rng); }

// Values bounded away from zero keep finite differences off ReLU kinks.
Tensor random_offzero(Shape shape, std::mt19937_64& rng) {
  Tensor t = Tensor::randn(std::move(shape), rng);
  for (auto& v : t.mutable_values()) v += (v >= 0 ? 0.2 : -0.2);
  return t;
}

}  // namespace

TEST_CASE("tensor shape contract") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
  Tensor t = Tensor::zeros({2, 3});
  CHECK(t.numel() == 6);
  CHECK_FALSE(t.has_grad());
  t.mutable_grad()[0] = 1.0;
  CHECK(t.grad().size() == t.numel());
}

TEST_CASE("conv2d examples") {
  std::mt19937_64 rng(1);
  SUBCASE("1x1 identity kernel") {
    Tensor x = random_tensor({1, 5, 4}, rng);
    Tensor y = conv2d(x, Tensor::full({1, 1, 1, 1}, 1.0), 1, 0);
    CHECK(y.shape() == x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
  }
  SUBCASE("zero kernel annihilates") {
    Tensor x = random_tensor({3, 6, 6}, rng);
    Tensor y = conv2d(x, Tensor::zeros({2, 3, 3, 3}), 1, 1);
    for (double v : y.values()) CHECK(v == 0.0);
  }
  SUBCASE("2x2 ones kernel sums the window") {
    Tensor x({1, 2, 2}, {1, 2, 3, 4});
    Tensor y = conv2d(x, Tensor::full({1, 1, 2, 2}, 1.0), 1, 0);
    REQUIRE(y.shape() == Shape{1, 1, 1});
    CHECK(y[0] == 10.0);
  }
  SUBCASE("output dims") {
    Tensor x = random_tensor({2, 7, 9}, rng);
    Tensor y = conv2d(x, Tensor::zeros({4, 2, 3, 3}), 2, 1);
    CHECK(y.shape() == Shape{4, (7 + 2 - 3) / 2 + 1, (9 + 2 - 3) / 2 + 1});
  }
  SUBCASE("channel mismatch") {
    CHECK_THROWS_AS(conv2d(Tensor::zeros({2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), 1, 1),
                    DimensionError);
  }
}

TEST_CASE("avg_pool examples") {
  Tensor c = Tensor::full({2, 4, 4}, 0.7);
  Tensor pooled = avg_pool(c, 2);
  for (double v : pooled.values()) CHECK(v == doctest::Approx(0.7).epsilon(1e-15));
  Tensor x({1, 2, 2}, {1, 3, 5, 7});
  Tensor y = avg_pool(x, 2);
  CHECK(y.shape() == Shape{1, 1, 1});
  CHECK(y[0] == 4.0);
  Tensor g = global_avg_pool(Tensor({2, 1, 2}, {1, 3, 10, 20}));
  CHECK(g.shape() == Shape{2});
  CHECK(g[0] == 2.0);
  CHECK(g[1] == 15.0);
  CHECK_THROWS_AS(avg_pool(Tensor::zeros({1, 3, 4}), 2), DimensionError);
}

TEST_CASE("softmax examples") {
  Tensor u = softmax(Tensor::full({4}, 3.0));
  for (double v : u.values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
  Tensor a = softmax(Tensor({3}, {0.1, -2.0, 1.5}));
  Tensor b = softmax(Tensor({3}, {100.1, 98.0, 101.5}));
  for (std::size_t i = 0; i < 3; ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
  Tensor c = softmax(Tensor({2}, {0.0, std::log(3.0)}));
  CHECK(std::abs(c[0] - 0.25) < 1e-15);
  CHECK(std::abs(c[1] - 0.75) < 1e-15);
}

TEST_CASE("softmax is a probability vector") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor p = softmax(Tensor::randn({7}, rng, 10.0));
    double s = 0.0;
    for (double v : p.values()) {
      CHECK(v >= 0.0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) < 1e-9);
  }
}

TEST_CASE("backward examples") {
  std::mt19937_64 rng(5);
  SUBCASE("sum gives ones") {
    Tensor w = random_tensor({3, 4}, rng).set_requires_grad(true);
    Tape tape;
    {
      TapeScope s(tape);
      backward(sum(w), tape);
    }
    for (double g : w.grad()) CHECK(g == 1.0);
  }
  SUBCASE("half squared norm gives w") {
    Tensor w = random_tensor({5}, rng);
    w.set_requires_grad(true);
    Tape tape;
    {
      TapeScope s(tape);
      backward(scale(sum(mul(w, w)), 0.5), tape);
    }
    for (std::size_t i = 0; i < w.numel(); ++i) CHECK(w.grad()[i] == doctest::Approx(w[i]).epsilon(1e-14));
  }
  SUBCASE("repeated backward accumulates in leaves") {
    Tensor w = random_tensor({4}, rng);
    w.set_requires_grad(true);
    Tape tape;
    TapeScope s(tape);
    Tensor loss = sum(scale(w, 3.0));
    tape.backward(loss);
    tape.backward(loss);
    for (double g : w.grad()) CHECK(g == 6.0);
  }
  SUBCASE("non-scalar loss rejected") {
    Tensor w = random_tensor({4}, rng);
    w.set_requires_grad(true);
    Tape tape;
    TapeScope s(tape);
    Tensor y = scale(w, 2.0);
    CHECK_THROWS_AS(tape.backward(y), ContractError);
  }
  SUBCASE("conv relu mean matches finite differences") {
    Tensor kernel = random_tensor({2, 1, 3, 3}, rng);
    for (int trial = 0; trial < 20; ++trial) {
      Tensor x = random_offzero({1, 3, 3}, rng);
      const double err = grad_check(
          [&](const Tensor& in) { return mean(relu(conv2d(in, kernel, 1, 1))); }, x, 1e-4);
      CHECK(err < 1e-4);
    }
  }
}

TEST_CASE("grad_check examples") {
  std::mt19937_64 rng(11);
  Tensor p = random_tensor({6}, rng);
  CHECK(grad_check([](const Tensor& x) { return sum(x); }, p, 1e-4) < 1e-10);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor q = random_tensor({5}, rng);
    CHECK(grad_check([](const Tensor& x) { return select(softmax(x), 2); }, q, 1e-4) < 1e-4);
  }
}

// Every differentiable primitive against central differences at 20 random points.
TEST_CASE("gradient correctness of every primitive") {
  std::mt19937_64 rng(17);
  Tensor other = random_tensor({2, 3, 4, 4}, rng);
  Tensor kernel = random_tensor({3, 3, 3, 3}, rng);
  Tensor bias = random_tensor({3}, rng);
  Tensor wmat = random_tensor({5, 4}, rng);
  Tensor wbias = random_tensor({5}, rng);
  Tensor weights = random_tensor({2, 3, 4, 4}, rng);
  const std::vector<std::size_t> cols{1, 0, 4};

  using Fn = std::function<Tensor(const Tensor&)>;
  auto weighted = [&](const Tensor& t) {
    // Random linear functional so gradients are not trivially uniform.
    std::mt19937_64 local(99);
    Tensor r = Tensor::randn(t.shape(), local);
    return sum(mul(t, r));
  };
  struct Case {
    const char* name;
    Shape shape;
    Fn fn;
  };
  const std::vector<Case> cases = {
      {"add", {2, 3, 4, 4}, [&](const Tensor& x) { return weighted(add(x, other)); }},
      {"sub", {2, 3, 4, 4}, [&](const Tensor& x) { return weighted(sub(other, x)); }},
      {"mul", {2, 3, 4, 4}, [&](const Tensor& x) { return weighted(mul(x, x)); }},
      {"scale", {3, 4}, [&](const Tensor& x) { return weighted(scale(x, -1.7)); }},
      {"add_scalar", {3, 4}, [&](const Tensor& x) { return weighted(add_scalar(x, 0.3)); }},
      {"relu", {3, 4}, [&](const Tensor& x) { return weighted(relu(x)); }},
      {"exp", {3, 4}, [&](const Tensor& x) { return weighted(exp(x)); }},
      {"log", {3, 4}, [&](const Tensor& x) { return weighted(log(exp(x))); }},
      {"mean", {3, 4}, [&](const Tensor& x) { return mean(mul(x, x)); }},
      {"reshape", {3, 4}, [&](const Tensor& x) { return weighted(reshape(x, {4, 3})); }},
      {"transpose", {3, 4}, [&](const Tensor& x) { return weighted(transpose(x)); }},
      {"matmul lhs", {3, 4}, [&](const Tensor& x) { return weighted(matmul(x, transpose(wmat))); }},
      {"matmul rhs", {4, 5}, [&](const Tensor& x) { return weighted(matmul(wmat, x)); }},
      {"linear", {3, 4}, [&](const Tensor& x) { return weighted(linear(x, wmat, wbias)); }},
      {"linear weight", {5, 4}, [&](const Tensor& w) { return weighted(linear(Tensor::full({2, 4}, 0.5), w, wbias)); }},
      {"conv2d input", {2, 3, 5, 5}, [&](const Tensor& x) { return weighted(conv2d(x, kernel, bias, 2, 1)); }},
      {"conv2d kernel", {3, 3, 3, 3}, [&](const Tensor& k) { return weighted(conv2d(other, k, bias, 1, 1)); }},
      {"conv2d bias", {3}, [&](const Tensor& b) { return weighted(conv2d(other, kernel, b, 1, 0)); }},
      {"avg_pool", {2, 3, 4, 4}, [&](const Tensor& x) { return weighted(avg_pool(x, 2)); }},
      {"global_avg_pool", {2, 3, 4, 4}, [&](const Tensor& x) { return weighted(global_avg_pool(x)); }},
      {"upsample", {3, 2, 2}, [&](const Tensor& x) { return weighted(upsample_nearest(x, 2)); }},
      {"concat", {2, 3, 4, 4}, [&](const Tensor& x) { return weighted(concat_channels(x, other)); }},
      {"softmax axis", {2, 3, 4, 4}, [&](const Tensor& x) { return weighted(softmax(x, 1)); }},
      {"log_softmax", {3, 5}, [&](const Tensor& x) { return weighted(log_softmax(x)); }},
      {"pick", {3, 5}, [&](const Tensor& x) { return weighted(pick(log_softmax(x), cols)); }},
      {"l2_normalize", {4, 6}, [&](const Tensor& x) { return weighted(l2_normalize_rows(x)); }},
      {"stack", {3, 4}, [&](const Tensor& x) { return weighted(stack({x, scale(x, 2.0)})); }},
      {"slice", {5, 2}, [&](const Tensor& x) { return weighted(slice(x, 1, 4)); }},
  };
  for (const auto& c : cases) {
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      worst = std::max(worst, grad_check(c.fn, random_offzero(c.shape, rng), 1e-4));
    }
    INFO(c.name);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("parallel kernels agree with the serial reference") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    kernels::ConvGeom g;
    g.batch = 1 + trial % 3;
    g.in_channels = 1 + trial % 4;
    g.height = 5 + trial;
    g.width = 4 + 2 * trial;
    g.out_channels = 1 + (trial * 3) % 7;
    g.kernel_h = g.kernel_w = (trial % 2) ? 3 : 1;
    g.stride = 1 + trial % 2;
    g.padding = trial % 2;
    Tensor x = random_tensor({g.batch, g.in_channels, g.height, g.width}, rng);
    Tensor w = random_tensor({g.out_channels, g.in_channels, g.kernel_h, g.kernel_w}, rng);
    Tensor dy = random_tensor({g.batch, g.out_channels, g.out_h(), g.out_w()}, rng);
    std::vector<double> y1(dy.numel()), y2(dy.numel());
    kernels::serial::conv2d_forward(g, x.values(), w.values(), y1);
    kernels::parallel::Columns cols;
    kernels::parallel::conv2d_forward(g, x.values(), w.values(), y2, &cols);
    for (std::size_t i = 0; i < y1.size(); ++i) CHECK(std::abs(y1[i] - y2[i]) < 1e-12);

    std::vector<double> dx1(x.numel()), dx2(x.numel());
    kernels::serial::conv2d_backward_input(g, w.values(), dy.values(), dx1);
    kernels::parallel::conv2d_backward_input(g, w.values(), dy.values(), dx2);
    for (std::size_t i = 0; i < dx1.size(); ++i) CHECK(std::abs(dx1[i] - dx2[i]) < 1e-12);

    std::vector<double> dw1(w.numel()), dw2(w.numel());
    kernels::serial::conv2d_backward_weight(g, x.values(), dy.values(), dw1);
    kernels::parallel::conv2d_backward_weight(g, cols, dy.values(), dw2);
    for (std::size_t i = 0; i < dw1.size(); ++i) CHECK(std::abs(dw1[i] - dw2[i]) < 1e-11);
  }
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t m = 3 + trial, k = 2 + 2 * trial, n = 1 + 3 * trial;
    Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
    Tensor bt = random_tensor({n, k}, rng), at = random_tensor({k, m}, rng);
    std::vector<double> c1(m * n), c2(m * n);
    kernels::serial::matmul_acc(m, k, n, a.values(), b.values(), c1);
    kernels::parallel::matmul_acc(m, k, n, a.values(), b.values(), c2);
    kernels::serial::matmul_nt_acc(m, k, n, a.values(), bt.values(), c1);
    kernels::parallel::matmul_nt_acc(m, k, n, a.values(), bt.values(), c2);
    kernels::serial::matmul_tn_acc(m, k, n, at.values(), b.values(), c1);
    kernels::parallel::matmul_tn_acc(m, k, n, at.values(), b.values(), c2);
    for (std::size_t i = 0; i < c1.size(); ++i) CHECK(std::abs(c1[i] - c2[i]) < 1e-12);
  }
}

TEST_CASE("forward values and gradients are deterministic") {
  auto run = [] {
    std::mt19937_64 rng(31);
    Tensor x = Tensor::randn({2, 2, 6, 6}, rng);
    Tensor k = Tensor::randn({3, 2, 3, 3}, rng).set_requires_grad(true);
    Tape tape;
    TapeScope s(tape);
    Tensor loss = mean(relu(conv2d(x, k, 1, 1)));
    tape.backward(loss);
    std::vector<double> out{loss.item()};
    out.insert(out.end(), k.grad().begin(), k.grad().end());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("no recording without an active tape") {
  Tensor w = Tensor::full({3}, 2.0, true);
  Tensor y = scale(w, 2.0);
  CHECK(y.is_leaf());
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("checkpoint round trip and mismatch detection") {
  std::mt19937_64 rng(41);
  ParamSet a;
  a.add("conv.w", Tensor::randn({2, 1, 3, 3}, rng));
  a.add("fc.b", Tensor::randn({4}, rng));
  const auto path = std::filesystem::temp_directory_path() / "osteo_test_ckpt.bin";
  save_checkpoint(path, a);
  ParamSet b;
  b.add("conv.w", Tensor::zeros({2, 1, 3, 3}));
  b.add("fc.b", Tensor::zeros({4}));
  load_checkpoint(path, b);
  CHECK(a.flat_values() == b.flat_values());
  ParamSet c;
  c.add("conv.w", Tensor::zeros({2, 1, 3, 3}));
  c.add("fc.b", Tensor::zeros({5}));
  CHECK_THROWS_AS(load_checkpoint(path, c), DimensionError);
  std::filesystem::remove(path);
}

TEST_CASE("adam reduces a quadratic") {
  ParamSet p;
  p.add("w", Tensor({3}, {1.0, -2.0, 3.0}));
  Adam opt(0.1);
  for (int i = 0; i < 200; ++i) {
    p.zero_grad();
    Tape tape;
    TapeScope s(tape);
    Tensor& w = p.at("w");
    tape.backward(sum(mul(w, w)));
    opt.step(p);
  }
  for (double v : p.at("w").values()) CHECK(std::abs(v) < 0.05);
}
