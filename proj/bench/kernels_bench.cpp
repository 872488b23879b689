#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "osteo/diffcore/kernels.hpp"

namespace k = osteo::kernels;

namespace {

std::vector<double> noise(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

// batch 16, 16 -> 32 channels, 3x3 stride 2 on a side x side input
k::ConvGeom layer(std::int64_t side) {
  k::ConvGeom g;
  g.batch = 16;
  g.in_channels = 16;
  g.out_channels = 32;
  g.height = g.width = static_cast<std::size_t>(side);
  g.kernel_h = g.kernel_w = 3;
  g.stride = 2;
  g.padding = 1;
  return g;
}

void BM_conv_forward_serial(benchmark::State& st) {
  const auto g = layer(st.range(0));
  const auto x = noise(g.batch * g.in_channels * g.height * g.width, 1);
  const auto w = noise(g.out_channels * g.patch_len(), 2);
  std::vector<double> y(g.batch * g.out_channels * g.out_pixels());
  for (auto _ : st) {
    k::serial::conv2d_forward(g, x, w, y);
    benchmark::DoNotOptimize(y.data());
  }
}

void BM_conv_forward_parallel(benchmark::State& st) {
  const auto g = layer(st.range(0));
  const auto x = noise(g.batch * g.in_channels * g.height * g.width, 1);
  const auto w = noise(g.out_channels * g.patch_len(), 2);
  std::vector<double> y(g.batch * g.out_channels * g.out_pixels());
  for (auto _ : st) {
    k::parallel::conv2d_forward(g, x, w, y);
    benchmark::DoNotOptimize(y.data());
  }
}

void BM_conv_backward_serial(benchmark::State& st) {
  const auto g = layer(st.range(0));
  const auto x = noise(g.batch * g.in_channels * g.height * g.width, 1);
  const auto w = noise(g.out_channels * g.patch_len(), 2);
  const auto dy = noise(g.batch * g.out_channels * g.out_pixels(), 3);
  std::vector<double> dx(x.size()), dw(w.size());
  for (auto _ : st) {
    k::serial::conv2d_backward_input(g, w, dy, dx);
    k::serial::conv2d_backward_weight(g, x, dy, dw);
    benchmark::DoNotOptimize(dx.data());
    benchmark::DoNotOptimize(dw.data());
  }
}

void BM_conv_backward_parallel(benchmark::State& st) {
  const auto g = layer(st.range(0));
  const auto x = noise(g.batch * g.in_channels * g.height * g.width, 1);
  const auto w = noise(g.out_channels * g.patch_len(), 2);
  const auto dy = noise(g.batch * g.out_channels * g.out_pixels(), 3);
  std::vector<double> dx(x.size()), dw(w.size());
  k::parallel::Columns cols;
  k::parallel::im2col(g, x, cols);
  for (auto _ : st) {
    k::parallel::conv2d_backward_input(g, w, dy, dx);
    k::parallel::conv2d_backward_weight(g, cols, dy, dw);
    benchmark::DoNotOptimize(dx.data());
    benchmark::DoNotOptimize(dw.data());
  }
}

template <bool Parallel>
void BM_matmul(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  const auto a = noise(n * n, 4), b = noise(n * n, 5);
  std::vector<double> c(n * n);
  for (auto _ : st) {
    std::fill(c.begin(), c.end(), 0.0);
    if constexpr (Parallel) {
      k::parallel::matmul_acc(n, n, n, a, b, c);
    } else {
      k::serial::matmul_acc(n, n, n, a, b, c);
    }
    benchmark::DoNotOptimize(c.data());
  }
  st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(n * n * n));
}

}  // namespace

BENCHMARK(BM_conv_forward_serial)->Arg(20)->Arg(40)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_conv_forward_parallel)->Arg(20)->Arg(40)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_conv_backward_serial)->Arg(20)->Arg(40)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_conv_backward_parallel)->Arg(20)->Arg(40)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_matmul<false>)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_matmul<true>)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
