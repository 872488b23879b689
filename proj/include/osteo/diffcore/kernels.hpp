#pragma once

#include <cstddef>
#include <span>
#include <vector>

// Numeric inner loops behind the differentiable operations.
//
// Two implementations with identical contracts:
//   parallel:: im2col + row-blocked products, OpenMP over independent
//              output rows. Every output element is written by exactly one
//              thread with a fixed summation order, so results do not depend
//              on the thread count.
//   serial::   direct textbook loops, kept as the reference the tests and
//              the benchmark compare against.

namespace osteo::kernels {

struct ConvGeom {
  std::size_t batch = 1;
  std::size_t in_channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t out_channels = 1;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_h() const { return (height + 2 * padding - kernel_h) / stride + 1; }
  std::size_t out_w() const { return (width + 2 * padding - kernel_w) / stride + 1; }
  std::size_t patch_len() const { return in_channels * kernel_h * kernel_w; }
  std::size_t out_pixels() const { return out_h() * out_w(); }
};

namespace serial {

void conv2d_forward(const ConvGeom& g, std::span<const double> x, std::span<const double> w,
                    std::span<double> y);
void conv2d_backward_input(const ConvGeom& g, std::span<const double> w,
                           std::span<const double> dy, std::span<double> dx);
void conv2d_backward_weight(const ConvGeom& g, std::span<const double> x,
                            std::span<const double> dy, std::span<double> dw);

// c[m,n] += a[m,k] * b[k,n]
void matmul_acc(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
                std::span<const double> b, std::span<double> c);
// c[m,n] += a[m,k] * b[n,k]^T
void matmul_nt_acc(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
                   std::span<const double> b, std::span<double> c);
// c[m,n] += a[k,m]^T * b[k,n]
void matmul_tn_acc(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
                   std::span<const double> b, std::span<double> c);

}  // namespace serial

namespace parallel {

/// Unfolded input patches, one [patch_len x out_pixels] block per sample.
/// Produced by the forward pass and reused by the weight gradient.
using Columns = std::vector<double>;

void im2col(const ConvGeom& g, std::span<const double> x, Columns& cols);

void conv2d_forward(const ConvGeom& g, std::span<const double> x, std::span<const double> w,
                    std::span<double> y, Columns* keep_cols = nullptr);
void conv2d_backward_input(const ConvGeom& g, std::span<const double> w,
                           std::span<const double> dy, std::span<double> dx);
void conv2d_backward_weight(const ConvGeom& g, const Columns& cols, std::span<const double> dy,
                            std::span<double> dw);

void matmul_acc(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
                std::span<const double> b, std::span<double> c);
void matmul_nt_acc(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
                   std::span<const double> b, std::span<double> c);
void matmul_tn_acc(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
                   std::span<const double> b, std::span<double> c);

}  // namespace parallel

/// Dot product with four fixed-order partial sums.
double dot(const double* a, const double* b, std::size_t n);

int max_threads();

}  // namespace osteo::kernels
