#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "osteo/dataio/image.hpp"
#include "osteo/diffcore/tensor.hpp"

namespace osteo::ot {

using dataio::LabelMap;
using diffcore::Tensor;

/// Row-major N x M matrix of pairwise costs in [0,1]; rows are prediction
/// atoms, columns are annotations.
struct CostMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  CostMatrix() = default;
  CostMatrix(std::size_t n, std::size_t m, std::vector<double> v);
  double at(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
};

/// Nonnegative N x M transport plan with the quantities it was solved for.
struct CouplingPlan {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> plan;
  std::vector<double> alpha;  // prediction marginal, when known
  std::vector<double> beta;
  double gamma = 1.0;
  double epsilon = 0.0;
  int sweeps = 0;
  double residual = 0.0;

  double at(std::size_t i, std::size_t j) const { return plan[i * cols + j]; }
  std::vector<double> row_sums() const;
  std::vector<double> col_sums() const;
  double transport_cost(const CostMatrix& c) const;
};

struct LossBreakdown {
  Tensor transport_term;  // sum_ij T*_ij C_ij
  Tensor kl_term;         // KL(row sums of T* || alpha)
  Tensor total;           // transport + lambda * kl
  double lambda = 0.0;
};

// ---- costs ----------------------------------------------------------------

/// Per-pixel argmax over the channel axis of [C,H,W]; ties go to the lower class.
LabelMap argmax_labels(const Tensor& scores);

/// 1 - mean class-wise IoU over classes present in either mask.
double pair_cost(const LabelMap& a, const LabelMap& b);
/// Same with `scores` [C,H,W] reduced by argmax.
double pair_cost(const Tensor& scores, const LabelMap& y);

/// Hard cost matrix between label maps.
CostMatrix cost_matrix(std::span<const LabelMap> atoms, std::span<const LabelMap> annotations);

/// Differentiable surrogate of the cost matrix. `probs` is [N,C,H,W] of
/// per-pixel class probabilities; each entry uses soft IoU
/// sum(min(p,q)) / sum(max(p,q)) against the one-hot annotation q, averaged
/// over the classes present in the annotation or in argmax(p). Returns [N,M].
Tensor soft_cost_matrix(const Tensor& probs, std::span<const LabelMap> annotations);

// ---- coupling -------------------------------------------------------------

/// Entropic transport with exact column marginals beta and row sums capped
/// at gamma. Alternating log-domain scaling: the column step matches beta,
/// the row step clips row sums with factor min(1, gamma / rowsum). Stops
/// after `iters` sweeps or once the marginal residual drops below 1e-9.
CouplingPlan solve_relaxed(const CostMatrix& c, std::span<const double> beta, double gamma,
                           double epsilon = 0.01, int iters = 200);

/// Exact minimiser of <T,C> over the same constraint set, by exhaustive
/// enumeration of the polytope's vertices. Only for N*M <= 6.
CouplingPlan brute_force_coupling(const CostMatrix& c, std::span<const double> beta, double gamma);

/// Linear ramp from gamma0 at step 0 to 1 at total_steps.
double anneal_gamma(long step, long total_steps, double gamma0);

/// Composite objective: the plan is a constant; `costs` [N,M] carries
/// gradients to the segmentation parameters and `alpha` [N] to the routing
/// parameters.
LossBreakdown assemble_loss(const CouplingPlan& plan, const Tensor& costs, const Tensor& alpha,
                            double lambda);

// ---- evaluation -----------------------------------------------------------

struct WeightedMasks {
  std::vector<LabelMap> masks;
  std::vector<double> weights;
};

/// sqrt(max(0, 2E[d(s,y)] - E[d(s,s')] - E[d(y,y')])) with d = pair_cost.
double ged_distance(const WeightedMasks& p, const WeightedMasks& q);

}  // namespace osteo::ot
