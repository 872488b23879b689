#include <algorithm>
#include <cmath>

#include "osteo/diffcore/errors.hpp"
#include "osteo/diffcore/ops.hpp"
#include "osteo/otcoupling/otcoupling.hpp"

namespace osteo::ot {

namespace dc = osteo::diffcore;

namespace {

std::size_t class_bound(const LabelMap& a) {
  std::size_t mx = 0;
  for (auto v : a.labels) mx = std::max<std::size_t>(mx, v);
  return mx + 1;
}

void argmax_into(const double* scores, std::size_t classes, std::size_t plane, std::uint8_t* out) {
  for (std::size_t p = 0; p < plane; ++p) {
    std::size_t best = 0;
    double bv = scores[p];
    for (std::size_t c = 1; c < classes; ++c) {
      const double v = scores[c * plane + p];
      if (v > bv) {
        bv = v;
        best = c;
      }
    }
    out[p] = static_cast<std::uint8_t>(best);
  }
}

}  // namespace

LabelMap argmax_labels(const Tensor& scores) {
  if (scores.dim() != 3) throw DimensionError("argmax_labels expects [C,H,W]");
  LabelMap out(scores.size(1), scores.size(2));
  argmax_into(scores.values().data(), scores.size(0), out.size(), out.labels.data());
  return out;
}

double pair_cost(const LabelMap& a, const LabelMap& b) {
  if (a.height != b.height || a.width != b.width) throw DimensionError("pair_cost: mask sizes differ");
  if (a.size() == 0) throw ContractError("pair_cost: empty masks");
  const std::size_t classes = std::max(class_bound(a), class_bound(b));
  std::vector<std::size_t> inter(classes, 0), uni(classes, 0);
  for (std::size_t p = 0; p < a.size(); ++p) {
    const auto x = a.labels[p], y = b.labels[p];
    if (x == y) {
      ++inter[x];
      ++uni[x];
    } else {
      ++uni[x];
      ++uni[y];
    }
  }
  double total = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    if (uni[c] == 0) continue;
    total += static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
    ++present;
  }
  if (present == 0) throw ContractError("pair_cost: empty class set");
  return 1.0 - total / static_cast<double>(present);
}

double pair_cost(const Tensor& scores, const LabelMap& y) {
  if (scores.dim() != 3 || scores.size(1) != y.height || scores.size(2) != y.width) {
    throw DimensionError("pair_cost: scores " + dc::shape_str(scores.shape()) + " vs label map");
  }
  return pair_cost(argmax_labels(scores), y);
}

CostMatrix cost_matrix(std::span<const LabelMap> atoms, std::span<const LabelMap> annotations) {
  CostMatrix c(atoms.size(), annotations.size(), std::vector<double>(atoms.size() * annotations.size()));
  for (std::size_t i = 0; i < atoms.size(); ++i)
    for (std::size_t j = 0; j < annotations.size(); ++j) c.values[i * c.cols + j] = pair_cost(atoms[i], annotations[j]);
  return c;
}

Tensor soft_cost_matrix(const Tensor& probs, std::span<const LabelMap> annotations) {
  if (probs.dim() != 4) throw DimensionError("soft_cost_matrix expects probabilities [N,C,H,W]");
  const std::size_t n = probs.size(0), classes = probs.size(1);
  const std::size_t plane = probs.size(2) * probs.size(3);
  const std::size_t m = annotations.size();
  for (const auto& y : annotations) {
    if (y.height != probs.size(2) || y.width != probs.size(3)) throw DimensionError("soft_cost_matrix: annotation size");
    if (class_bound(y) > classes) throw DimensionError("soft_cost_matrix: annotation class exceeds channel count");
  }
  // Per (atom, annotation): which classes count, and the soft intersection / union.
  struct Entry {
    std::vector<std::uint8_t> active;
    std::vector<double> inter, uni;
    std::size_t count = 0;
  };
  std::vector<Entry> entries(n * m);
  std::vector<double> out(n * m);
  std::vector<std::uint8_t> pred(plane);
  std::vector<std::size_t> label_count(classes);
  for (std::size_t i = 0; i < n; ++i) {
    const double* p = probs.values().data() + i * classes * plane;
    argmax_into(p, classes, plane, pred.data());
    for (std::size_t j = 0; j < m; ++j) {
      const LabelMap& y = annotations[j];
      Entry& e = entries[i * m + j];
      e.active.assign(classes, 0);
      e.inter.assign(classes, 0.0);
      e.uni.assign(classes, 0.0);
      std::fill(label_count.begin(), label_count.end(), 0);
      for (std::size_t q = 0; q < plane; ++q) {
        e.active[y.labels[q]] = 1;
        e.active[pred[q]] = 1;
        ++label_count[y.labels[q]];
      }
      double iou_sum = 0.0;
      for (std::size_t c = 0; c < classes; ++c) {
        if (!e.active[c]) continue;
        ++e.count;
        const double* pc = p + c * plane;
        double inter = 0.0, outside = 0.0;
        for (std::size_t q = 0; q < plane; ++q) {
          if (y.labels[q] == c) {
            inter += pc[q];
          } else {
            outside += pc[q];
          }
        }
        e.inter[c] = inter;
        e.uni[c] = static_cast<double>(label_count[c]) + outside;
        iou_sum += e.uni[c] > 0.0 ? inter / e.uni[c] : 1.0;
      }
      out[i * m + j] = 1.0 - iou_sum / static_cast<double>(e.count);
    }
  }
  Tensor y({n, m}, std::move(out));
  std::vector<LabelMap> labels(annotations.begin(), annotations.end());
  dc::record_op({probs}, y, [probs, y, labels, entries = std::move(entries), n, m, classes, plane]() {
    auto g = y.grad();
    auto d = probs.mutable_grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const double gij = g[i * m + j];
        if (gij == 0.0) continue;
        const Entry& e = entries[i * m + j];
        const auto& lab = labels[j].labels;
        const double w = -gij / static_cast<double>(e.count);
        for (std::size_t c = 0; c < classes; ++c) {
          if (!e.active[c] || e.uni[c] <= 0.0) continue;
          const double in_label = w / e.uni[c];
          const double off_label = -w * e.inter[c] / (e.uni[c] * e.uni[c]);
          double* dc_ = d.data() + (i * classes + c) * plane;
          for (std::size_t q = 0; q < plane; ++q) dc_[q] += lab[q] == c ? in_label : off_label;
        }
      }
  });
  return y;
}

LossBreakdown assemble_loss(const CouplingPlan& plan, const Tensor& costs, const Tensor& alpha,
                            double lambda) {
  if (lambda < 0.0) throw ContractError("lambda must be nonnegative");
  if (costs.dim() != 2 || costs.size(0) != plan.rows || costs.size(1) != plan.cols) {
    throw DimensionError("assemble_loss: costs " + dc::shape_str(costs.shape()) + " vs plan " +
                         std::to_string(plan.rows) + "x" + std::to_string(plan.cols));
  }
  if (alpha.numel() != plan.rows) throw DimensionError("assemble_loss: alpha length must equal N");
  for (double a : alpha.values()) {
    if (!(a > 0.0)) throw ContractError("assemble_loss: alpha must be strictly positive");
  }
  const Tensor t_const({plan.rows, plan.cols}, plan.plan);
  Tensor transport = dc::sum(dc::mul(t_const, costs));

  // KL(r || alpha) = sum_i r_i log r_i - sum_i r_i log alpha_i; only the second part depends on alpha.
  const auto r = plan.row_sums();
  double entropy_part = 0.0;
  for (double ri : r) entropy_part += ri > 0.0 ? ri * std::log(std::max(ri, 1e-12)) : 0.0;
  std::vector<double> neg_r(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) neg_r[i] = -r[i];
  Tensor log_alpha = dc::log(dc::reshape(alpha, {plan.rows}));
  Tensor kl = dc::add_scalar(dc::sum(dc::mul(Tensor({plan.rows}, neg_r), log_alpha)), entropy_part);

  LossBreakdown out;
  out.lambda = lambda;
  out.transport_term = transport;
  out.kl_term = kl;
  out.total = lambda == 0.0 ? dc::add_scalar(transport, 0.0) : dc::add(transport, dc::scale(kl, lambda));
  return out;
}

double ged_distance(const WeightedMasks& p, const WeightedMasks& q) {
  auto check = [](const WeightedMasks& w, const char* name) {
    if (w.masks.empty() || w.masks.size() != w.weights.size()) {
      throw ContractError(std::string("ged_distance: ") + name + " needs one weight per mask");
    }
    double s = 0.0;
    for (double x : w.weights) {
      if (x < 0.0) throw ContractError("ged_distance: negative weight");
      s += x;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ContractError(std::string("ged_distance: ") + name + " weights not normalized");
  };
  check(p, "P");
  check(q, "Q");
  auto expect = [](const WeightedMasks& a, const WeightedMasks& b) {
    double e = 0.0;
    for (std::size_t i = 0; i < a.masks.size(); ++i)
      for (std::size_t j = 0; j < b.masks.size(); ++j) e += a.weights[i] * b.weights[j] * pair_cost(a.masks[i], b.masks[j]);
    return e;
  };
  const double ged2 = 2.0 * expect(p, q) - expect(p, p) - expect(q, q);
  return std::sqrt(std::max(ged2, 0.0));
}

}  // namespace osteo::ot
