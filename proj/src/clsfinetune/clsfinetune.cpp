#include "osteo/clsfinetune/clsfinetune.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "osteo/diffcore/errors.hpp"
#include "osteo/diffcore/ops.hpp"
#include "osteo/diffcore/optim.hpp"
#include "osteo/diffcore/tape.hpp"

namespace osteo::cls {

namespace dc = diffcore;

void SubjectRecord::validate() const {
  if (patches.empty() || patches.size() > 7) {
    throw ContractError("subject " + subject_id + " has " + std::to_string(patches.size()) + " patches, need 1..7");
  }
  if (label != dataio::label_from_tscore(t_score)) {
    throw ContractError("subject " + subject_id + " label disagrees with its T-score");
  }
}

SubjectRecord make_subject(std::string subject_id, std::vector<BonePatch> patches, double t_score) {
  SubjectRecord s;
  s.subject_id = std::move(subject_id);
  s.patches = std::move(patches);
  s.t_score = t_score;
  s.label = dataio::label_from_tscore(t_score);
  s.validate();
  return s;
}

// ---- metrics -------------------------------------------------------------

double auc_score(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("one score per label");
  // Rank-sum form: sort once, average ranks over tied runs.
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (labels[idx[k]] == 1) {
        pos_rank_sum += mid_rank;
        ++n_pos;
      }
    i = j;
  }
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ContractError("AUC undefined: labels contain a single class");
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

namespace {

double ratio(double num, double den) { return den > 0.0 ? num / den : 0.0; }

double f1_of(double tp, double fp, double fn) {
  const double p = ratio(tp, tp + fp), r = ratio(tp, tp + fn);
  return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
}

}  // namespace

MetricsReport compute_metrics(std::span<const int> predicted, std::span<const double> scores,
                              std::span<const int> labels) {
  if (predicted.size() != labels.size() || scores.size() != labels.size()) {
    throw DimensionError("metrics need one prediction and score per label");
  }
  if (labels.empty()) throw ContractError("metrics of an empty set");
  double tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool y = labels[i] == 1, p = predicted[i] == 1;
    tp += y && p;
    fp += !y && p;
    tn += !y && !p;
    fn += y && !p;
  }
  MetricsReport m;
  m.precision = ratio(tp, tp + fp);
  m.recall = ratio(tp, tp + fn);
  m.f1 = f1_of(tp, fp, fn);
  m.accuracy = (tp + tn) / static_cast<double>(labels.size());
  m.macro_f1 = 0.5 * (m.f1 + f1_of(tn, fn, fp));
  try {
    m.auc = auc_score(scores, labels);
    m.auc_defined = true;
  } catch (const ContractError&) {
    m.auc = std::numeric_limits<double>::quiet_NaN();
    m.auc_defined = false;
  }
  return m;
}

std::string metrics_json(const MetricsReport& m) {
  nlohmann::ordered_json j;
  j["precision"] = m.precision;
  j["recall"] = m.recall;
  j["f1"] = m.f1;
  j["auc"] = m.auc_defined ? nlohmann::ordered_json(m.auc) : nlohmann::ordered_json(nullptr);
  j["accuracy"] = m.accuracy;
  j["macro_f1"] = m.macro_f1;
  j["seed"] = m.seed;
  return j.dump(2);
}

Aggregate aggregate_subject(std::span<const std::vector<double>> patch_probs) {
  if (patch_probs.empty()) throw ContractError("aggregate_subject: no patches");
  const std::size_t c = patch_probs.front().size();
  if (c == 0) throw DimensionError("aggregate_subject: empty probability vector");
  Aggregate a;
  a.mean_probs.assign(c, 0.0);
  for (const auto& p : patch_probs) {
    if (p.size() != c) throw DimensionError("aggregate_subject: class counts differ");
    for (std::size_t k = 0; k < c; ++k) a.mean_probs[k] += p[k];
  }
  for (double& v : a.mean_probs) v /= static_cast<double>(patch_probs.size());
  a.predicted = static_cast<int>(std::max_element(a.mean_probs.begin(), a.mean_probs.end()) - a.mean_probs.begin());
  return a;
}

std::size_t select_best(std::span<const double> history) {
  if (history.empty()) throw ContractError("select_best: no evaluated checkpoints");
  return static_cast<std::size_t>(std::max_element(history.begin(), history.end()) - history.begin());
}

// ---- models --------------------------------------------------------------

LinearHead make_head(std::size_t rep, std::uint64_t seed) {
  LinearHead h;
  Rng rng = make_stream(seed, 0x4ead);
  h.params.add("head.w", Tensor::randn({2, rep}, rng, 0.01));
  h.params.add("head.b", Tensor::zeros({2}));
  h.params.set_requires_grad(true);
  return h;
}

Tensor patch_batch(std::span<const BonePatch* const> patches, std::size_t canvas) {
  std::vector<double> pixels;
  pixels.reserve(patches.size() * canvas * canvas);
  for (const BonePatch* p : patches) {
    const dataio::Image im = dataio::fit_to_canvas(p->crop, canvas);
    pixels.insert(pixels.end(), im.pixels.begin(), im.pixels.end());
  }
  return Tensor({patches.size(), 1, canvas, canvas}, std::move(pixels));
}

Tensor patch_features(const pre::Encoder& encoder, std::span<const BonePatch* const> patches, std::size_t canvas) {
  dc::NoGradScope no_grad;
  const std::size_t rep = encoder.config().rep, chunk = 64;
  std::vector<double> out;
  out.reserve(patches.size() * rep);
  for (std::size_t i = 0; i < patches.size(); i += chunk) {
    const auto part = patches.subspan(i, std::min(chunk, patches.size() - i));
    const Tensor f = encoder.represent(patch_batch(part, canvas));
    out.insert(out.end(), f.values().begin(), f.values().end());
  }
  return Tensor({patches.size(), rep}, std::move(out));
}

namespace {

Tensor standardize(const LinearHead& head, const Tensor& features) {
  if (head.mean.empty()) return features;
  const std::size_t n = features.size(0), r = features.size(1);
  std::vector<double> v(features.values().begin(), features.values().end());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < r; ++j) v[i * r + j] = (v[i * r + j] - head.mean[j]) * head.inv_std[j];
  return Tensor({n, r}, std::move(v));
}

Tensor head_logits(const LinearHead& head, const Tensor& features) {
  return dc::linear(standardize(head, features), head.params.at("head.w"), head.params.at("head.b"));
}

struct PatchIndex {
  std::vector<const BonePatch*> patches;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> first;  // subject s owns [first[s], first[s+1])
};

PatchIndex index_patches(std::span<const SubjectRecord> subjects) {
  PatchIndex ix;
  for (const auto& s : subjects) {
    ix.first.push_back(ix.patches.size());
    for (const auto& p : s.patches) {
      ix.patches.push_back(&p);
      ix.labels.push_back(static_cast<std::size_t>(s.label));
    }
  }
  ix.first.push_back(ix.patches.size());
  return ix;
}

void require_two_classes(std::span<const SubjectRecord> train) {
  bool pos = false, neg = false;
  for (const auto& s : train) (s.label == 1 ? pos : neg) = true;
  if (!pos || !neg) throw ContractError("training set contains a single class");
}

std::vector<SubjectPrediction> predictions_from_probs(std::span<const SubjectRecord> subjects, const PatchIndex& ix,
                                                      const Tensor& probs) {
  std::vector<SubjectPrediction> out;
  out.reserve(subjects.size());
  for (std::size_t s = 0; s < subjects.size(); ++s) {
    SubjectPrediction sp;
    sp.subject_id = subjects[s].subject_id;
    sp.label = subjects[s].label;
    std::vector<std::vector<double>> rows;
    for (std::size_t i = ix.first[s]; i < ix.first[s + 1]; ++i) {
      rows.push_back({probs[i * 2], probs[i * 2 + 1]});
      sp.patch_scores.push_back(probs[i * 2 + 1]);
      sp.segments.push_back(ix.patches[i]->segment);
    }
    const Aggregate a = aggregate_subject(rows);
    sp.predicted = a.predicted;
    sp.score = a.mean_probs[1];
    out.push_back(std::move(sp));
  }
  return out;
}

// Per-class weights n / (2 n_c) so both classes pull equally.
std::array<double, 2> balance_weights(std::span<const std::size_t> labels) {
  std::array<double, 2> count{0.0, 0.0};
  for (std::size_t y : labels) count[y] += 1.0;
  const double n = static_cast<double>(labels.size());
  return {n / (2.0 * count[0]), n / (2.0 * count[1])};
}

double cross_entropy_step(ParamSet& params, dc::Adam& opt, const std::function<Tensor()>& logits_fn,
                          std::span<const std::size_t> labels, const std::array<double, 2>& class_weight) {
  std::vector<double> w;
  double total = 0.0;
  for (std::size_t y : labels) {
    w.push_back(class_weight[y]);
    total += class_weight[y];
  }
  for (double& v : w) v /= -total;
  const std::size_t n = w.size();
  const Tensor weights({n}, std::move(w));
  params.zero_grad();
  dc::Tape tape;
  double value = 0.0;
  {
    dc::TapeScope scope(tape);
    const Tensor loss = dc::sum(dc::mul(dc::pick(dc::log_softmax(logits_fn()), labels), weights));
    value = loss.item();
    tape.backward(loss);
  }
  opt.step(params);
  return value;
}

}  // namespace

Tensor head_probs(const LinearHead& head, const Tensor& features) {
  dc::NoGradScope no_grad;
  return dc::softmax(head_logits(head, features));
}

FinetuneResult finetune(const pre::Encoder& encoder, std::span<const SubjectRecord> train,
                        std::span<const SubjectRecord> val, const FinetuneConfig& cfg) {
  require_two_classes(train);
  if (val.empty()) throw ContractError("finetune needs validation subjects for selection");
  const PatchIndex tr = index_patches(train), va = index_patches(val);
  const Tensor train_feats = patch_features(encoder, tr.patches, cfg.canvas);
  const Tensor val_feats = patch_features(encoder, va.patches, cfg.canvas);
  const std::size_t n = tr.patches.size(), rep = encoder.config().rep;

  LinearHead head = make_head(rep, cfg.seed);
  head.mean.assign(rep, 0.0);
  head.inv_std.assign(rep, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < rep; ++j) head.mean[j] += train_feats[i * rep + j];
  for (double& m : head.mean) m /= static_cast<double>(n);
  for (std::size_t j = 0; j < rep; ++j) {
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += std::pow(train_feats[i * rep + j] - head.mean[j], 2);
    const double sd = std::sqrt(var / static_cast<double>(n));
    head.inv_std[j] = sd > 1e-12 ? 1.0 / sd : 0.0;
  }
  const Tensor train_std = standardize(head, train_feats);
  // Shares head's tensors; fed rows that are already standardised.
  LinearHead plain = head;
  plain.mean.clear();
  plain.inv_std.clear();
  const auto class_weight = balance_weights(tr.labels);

  FinetuneResult res;
  dc::Adam opt(cfg.lr);
  Rng rng = make_stream(cfg.seed, 0xf17e);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::vector<double>> best;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t b = 0; b < n; b += cfg.batch) {
      const std::span<const std::size_t> rows(order.data() + b, std::min(cfg.batch, n - b));
      std::vector<std::size_t> labels;
      for (std::size_t r : rows) labels.push_back(tr.labels[r]);
      const Tensor x = dc::take(train_std, rows);
      loss_sum += cross_entropy_step(plain.params, opt, [&] { return head_logits(plain, x); }, labels, class_weight);
      ++steps;
    }
    res.train_loss.push_back(loss_sum / static_cast<double>(steps));
    const auto preds = predictions_from_probs(val, va, head_probs(head, val_feats));
    res.val_macro_f1.push_back(evaluate(preds).macro_f1);
    if (select_best(res.val_macro_f1) == epoch) {
      best.clear();
      for (const auto& [_, t] : head.params.items()) best.emplace_back(t.values().begin(), t.values().end());
    }
  }
  res.best_epoch = cfg.epochs > 0 ? select_best(res.val_macro_f1) : 0;
  if (!best.empty()) {
    auto& items = head.params.items();
    for (std::size_t i = 0; i < items.size(); ++i) std::copy(best[i].begin(), best[i].end(), items[i].second.mutable_values().begin());
  }
  res.head = std::move(head);
  return res;
}

FinetuneResult train_supervised(pre::Encoder& encoder, std::span<const SubjectRecord> train,
                                std::span<const SubjectRecord> val, const FinetuneConfig& cfg) {
  require_two_classes(train);
  if (val.empty()) throw ContractError("supervised training needs validation subjects for selection");
  const PatchIndex tr = index_patches(train), va = index_patches(val);
  const std::size_t n = tr.patches.size();
  LinearHead head = make_head(encoder.config().rep, cfg.seed);
  const auto class_weight = balance_weights(tr.labels);

  ParamSet all;
  all.extend("", encoder.params());
  all.extend("", head.params);
  auto snapshot = [&] {
    std::vector<std::vector<double>> s;
    for (const auto& [_, t] : all.items()) s.emplace_back(t.values().begin(), t.values().end());
    return s;
  };

  FinetuneResult res;
  dc::Adam opt(cfg.supervised_lr);
  Rng rng = make_stream(cfg.seed, 0x5d9);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::vector<double>> best;
  for (std::size_t epoch = 0; epoch < cfg.supervised_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t b = 0; b < n; b += cfg.supervised_batch) {
      std::vector<const BonePatch*> batch;
      std::vector<std::size_t> labels;
      for (std::size_t i = b; i < std::min(n, b + cfg.supervised_batch); ++i) {
        batch.push_back(tr.patches[order[i]]);
        labels.push_back(tr.labels[order[i]]);
      }
      const Tensor x = patch_batch(batch, cfg.canvas);
      loss_sum += cross_entropy_step(all, opt, [&] { return head_logits(head, encoder.represent(x)); }, labels,
                                     class_weight);
      ++steps;
    }
    res.train_loss.push_back(loss_sum / static_cast<double>(steps));
    const auto preds = predict_subjects(encoder, head, val, cfg.canvas);
    res.val_macro_f1.push_back(evaluate(preds).macro_f1);
    if (select_best(res.val_macro_f1) == epoch) best = snapshot();
  }
  res.best_epoch = cfg.supervised_epochs > 0 ? select_best(res.val_macro_f1) : 0;
  if (!best.empty()) {
    auto& items = all.items();
    for (std::size_t i = 0; i < items.size(); ++i) std::copy(best[i].begin(), best[i].end(), items[i].second.mutable_values().begin());
  }
  res.head = std::move(head);
  return res;
}

std::vector<SubjectPrediction> predict_subjects(const pre::Encoder& encoder, const LinearHead& head,
                                                std::span<const SubjectRecord> subjects, std::size_t canvas) {
  const PatchIndex ix = index_patches(subjects);
  return predictions_from_probs(subjects, ix, head_probs(head, patch_features(encoder, ix.patches, canvas)));
}

MetricsReport evaluate(std::span<const SubjectPrediction> predictions, std::uint64_t seed) {
  std::vector<int> predicted, labels;
  std::vector<double> scores;
  for (const auto& p : predictions) {
    predicted.push_back(p.predicted);
    labels.push_back(p.label);
    scores.push_back(p.score);
  }
  MetricsReport m = compute_metrics(predicted, scores, labels);
  m.seed = seed;
  return m;
}

std::string per_bone_csv(std::span<const SubjectPrediction> predictions) {
  std::map<dataio::Segment, std::vector<double>> by_bone;
  for (const auto& p : predictions)
    for (std::size_t i = 0; i < p.segments.size(); ++i) by_bone[p.segments[i]].push_back(p.patch_scores[i]);
  std::ostringstream os;
  os.precision(17);
  os << "segment,mean_prob,std\n";
  for (dataio::Segment seg : dataio::kAllSegments) {
    const auto it = by_bone.find(seg);
    if (it == by_bone.end()) continue;
    const auto& v = it->second;
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    os << dataio::segment_name(seg) << ',' << mean << ',' << std::sqrt(var / static_cast<double>(v.size())) << '\n';
  }
  return os.str();
}

}  // namespace osteo::cls
