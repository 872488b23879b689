#include "osteo/pretrain/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "osteo/diffcore/errors.hpp"
#include "osteo/diffcore/ops.hpp"
#include "osteo/diffcore/tape.hpp"

namespace osteo::pre {

namespace dc = diffcore;

Encoder::Encoder(const EncoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg_.in_channels == 0 || cfg_.c1 == 0 || cfg_.c2 == 0 || cfg_.c3 == 0 || cfg_.rep == 0 ||
      cfg_.proj_hidden == 0 || cfg_.embed == 0) {
    throw ContractError("encoder widths must be positive");
  }
  Rng rng = make_stream(seed, 0x9e7);
  auto conv = [&](const std::string& name, std::size_t cin, std::size_t cout) {
    params_.add(name + ".w", dc::he_init({cout, cin, 3, 3}, cin * 9, rng));
    params_.add(name + ".b", Tensor::zeros({cout}));
  };
  conv("conv0", cfg_.in_channels, cfg_.c1);
  conv("conv1", cfg_.c1, cfg_.c2);
  conv("conv2", cfg_.c2, cfg_.c3);
  conv("conv3", cfg_.c3, cfg_.rep);
  params_.add("proj.w1", dc::he_init({cfg_.proj_hidden, cfg_.rep}, cfg_.rep, rng));
  params_.add("proj.b1", Tensor::zeros({cfg_.proj_hidden}));
  params_.add("proj.w2", dc::he_init({cfg_.embed, cfg_.proj_hidden}, cfg_.proj_hidden, rng));
  params_.add("proj.b2", Tensor::zeros({cfg_.embed}));
  params_.set_requires_grad(true);
}

Tensor Encoder::represent(const Tensor& x) const {
  if (x.dim() != 4 || x.size(1) != cfg_.in_channels) {
    throw DimensionError("encoder expects [B," + std::to_string(cfg_.in_channels) + ",H,W], got " +
                         dc::shape_str(x.shape()));
  }
  Tensor h = x;
  const std::size_t strides[] = {2, 2, 2, 1};
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string name = "conv" + std::to_string(i);
    h = dc::relu(dc::conv2d(h, p(name + ".w"), p(name + ".b"), strides[i], 1));
  }
  return dc::global_avg_pool(h);
}

Tensor Encoder::project(const Tensor& rep) const {
  const Tensor h = dc::relu(dc::linear(rep, p("proj.w1"), p("proj.b1")));
  return dc::linear(h, p("proj.w2"), p("proj.b2"));
}

Tensor Encoder::embed(const Tensor& x) const {
  Tensor z = project(represent(x));
  // an all-zero view (empty crop) maps to the zero vector, which has no direction;
  // nudge such rows onto the first axis so every row still normalises to unit length
  const std::size_t n = z.size(0), e = z.size(1);
  std::vector<double> nudge(z.numel(), 0.0);
  bool any = false;
  for (std::size_t r = 0; r < n; ++r) {
    double sq = 0.0;
    for (std::size_t j = 0; j < e; ++j) sq += z[r * e + j] * z[r * e + j];
    if (sq < 1e-18) {
      nudge[r * e] = 1.0;
      any = true;
    }
  }
  if (any) z = dc::add(z, Tensor(z.shape(), std::move(nudge)));
  return dc::l2_normalize_rows(z);
}

Tensor ntxent_loss(const Tensor& z, std::span<const std::size_t> group, double temperature) {
  if (!(temperature > 0.0)) throw ContractError("temperature must be positive");
  if (z.dim() != 2) throw DimensionError("embeddings must be [N,E]");
  const std::size_t n = z.size(0), e = z.size(1);
  if (group.size() != n) throw DimensionError("one group id per embedding row");
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < e; ++j) sq += z[i * e + j] * z[i * e + j];
    if (std::abs(std::sqrt(sq) - 1.0) > 1e-9) throw ContractError("embedding row " + std::to_string(i) + " is not unit norm");
  }
  std::vector<std::size_t> distinct(group.begin(), group.end());
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (distinct.size() < 2) throw ContractError("contrastive loss needs at least two sources");

  // Self pairs are pushed to -inf-like logits so they drop out of the softmax.
  std::vector<double> self_mask(n * n, 0.0), weight(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    self_mask[i * n + i] = -1e12;
    std::size_t positives = 0;
    for (std::size_t k = 0; k < n; ++k) positives += k != i && group[k] == group[i];
    if (positives == 0) throw ContractError("row " + std::to_string(i) + " has no positive view");
    for (std::size_t k = 0; k < n; ++k)
      if (k != i && group[k] == group[i]) weight[i * n + k] = -1.0 / static_cast<double>(positives * n);
  }
  const Tensor logits = dc::add(dc::scale(dc::matmul(z, dc::transpose(z)), 1.0 / temperature),
                                Tensor({n, n}, std::move(self_mask)));
  return dc::sum(dc::mul(dc::log_softmax(logits), Tensor({n, n}, std::move(weight))));
}

Tensor ntxent_loss(const Tensor& z, double temperature) {
  if (z.dim() != 2 || z.size(0) % 2 != 0) throw DimensionError("paired embeddings must be [2B,E]");
  const std::size_t b = z.size(0) / 2;
  if (b < 2) throw ContractError("contrastive loss needs B >= 2");
  std::vector<std::size_t> group(2 * b);
  for (std::size_t i = 0; i < 2 * b; ++i) group[i] = i % b;
  return ntxent_loss(z, group, temperature);
}

double cosine_lr(const ScheduleState& s) {
  if (s.total_steps <= 0) throw ContractError("total_steps must be positive");
  if (s.step < 0 || s.step > s.total_steps) throw ContractError("schedule step outside [0, total_steps]");
  const double t = static_cast<double>(s.step) / static_cast<double>(s.total_steps);
  return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + std::cos(std::numbers::pi * t));
}

std::vector<double> trust_ratio_step(ParamSet& params, double lr, double trust_coefficient) {
  std::vector<double> applied;
  applied.reserve(params.size());
  for (auto& [name, w] : params.items()) {
    if (!w.has_grad()) {
      applied.push_back(0.0);
      continue;
    }
    const auto g = w.grad();
    double wn = 0.0, gn = 0.0;
    for (double v : w.values()) wn += v * v;
    for (double v : g) gn += v * v;
    wn = std::sqrt(wn);
    gn = std::sqrt(gn);
    double rate = lr;
    // A zero-norm tensor (fresh biases) would otherwise never move.
    if (wn > 0.0) {
      const double local = trust_coefficient * wn / (gn + 1e-12);
      rate = lr * std::min(1.0, local / lr);
    }
    auto vals = w.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] -= rate * g[i];
    applied.push_back(rate);
  }
  return applied;
}

std::vector<Image> patch_canvases(std::span<const dataio::BonePatch> patches, std::size_t canvas) {
  std::vector<Image> out;
  out.reserve(patches.size());
  for (const auto& p : patches) out.push_back(dataio::fit_to_canvas(p.crop, canvas));
  return out;
}

ViewBatch build_view_batch(std::span<const Image* const> canvases, const PretrainConfig& cfg,
                           std::uint64_t stream_base, crop::CropStats* stats) {
  const crop::ViewSpec& spec = cfg.views;
  const std::size_t per = spec.global_count + spec.local_count, g = spec.global_size;
  const std::size_t items = canvases.size();
  std::vector<std::vector<Image>> views(items);
  std::vector<crop::CropStats> item_stats(items);
  const long n_items = static_cast<long>(items);
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
  for (long i = 0; i < n_items; ++i) {
    Rng rng = make_stream(cfg.seed, stream_base + static_cast<std::uint64_t>(i));
    crop::ViewSet vs = crop::make_views(*canvases[i], cfg.augment, spec, rng, {}, &item_stats[i]);
    auto& out = views[i];
    for (auto& v : vs.global_views) out.push_back(std::move(v));
    for (const auto& v : vs.local_views) out.push_back(dataio::resize_bilinear(v, g, g));
  }

  ViewBatch vb;
  std::vector<double> pixels;
  pixels.reserve(items * per * g * g);
  for (std::size_t i = 0; i < items; ++i) {
    for (const auto& v : views[i]) {
      pixels.insert(pixels.end(), v.pixels.begin(), v.pixels.end());
      vb.group.push_back(i);
    }
    if (stats) {
      stats->crops += item_stats[i].crops;
      stats->fallbacks += item_stats[i].fallbacks;
    }
  }
  vb.images = Tensor({vb.group.size(), 1, g, g}, std::move(pixels));
  return vb;
}

std::size_t batches_per_epoch(std::size_t n, std::size_t batch) {
  if (n < 2 || batch < 2) return n < 2 ? 0 : 1;
  const std::size_t full = n / batch, rest = n % batch;
  return std::max<std::size_t>(1, full + (rest >= 2 ? 1 : 0));
}

EpochResult pretrain_epoch(Encoder& encoder, std::span<const Image> canvases, const PretrainConfig& cfg,
                           ScheduleState& schedule, std::size_t epoch, crop::CropStats* stats) {
  if (canvases.size() < 2) throw ContractError("contrastive batch needs at least two source images");
  if (cfg.batch < 2) throw ContractError("batch must be at least 2");
  const std::size_t n = canvases.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng = make_stream(cfg.seed, 0x100000 + epoch);
  std::shuffle(order.begin(), order.end(), shuffle_rng);

  const std::size_t nb = batches_per_epoch(n, cfg.batch);
  EpochResult res;
  for (std::size_t b = 0; b < nb; ++b) {
    const std::size_t begin = b * cfg.batch;
    const std::size_t end = b + 1 == nb ? n : begin + cfg.batch;
    std::vector<const Image*> items;
    for (std::size_t i = begin; i < end; ++i) items.push_back(&canvases[order[i]]);
    const std::uint64_t base = (static_cast<std::uint64_t>(epoch) << 32) + (static_cast<std::uint64_t>(b) << 12);
    const ViewBatch vb = build_view_batch(items, cfg, base, stats);

    encoder.params().zero_grad();
    dc::Tape tape;
    double loss_value = 0.0;
    {
      dc::TapeScope scope(tape);
      const Tensor loss = ntxent_loss(encoder.embed(vb.images), vb.group, cfg.temperature);
      loss_value = loss.item();
      tape.backward(loss);
    }
    trust_ratio_step(encoder.params(), cosine_lr(schedule), schedule.trust_coefficient);
    schedule.step = std::min(schedule.step + 1, schedule.total_steps);
    res.mean_loss += loss_value;
    ++res.steps;
  }
  res.mean_loss /= static_cast<double>(res.steps);
  return res;
}

EpochResult pretrain_epoch(Encoder& encoder, std::span<const dataio::BonePatch> patches,
                           const PretrainConfig& cfg, ScheduleState& schedule, std::size_t epoch,
                           crop::CropStats* stats) {
  const auto canvases = patch_canvases(patches, cfg.canvas);
  return pretrain_epoch(encoder, canvases, cfg, schedule, epoch, stats);
}

std::vector<double> pretrain(Encoder& encoder, std::span<const Image> canvases, const PretrainConfig& cfg,
                             crop::CropStats* stats, const std::function<void(std::size_t, double)>& on_epoch) {
  ScheduleState schedule;
  schedule.base_lr = cfg.base_lr;
  schedule.min_lr = cfg.min_lr;
  schedule.trust_coefficient = cfg.trust_coefficient;
  schedule.total_steps =
      static_cast<long>(std::max<std::size_t>(1, cfg.epochs * batches_per_epoch(canvases.size(), cfg.batch)));
  std::vector<double> losses;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    losses.push_back(pretrain_epoch(encoder, canvases, cfg, schedule, e, stats).mean_loss);
    if (on_epoch) on_epoch(e, losses.back());
  }
  return losses;
}

}  // namespace osteo::pre
