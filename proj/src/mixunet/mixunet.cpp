#include "osteo/mixunet/mixunet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "osteo/diffcore/errors.hpp"
#include "osteo/diffcore/ops.hpp"
#include "osteo/diffcore/optim.hpp"
#include "osteo/diffcore/tape.hpp"

namespace osteo::mix {

namespace dc = osteo::diffcore;

void NetConfig::validate() const {
  if (modules < 1) throw ContractError("mixture net needs at least one module");
  if (samples < 1) throw ContractError("mixture net needs at least one sample per module");
  if (classes < 2) throw ContractError("mixture net needs at least two classes");
  if (!(sigma_init > 0.0)) throw ContractError("initial latent std must be positive");
  if (in_channels < 1 || latent < 1 || f1 < 1 || f2 < 1 || route_hidden < 1 || stem < 1 || mid < 1) {
    throw ContractError("mixture net widths must be positive");
  }
}

Tensor modulate(const Tensor& u_d, const Tensor& scale, const Tensor& bias,
                std::span<const std::size_t> image_of_row) {
  if (u_d.dim() != 4) throw DimensionError("modulate expects u_d [B,F2,H,W], got " + dc::shape_str(u_d.shape()));
  const std::size_t batch = u_d.size(0), ch = u_d.size(1), plane = u_d.size(2) * u_d.size(3);
  const std::size_t rows = image_of_row.size();
  if (scale.dim() != 2 || scale.size(0) != rows || scale.size(1) != ch || bias.shape() != scale.shape()) {
    throw DimensionError("modulate: scale " + dc::shape_str(scale.shape()) + ", bias " +
                         dc::shape_str(bias.shape()) + " for " + std::to_string(rows) + " rows of " +
                         std::to_string(ch) + " channels");
  }
  for (std::size_t b : image_of_row)
    if (b >= batch) throw DimensionError("modulate: image index out of range");

  std::vector<double> out(rows * ch * plane);
  const double* u = u_d.values().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < ch; ++c) {
      const double s = scale[r * ch + c], t = bias[r * ch + c];
      const double* src = u + (image_of_row[r] * ch + c) * plane;
      double* dst = out.data() + (r * ch + c) * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] = s * (src[p] + t);
    }
  Tensor y({rows, ch, u_d.size(2), u_d.size(3)}, std::move(out));
  dc::record_op({u_d, scale, bias}, y,
                [u_d, scale, bias, y, idx = std::vector<std::size_t>(image_of_row.begin(), image_of_row.end()),
                 ch, plane]() {
                  auto g = y.grad();
                  const double* u = u_d.values().data();
                  std::span<double> du, ds, dt;
                  if (u_d.requires_grad()) du = u_d.mutable_grad();
                  if (scale.requires_grad()) ds = scale.mutable_grad();
                  if (bias.requires_grad()) dt = bias.mutable_grad();
                  for (std::size_t r = 0; r < idx.size(); ++r)
                    for (std::size_t c = 0; c < ch; ++c) {
                      const double s = scale[r * ch + c], t = bias[r * ch + c];
                      const double* gp = g.data() + (r * ch + c) * plane;
                      const double* src = u + (idx[r] * ch + c) * plane;
                      double gs = 0.0, gsum = 0.0;
                      for (std::size_t p = 0; p < plane; ++p) {
                        gs += gp[p] * (src[p] + t);
                        gsum += gp[p];
                      }
                      if (!du.empty()) {
                        double* d = du.data() + (idx[r] * ch + c) * plane;
                        for (std::size_t p = 0; p < plane; ++p) d[p] += gp[p] * s;
                      }
                      if (!ds.empty()) ds[r * ch + c] += gs;
                      if (!dt.empty()) dt[r * ch + c] += gsum * s;
                    }
                });
  return y;
}

Tensor modulate(const Tensor& u_d, const ModuleLatent& latent, const Tensor& z) {
  if (u_d.dim() != 3) throw DimensionError("modulate expects u_d [F2,H,W]");
  const std::size_t ch = u_d.size(0), l = latent.mu.numel();
  if (z.numel() != l || z.dim() != 1) throw DimensionError("modulate: latent length must be " + std::to_string(l));
  if (latent.w_s.shape() != dc::Shape{ch, l} || latent.w_b.shape() != dc::Shape{ch, l}) {
    throw DimensionError("modulate: projections must be [" + std::to_string(ch) + "," + std::to_string(l) + "]");
  }
  const Tensor scale = dc::reshape(dc::linear(z, latent.w_s), {1, ch});
  const Tensor bias = dc::reshape(dc::linear(z, latent.w_b), {1, ch});
  const std::size_t row0 = 0;
  const Tensor y = modulate(dc::reshape(u_d, {1, ch, u_d.size(1), u_d.size(2)}), scale, bias, {&row0, 1});
  return dc::reshape(y, u_d.shape());
}

MixtureNet::MixtureNet(const NetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng = make_stream(seed, 0x5e9);
  auto conv = [&](const std::string& name, std::size_t cin, std::size_t cout, std::size_t k) {
    params_.add(name + ".w", dc::he_init({cout, cin, k, k}, cin * k * k, rng));
    params_.add(name + ".b", Tensor::zeros({cout}));
  };
  conv("enc0", cfg_.in_channels, cfg_.stem, 3);
  conv("enc1", cfg_.stem, cfg_.mid, 3);
  conv("enc2", cfg_.mid, cfg_.f1, 3);
  conv("enc3", cfg_.f1, cfg_.f1, 3);
  conv("dec2", 2 * cfg_.f1, cfg_.f1, 3);
  conv("dec1", cfg_.f1 + cfg_.mid, cfg_.mid, 3);
  conv("dec0", cfg_.mid + cfg_.stem, cfg_.f2, 3);
  conv("head0", cfg_.f2, cfg_.f2, 1);
  conv("head1", cfg_.f2, cfg_.f2, 1);
  conv("head2", cfg_.f2, cfg_.classes, 1);

  const double proj_sd = 1.0 / std::sqrt(static_cast<double>(cfg_.latent));
  for (std::size_t k = 0; k < cfg_.modules; ++k) {
    const std::string m = "module" + std::to_string(k);
    params_.add(m + ".mu", Tensor::randn({cfg_.latent}, rng, 0.1));
    params_.add(m + ".log_sigma", Tensor::full({cfg_.latent}, std::log(cfg_.sigma_init)));
    params_.add(m + ".w_s", Tensor::randn({cfg_.f2, cfg_.latent}, rng, 5.0 * proj_sd));
    params_.add(m + ".w_b", Tensor::randn({cfg_.f2, cfg_.latent}, rng, proj_sd));
  }

  params_.add("route.w1", dc::he_init({cfg_.route_hidden, cfg_.f1}, cfg_.f1, rng));
  params_.add("route.b1", Tensor::zeros({cfg_.route_hidden}));
  params_.add("route.w2", Tensor::randn({cfg_.modules, cfg_.route_hidden}, rng, 0.01));
  params_.add("route.b2", Tensor::zeros({cfg_.modules}));
  params_.set_requires_grad(true);
}

bool MixtureNet::is_routing(const std::string& name) const { return name.rfind("route.", 0) == 0; }

ModuleLatent MixtureNet::latent(std::size_t k) const {
  if (k >= cfg_.modules) throw DimensionError("module index out of range");
  const std::string m = "module" + std::to_string(k);
  return {p(m + ".mu"), p(m + ".log_sigma"), p(m + ".w_s"), p(m + ".w_b")};
}

Tensor MixtureNet::conv_block(const Tensor& x, const std::string& name, std::size_t stride) const {
  return dc::relu(dc::conv2d(x, p(name + ".w"), p(name + ".b"), stride, 1));
}

Features MixtureNet::features(const Tensor& x) const {
  if (x.dim() != 4 || x.size(1) != cfg_.in_channels) {
    throw DimensionError("mixture net expects [B," + std::to_string(cfg_.in_channels) + ",H,W], got " +
                         dc::shape_str(x.shape()));
  }
  if (x.size(2) % 8 != 0 || x.size(3) % 8 != 0) throw DimensionError("mixture net needs H and W divisible by 8");
  const Tensor e0 = conv_block(x, "enc0", 1);
  const Tensor e1 = conv_block(e0, "enc1", 2);
  const Tensor e2 = conv_block(e1, "enc2", 2);
  const Tensor e3 = conv_block(e2, "enc3", 2);
  const Tensor d2 = conv_block(dc::concat_channels(dc::upsample_nearest(e3, 2), e2), "dec2", 1);
  const Tensor d1 = conv_block(dc::concat_channels(dc::upsample_nearest(d2, 2), e1), "dec1", 1);
  const Tensor d0 = conv_block(dc::concat_channels(dc::upsample_nearest(d1, 2), e0), "dec0", 1);
  return {e3, d0};
}

Tensor MixtureNet::route(const Tensor& u_e) const {
  const Tensor pooled = dc::global_avg_pool(u_e.detach());
  const Tensor hidden = dc::relu(dc::linear(pooled, p("route.w1"), p("route.b1")));
  return dc::softmax(dc::linear(hidden, p("route.w2"), p("route.b2")));
}

Tensor MixtureNet::head(const Tensor& u) const {
  const Tensor h0 = dc::relu(dc::conv2d(u, p("head0.w"), p("head0.b"), 1, 0));
  const Tensor h1 = dc::relu(dc::conv2d(h0, p("head1.w"), p("head1.b"), 1, 0));
  return dc::conv2d(h1, p("head2.w"), p("head2.b"), 1, 0);
}

Tensor MixtureNet::draw_noise(std::size_t batch, osteo::Rng& rng) const {
  return Tensor::randn({batch, cfg_.modules, cfg_.samples, cfg_.latent}, rng);
}

AtomBatch MixtureNet::forward(const Tensor& x, const Tensor& noise) const {
  const std::size_t batch = x.size(0), kk = cfg_.modules, l = cfg_.latent;
  if (noise.dim() != 4 || noise.size(0) != batch || noise.size(1) != kk || noise.size(3) != l) {
    throw DimensionError("noise must be [B,K,S,L], got " + dc::shape_str(noise.shape()));
  }
  const std::size_t s = noise.size(2);
  if (s < 1) throw ContractError("at least one sample per module");
  const std::size_t atoms = kk * s, rows = batch * s;

  const Features f = features(x);
  const Tensor ones = Tensor::full({rows, 1}, 1.0);
  std::vector<Tensor> scales, biases;
  for (std::size_t k = 0; k < kk; ++k) {
    std::vector<double> eps(rows * l);
    for (std::size_t b = 0; b < batch; ++b)
      std::copy_n(noise.values().data() + (b * kk + k) * s * l, s * l, eps.data() + b * s * l);
    const ModuleLatent m = latent(k);
    const Tensor mu = dc::matmul(ones, dc::reshape(m.mu, {1, l}));
    const Tensor sigma = dc::matmul(ones, dc::reshape(dc::exp(m.log_sigma), {1, l}));
    const Tensor z = dc::add(mu, dc::mul(Tensor({rows, l}, std::move(eps)), sigma));
    scales.push_back(dc::linear(z, m.w_s));
    biases.push_back(dc::linear(z, m.w_b));
  }
  // Stacked rows are module-major (k, b, s); reorder to image-major (b, k, s).
  std::vector<std::size_t> order(batch * atoms), image_of_row(batch * atoms);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t k = 0; k < kk; ++k)
      for (std::size_t j = 0; j < s; ++j) {
        const std::size_t r = (b * kk + k) * s + j;
        order[r] = (k * batch + b) * s + j;
        image_of_row[r] = b;
      }
  const Tensor scale = dc::take(dc::reshape(dc::stack(scales), {kk * rows, cfg_.f2}), order);
  const Tensor bias = dc::take(dc::reshape(dc::stack(biases), {kk * rows, cfg_.f2}), order);

  AtomBatch out;
  out.scores = head(modulate(f.u_d, scale, bias, image_of_row));
  out.pi = route(f.u_e);
  std::vector<double> spread(kk * atoms, 0.0);
  for (std::size_t k = 0; k < kk; ++k)
    for (std::size_t j = 0; j < s; ++j) spread[k * atoms + k * s + j] = 1.0 / static_cast<double>(s);
  out.alpha = dc::reshape(dc::matmul(out.pi, Tensor({kk, atoms}, std::move(spread))), {batch * atoms});
  return out;
}

Tensor batch_images(std::span<const AnnotatedImage* const> batch) {
  std::vector<Tensor> parts;
  parts.reserve(batch.size());
  for (const auto* a : batch) parts.push_back(a->image.to_tensor());
  return dc::stack(parts);
}

namespace {

Tensor image_batch(const dataio::Image& image) {
  return dc::reshape(image.to_tensor(), {1, 1, image.height, image.width});
}

}  // namespace

MixturePrediction sample_predictive(const MixtureNet& net, const dataio::Image& image, std::size_t samples,
                                    osteo::Rng& rng) {
  if (samples < 1) throw ContractError("sample_predictive needs S >= 1");
  const auto& cfg = net.config();
  dc::NoGradScope no_grad;
  const Tensor noise = Tensor::randn({1, cfg.modules, samples, cfg.latent}, rng);
  const AtomBatch ab = net.forward(image_batch(image), noise);
  MixturePrediction out;
  out.atoms = ab.scores;
  out.weights.assign(ab.alpha.values().begin(), ab.alpha.values().end());
  out.pi.assign(ab.pi.values().begin(), ab.pi.values().end());
  return out;
}

MaskPrediction mixture_mask(const MixturePrediction& pred) {
  const Tensor& a = pred.atoms;
  if (a.dim() != 4 || a.size(0) != pred.weights.size()) throw DimensionError("mixture_mask: atoms and weights disagree");
  const std::size_t classes = a.size(1), h = a.size(2), w = a.size(3), plane = h * w;
  std::vector<double> mix(classes * plane, 0.0);
  const Tensor probs = dc::softmax(a, 1);
  for (std::size_t i = 0; i < pred.weights.size(); ++i) {
    const double wi = pred.weights[i];
    const double* src = probs.values().data() + i * classes * plane;
    for (std::size_t q = 0; q < classes * plane; ++q) mix[q] += wi * src[q];
  }
  MaskPrediction out;
  out.mask = LabelMap(h, w);
  out.confidence.resize(plane);
  for (std::size_t q = 0; q < plane; ++q) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c)
      if (mix[c * plane + q] > mix[best * plane + q]) best = c;
    out.mask.labels[q] = static_cast<std::uint8_t>(best);
    out.confidence[q] = mix[best * plane + q];
  }
  out.probs = Tensor({classes, h, w}, std::move(mix));
  return out;
}

MaskPrediction predict_mask(const MixtureNet& net, const dataio::Image& image, std::size_t samples,
                            osteo::Rng& rng) {
  return mixture_mask(sample_predictive(net, image, samples, rng));
}

LabelMap module_mean_mask(const MixturePrediction& pred, std::size_t k, std::size_t samples) {
  const Tensor& a = pred.atoms;
  if ((k + 1) * samples > a.size(0)) throw DimensionError("module_mean_mask: module index out of range");
  MixturePrediction one;
  one.atoms = dc::slice(a, k * samples, (k + 1) * samples);
  one.weights.assign(samples, 1.0 / static_cast<double>(samples));
  return mixture_mask(one).mask;
}

SegLoss segmentation_loss(const MixtureNet& net, std::span<const AnnotatedImage* const> batch,
                          const Tensor& noise, double gamma, const SegTrainConfig& cfg,
                          const std::vector<ot::CouplingPlan>* fixed_plans) {
  if (batch.empty()) throw ContractError("empty segmentation batch");
  if (fixed_plans && fixed_plans->size() != batch.size()) throw DimensionError("one fixed plan per image");
  const AtomBatch ab = net.forward(batch_images(batch), noise);
  const std::size_t atoms = net.config().modules * noise.size(2);
  const Tensor probs = dc::softmax(ab.scores, 1);
  const double cap = std::max(gamma, 1.0 / static_cast<double>(atoms));

  SegLoss out;
  Tensor total;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const AnnotatedImage& item = *batch[b];
    std::vector<LabelMap> hard(atoms);
    for (std::size_t i = 0; i < atoms; ++i)
      hard[i] = ot::argmax_labels(dc::reshape(dc::slice(ab.scores, b * atoms + i, b * atoms + i + 1),
                                              {ab.scores.size(1), ab.scores.size(2), ab.scores.size(3)}));
    ot::CostMatrix c = ot::cost_matrix(hard, item.annotations);
    ot::CouplingPlan plan =
        fixed_plans ? (*fixed_plans)[b] : ot::solve_relaxed(c, item.weights, cap, cfg.epsilon, cfg.sinkhorn_iters);
    const Tensor soft = ot::soft_cost_matrix(dc::slice(probs, b * atoms, (b + 1) * atoms), item.annotations);
    const ot::LossBreakdown l =
        ot::assemble_loss(plan, soft, dc::slice(ab.alpha, b * atoms, (b + 1) * atoms), cfg.lambda);
    out.transport += l.transport_term.item();
    out.kl += l.kl_term.item();
    total = b == 0 ? l.total : dc::add(total, l.total);
    out.plans.push_back(std::move(plan));
    out.costs.push_back(std::move(c));
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.total = dc::scale(total, inv);
  out.transport *= inv;
  out.kl *= inv;
  return out;
}

std::vector<SegStepLog> train_segmentation(MixtureNet& net, const std::vector<AnnotatedImage>& data,
                                           const SegTrainConfig& cfg, const SegLogFn& on_step) {
  if (data.empty()) throw ContractError("no training images");
  if (cfg.batch < 1 || cfg.steps < 1) throw ContractError("batch and steps must be positive");
  for (const auto& a : data) a.validate();
  Rng order_rng = make_stream(cfg.seed, 1);
  Rng noise_rng = make_stream(cfg.seed, 2);
  dc::Adam opt(cfg.lr);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  const auto anneal_steps = static_cast<long>(std::llround(cfg.anneal_fraction * static_cast<double>(cfg.steps)));

  std::vector<SegStepLog> log;
  std::vector<const AnnotatedImage*> batch;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    batch.clear();
    while (batch.size() < std::min(cfg.batch, data.size())) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), order_rng);
        cursor = 0;
      }
      batch.push_back(&data[order[cursor++]]);
    }
    const double gamma = ot::anneal_gamma(static_cast<long>(step), anneal_steps, cfg.gamma0);
    const Tensor noise = net.draw_noise(batch.size(), noise_rng);

    net.params().zero_grad();
    dc::Tape tape;
    SegStepLog entry;
    {
      dc::TapeScope scope(tape);
      SegLoss loss = segmentation_loss(net, batch, noise, gamma, cfg);
      tape.backward(loss.total);
      entry = {step, gamma, loss.total.item(), loss.transport, loss.kl};
      if (on_step) on_step(entry, loss);
    }
    opt.step(net.params());
    log.push_back(entry);
  }
  return log;
}

}  // namespace osteo::mix
