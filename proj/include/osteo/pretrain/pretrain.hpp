#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "osteo/cropaug/cropaug.hpp"
#include "osteo/dataio/dataio.hpp"
#include "osteo/diffcore/params.hpp"
#include "osteo/diffcore/tensor.hpp"

namespace osteo::pre {

using dataio::Image;
using diffcore::ParamSet;
using diffcore::Tensor;

struct EncoderConfig {
  std::size_t in_channels = 1;
  std::size_t c1 = 16;
  std::size_t c2 = 32;
  std::size_t c3 = 64;
  std::size_t rep = 64;  // R
  std::size_t proj_hidden = 64;
  std::size_t embed = 32;  // E
};

/// Four conv blocks (three strided) and a global pool give the
/// representation; a two-layer MLP projects it for the contrastive loss.
class Encoder {
 public:
  Encoder(const EncoderConfig& cfg, std::uint64_t seed);

  const EncoderConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  /// x [B,in,H,W] -> [B,R]
  Tensor represent(const Tensor& x) const;
  /// [B,R] -> [B,E]
  Tensor project(const Tensor& rep) const;
  /// Unit-norm embeddings [B,E].
  Tensor embed(const Tensor& x) const;

 private:
  const Tensor& p(const std::string& name) const { return params_.at(name); }

  EncoderConfig cfg_;
  ParamSet params_;
};

/// Normalized-temperature cross entropy where anchor i's positives are the
/// other rows sharing its group id. Each positive contributes
/// -log softmax_{k != i}(z_i . z_k / tau)[p], averaged over the anchor's
/// positives and then over anchors. Rows of z must have unit norm.
Tensor ntxent_loss(const Tensor& z, std::span<const std::size_t> group, double temperature);
/// Classic pairing: rows i and i+B are the positive pair, z is [2B,E].
Tensor ntxent_loss(const Tensor& z, double temperature);

struct ScheduleState {
  double base_lr = 0.3;
  double min_lr = 0.003;
  long total_steps = 1;
  long step = 0;
  double trust_coefficient = 0.02;
};

double cosine_lr(const ScheduleState& s);

/// Layer-wise clipped gradient step. For each tensor,
/// local = trust * |w| / (|g| + 1e-12) and the applied rate is
/// lr * min(1, local / lr). Tensors with zero weight norm use lr unclipped.
/// Returns the applied rate per tensor.
std::vector<double> trust_ratio_step(ParamSet& params, double lr, double trust_coefficient);

struct PretrainConfig {
  std::size_t batch = 16;
  std::size_t epochs = 4;
  double temperature = 0.5;
  double base_lr = 0.3;
  double min_lr = 0.003;
  double trust_coefficient = 0.02;
  std::size_t canvas = 40;
  crop::AugmentConfig augment;
  crop::ViewSpec views;
  std::uint64_t seed = 1;
};

/// Encoder inputs for patches: each patch fitted onto a zero canvas.
std::vector<Image> patch_canvases(std::span<const dataio::BonePatch> patches, std::size_t canvas);

/// Views of a batch of canvases with group ids (source index within the
/// batch). Local views are resized to the global size so one encoder
/// resolution serves both. Item i draws from its own stream of `stream_base`.
struct ViewBatch {
  Tensor images;  // [V,1,G,G]
  std::vector<std::size_t> group;
};
ViewBatch build_view_batch(std::span<const Image* const> canvases, const PretrainConfig& cfg,
                           std::uint64_t stream_base, crop::CropStats* stats = nullptr);

struct EpochResult {
  double mean_loss = 0.0;
  std::size_t steps = 0;
};

/// One pass over `canvases` in a seeded order. `schedule.step` advances by
/// one per batch. A trailing single-image batch joins the previous one.
EpochResult pretrain_epoch(Encoder& encoder, std::span<const Image> canvases, const PretrainConfig& cfg,
                           ScheduleState& schedule, std::size_t epoch, crop::CropStats* stats = nullptr);
EpochResult pretrain_epoch(Encoder& encoder, std::span<const dataio::BonePatch> patches,
                           const PretrainConfig& cfg, ScheduleState& schedule, std::size_t epoch,
                           crop::CropStats* stats = nullptr);

/// Batches per epoch for `n` images, as pretrain_epoch forms them.
std::size_t batches_per_epoch(std::size_t n, std::size_t batch);

/// All epochs with a shared cosine schedule; returns per-epoch mean loss.
std::vector<double> pretrain(Encoder& encoder, std::span<const Image> canvases, const PretrainConfig& cfg,
                             crop::CropStats* stats = nullptr,
                             const std::function<void(std::size_t, double)>& on_epoch = {});

}  // namespace osteo::pre
