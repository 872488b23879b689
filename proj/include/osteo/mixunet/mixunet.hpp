#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "osteo/dataio/dataio.hpp"
#include "osteo/diffcore/params.hpp"
#include "osteo/diffcore/rng.hpp"
#include "osteo/diffcore/tensor.hpp"
#include "osteo/otcoupling/otcoupling.hpp"

namespace osteo::mix {

using dataio::AnnotatedImage;
using dataio::LabelMap;
using diffcore::ParamSet;
using diffcore::Tensor;

struct NetConfig {
  std::size_t in_channels = 1;
  std::size_t classes = 2;   // C, background included
  std::size_t modules = 4;   // K
  std::size_t samples = 8;   // S, latent draws per module
  std::size_t latent = 8;    // L
  std::size_t f1 = 32;       // encoder output channels
  std::size_t f2 = 16;       // decoder output channels
  std::size_t route_hidden = 32;
  std::size_t stem = 16;     // widths above the bottleneck
  std::size_t mid = 24;
  double sigma_init = 0.1;   // initial latent std

  std::size_t atoms() const { return modules * samples; }
  void validate() const;
};

/// Handles into a net's parameters for module k.
struct ModuleLatent {
  Tensor mu;         // [L]
  Tensor log_sigma;  // [L]
  Tensor w_s;        // [F2,L]
  Tensor w_b;        // [F2,L]
};

/// Per-pixel affine modulation, one output per row of `scale`/`bias`.
/// u_d is [B,F2,H,W]; scale and bias are [R,F2]; row r reads image
/// image_of_row[r]. Output [R,F2,H,W] is scale * (u_d + bias).
Tensor modulate(const Tensor& u_d, const Tensor& scale, const Tensor& bias,
                std::span<const std::size_t> image_of_row);
/// Single image, single latent: u_d [F2,H,W], z [L] -> [F2,H,W].
Tensor modulate(const Tensor& u_d, const ModuleLatent& latent, const Tensor& z);

struct Features {
  Tensor u_e;  // [B,F1,H/8,W/8]
  Tensor u_d;  // [B,F2,H,W]
};

/// Atom score maps and routing weights for a batch.
struct AtomBatch {
  Tensor scores;  // [B*A,C,H,W], image-major then module-major
  Tensor pi;      // [B,K]
  Tensor alpha;   // [B*A], pi_k / S per atom
};

class MixtureNet {
 public:
  MixtureNet(const NetConfig& cfg, std::uint64_t seed);

  const NetConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  /// Names of the routing parameters; everything else is segmentation.
  bool is_routing(const std::string& name) const;

  ModuleLatent latent(std::size_t k) const;

  /// x [B,in,H,W] with H, W divisible by 8.
  Features features(const Tensor& x) const;
  /// Routing weights [B,K] from the encoder output; the routing input is
  /// detached so only routing parameters learn from the routing loss.
  Tensor route(const Tensor& u_e) const;
  /// Shared 1x1 head: [R,F2,H,W] -> [R,C,H,W] scores.
  Tensor head(const Tensor& u) const;
  /// Full forward with explicit standard-normal noise eps [B,K,S,L].
  AtomBatch forward(const Tensor& x, const Tensor& noise) const;
  Tensor draw_noise(std::size_t batch, osteo::Rng& rng) const;

 private:
  const Tensor& p(const std::string& name) const { return params_.at(name); }
  Tensor conv_block(const Tensor& x, const std::string& name, std::size_t stride) const;

  NetConfig cfg_;
  ParamSet params_;
};

/// Weighted sample set for one image.
struct MixturePrediction {
  Tensor atoms;                // [A,C,H,W] scores
  std::vector<double> weights; // pi_k / S
  std::vector<double> pi;      // [K]
};

MixturePrediction sample_predictive(const MixtureNet& net, const dataio::Image& image, std::size_t samples,
                                    osteo::Rng& rng);

struct MaskPrediction {
  LabelMap mask;
  std::vector<double> confidence;  // winning class probability per pixel
  Tensor probs;                    // [C,H,W] mixture of atom softmaxes
};

/// Mixture-weighted average of atom softmax maps, then per-pixel argmax
/// (ties to the lower class).
MaskPrediction mixture_mask(const MixturePrediction& pred);
MaskPrediction predict_mask(const MixtureNet& net, const dataio::Image& image, std::size_t samples,
                            osteo::Rng& rng);

/// Argmax mask of the mean softmax over module k's atoms.
LabelMap module_mean_mask(const MixturePrediction& pred, std::size_t k, std::size_t samples);

// ---- training -------------------------------------------------------------

struct SegTrainConfig {
  std::size_t steps = 200;
  std::size_t batch = 8;
  double lr = 1e-3;
  double gamma0 = 0.75;
  double anneal_fraction = 0.5;  // gamma reaches 1 after this share of steps
  double lambda = 1.0;
  double epsilon = 0.01;
  int sinkhorn_iters = 200;
  std::uint64_t seed = 1;
};

struct SegLoss {
  Tensor total;  // batch mean
  double transport = 0.0;
  double kl = 0.0;
  std::vector<ot::CouplingPlan> plans;
  std::vector<ot::CostMatrix> costs;
};

/// Batch loss with plans solved on the hard cost matrices and transport
/// terms carried by the soft surrogate. Passing `fixed_plans` skips the
/// solve and reuses them (one per image).
SegLoss segmentation_loss(const MixtureNet& net, std::span<const AnnotatedImage* const> batch,
                          const Tensor& noise, double gamma, const SegTrainConfig& cfg,
                          const std::vector<ot::CouplingPlan>* fixed_plans = nullptr);

struct SegStepLog {
  std::size_t step = 0;
  double gamma = 1.0;
  double loss = 0.0;
  double transport = 0.0;
  double kl = 0.0;
};

using SegLogFn = std::function<void(const SegStepLog&, const SegLoss&)>;

/// Adam on all parameters; batches are drawn without replacement per
/// epoch from a seeded shuffle.
std::vector<SegStepLog> train_segmentation(MixtureNet& net, const std::vector<AnnotatedImage>& data,
                                           const SegTrainConfig& cfg, const SegLogFn& on_step = {});

/// Images [1,H,W] to a batch tensor [B,1,H,W].
Tensor batch_images(std::span<const AnnotatedImage* const> batch);

}  // namespace osteo::mix
