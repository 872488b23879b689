#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "osteo/clsfinetune/clsfinetune.hpp"
#include "osteo/cropaug/cropaug.hpp"
#include "osteo/dataio/dataio.hpp"
#include "osteo/mixunet/mixunet.hpp"
#include "osteo/pretrain/pretrain.hpp"

namespace osteo::app {

/// Every tunable of a run. Serialised as JSON with one object per section;
/// see config_json / parse_config.
struct RunConfig {
  struct Data {
    std::size_t subjects = 500;
    std::size_t image_size = 64;
    double prevalence = 0.285;
    std::uint64_t seed = 2024;
  } data;
  struct Segmentation {
    std::size_t modules = 2;
    std::size_t samples = 2;
    std::size_t latent = 8;
    double lambda = 1.0;
    double gamma0 = 0.75;
    double epsilon = 0.01;
    std::size_t steps = 300;
    std::size_t batch = 8;
    double lr = 1e-3;
    double sigma_init = 0.1;
    std::size_t predict_samples = 4;
  } segmentation;
  crop::AugmentConfig augmentation;
  struct Pretraining {
    std::string mode = "contrastive";  // or "none"
    std::string crop_mode = "constrained";  // or "conventional"
    double temperature = 0.5;
    std::size_t batch = 16;
    std::size_t epochs = 4;
    double base_lr = 0.3;
    double min_lr = 0.003;
    double trust_coefficient = 0.02;
    std::size_t canvas = 40;
    crop::ViewSpec views;
  } pretraining;
  cls::FinetuneConfig finetuning;
  /// "segmentation" uses predicted bone masks; "none" uses random raw crops.
  std::string patch_source = "segmentation";
  std::size_t raw_crop_size = 24;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Canonical JSON text of a config.
std::string config_json(const RunConfig& cfg);
/// Parses JSON text on top of the defaults. Unknown keys and wrong types
/// throw ConfigError naming the key path, e.g. "segmentation.gamma0".
RunConfig parse_config(const std::string& text);

class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

/// Raised when a stage's input artifact is absent; names the stage that
/// produces it.
class MissingArtifactError : public std::runtime_error {
 public:
  MissingArtifactError(const std::string& stage, const std::filesystem::path& path)
      : std::runtime_error("missing " + path.string() + ": run the '" + stage + "' stage first"), stage_(stage) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

using LogFn = std::function<void(const std::string&)>;

// ---- in-memory stages ----------------------------------------------------

struct Cohort {
  std::vector<dataio::HandSample> hands;
  dataio::Split split;
};

Cohort make_cohort(const RunConfig& cfg);

/// Order-independent RNG stream id for per-subject draws.
std::uint64_t subject_stream(const std::string& subject_id);

mix::NetConfig seg_net_config(const RunConfig& cfg);
mix::SegTrainConfig seg_train_config(const RunConfig& cfg);
pre::PretrainConfig pretrain_config(const RunConfig& cfg);

/// Trains on the ground-truth masks of the training subjects.
/// `on_loss` sees every step's loss with its transport plans.
mix::MixtureNet train_segmenter(const RunConfig& cfg, const Cohort& cohort, const LogFn& log = {},
                                const std::function<void(const mix::SegLoss&)>& on_loss = {});

/// Mixture-mean argmax masks for every hand, in cohort order.
std::vector<dataio::LabelMap> predict_masks(const RunConfig& cfg, const mix::MixtureNet& net,
                                            const std::vector<dataio::HandSample>& hands);

/// Subjects from bone patches of the given masks.
std::vector<cls::SubjectRecord> subjects_from_masks(const std::vector<dataio::HandSample>& hands,
                                                    const std::vector<dataio::LabelMap>& masks);
/// Subjects from seven random raw crops per image (no segmentation).
std::vector<cls::SubjectRecord> subjects_from_raw_crops(const RunConfig& cfg,
                                                        const std::vector<dataio::HandSample>& hands);

struct SplitSubjects {
  std::vector<cls::SubjectRecord> train, val, test;
};
SplitSubjects split_records(const std::vector<cls::SubjectRecord>& subjects, const dataio::Split& split);

/// Contrastive pretraining on the training patches, or an untouched
/// encoder when the mode is "none".
pre::Encoder pretrain_encoder(const RunConfig& cfg, const std::vector<cls::SubjectRecord>& train,
                              const LogFn& log = {});

struct ClassifierOutcome {
  cls::MetricsReport metrics;
  std::vector<cls::SubjectPrediction> predictions;
};

/// Linear probe on a frozen encoder when pretraining is on; joint
/// supervised training (which updates `encoder`) otherwise.
cls::FinetuneResult train_classifier(const RunConfig& cfg, pre::Encoder& encoder, const SplitSubjects& subjects,
                                     const LogFn& log = {});
ClassifierOutcome evaluate_classifier(const RunConfig& cfg, const pre::Encoder& encoder, const cls::LinearHead& head,
                                      const std::vector<cls::SubjectRecord>& test);
/// train_classifier then evaluate_classifier on the test subjects.
ClassifierOutcome classify(const RunConfig& cfg, pre::Encoder& encoder, const SplitSubjects& subjects,
                           cls::LinearHead* head_out = nullptr, const LogFn& log = {});

// ---- run directory -------------------------------------------------------
//
//   <run>/config.json
//   <run>/data/                 dataset files (synth)
//   <run>/seed_<s>/checkpoints/ segmenter.ckpt, encoder.ckpt, head.ckpt, head.json
//   <run>/seed_<s>/patches/     patches.json plus one PGM per patch
//   <run>/seed_<s>/metrics/     metrics.json, per_bone.csv
//   <run>/logs/                 one log per stage

struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path config() const { return root / "config.json"; }
  std::filesystem::path data() const { return root / "data"; }
  std::filesystem::path logs() const { return root / "logs"; }
  std::filesystem::path seed_dir(std::uint64_t seed) const { return root / ("seed_" + std::to_string(seed)); }
  std::filesystem::path checkpoints(std::uint64_t seed) const { return seed_dir(seed) / "checkpoints"; }
  std::filesystem::path patches(std::uint64_t seed) const { return seed_dir(seed) / "patches"; }
  std::filesystem::path metrics(std::uint64_t seed) const { return seed_dir(seed) / "metrics"; }
};

void write_config(const RunPaths& run, const RunConfig& cfg);
RunConfig read_config(const RunPaths& run);

void stage_synth(const RunPaths& run, const RunConfig& cfg, const LogFn& log = {});
/// `dump_plan`, when set, receives the last step's transport plans as JSON.
void stage_segment_train(const RunPaths& run, const RunConfig& cfg, std::uint64_t seed, const LogFn& log = {},
                         const std::filesystem::path* dump_plan = nullptr);
/// Writes predicted masks next to the segmenter checkpoint.
void stage_segment_predict(const RunPaths& run, const RunConfig& cfg, std::uint64_t seed, const LogFn& log = {});
void stage_extract_patches(const RunPaths& run, const RunConfig& cfg, std::uint64_t seed, const LogFn& log = {});
void stage_pretrain(const RunPaths& run, const RunConfig& cfg, std::uint64_t seed, const LogFn& log = {});
void stage_finetune(const RunPaths& run, const RunConfig& cfg, std::uint64_t seed, const LogFn& log = {});
cls::MetricsReport stage_evaluate(const RunPaths& run, const RunConfig& cfg, std::uint64_t seed,
                                  const LogFn& log = {});

/// Reads <run>/seed_<s>/metrics/metrics.json.
cls::MetricsReport read_metrics(const RunPaths& run, std::uint64_t seed);

/// Every stage in order for one seed; returns the test metrics.
cls::MetricsReport run_all(const RunPaths& run, const RunConfig& cfg, std::uint64_t seed, const LogFn& log = {});

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;  // population
};
struct SeedSummary {
  std::vector<cls::MetricsReport> per_seed;
  MetricSummary f1, auc, accuracy, precision, recall, macro_f1;
};
SeedSummary summarize(const std::vector<cls::MetricsReport>& reports);
std::string summary_json(const SeedSummary& s);

/// Ablated minus baseline for F1, AUC and accuracy means, as JSON.
std::string ablation_json(const std::string& mode, const SeedSummary& baseline, const SeedSummary& ablated);

/// Baseline config transformed for an ablation mode:
/// no-segmentation, no-pretrain, conventional-crop.
RunConfig ablated_config(const RunConfig& base, const std::string& mode);

}  // namespace osteo::app
