#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "osteo/dataio/dataio.hpp"
#include "osteo/diffcore/params.hpp"
#include "osteo/pretrain/pretrain.hpp"

namespace osteo::cls {

using dataio::BonePatch;
using diffcore::ParamSet;
using diffcore::Tensor;

/// One subject: up to seven bone patches and the label derived from its
/// T-score (1 = osteoporosis).
struct SubjectRecord {
  std::string subject_id;
  std::vector<BonePatch> patches;
  double t_score = 0.0;
  int label = 0;

  void validate() const;
};

SubjectRecord make_subject(std::string subject_id, std::vector<BonePatch> patches, double t_score);

// ---- metrics -------------------------------------------------------------

struct MetricsReport {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double auc = 0.0;
  bool auc_defined = false;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::uint64_t seed = 0;
};

/// Mann-Whitney AUC, ties count one half. Throws ContractError when either
/// class is absent.
double auc_score(std::span<const double> scores, std::span<const int> labels);

/// Positive-class metrics plus macro-F1 over both classes. Undefined
/// precision / recall / F1 (zero denominators) are reported as 0. AUC is
/// left undefined, not thrown, for a single-class label set.
MetricsReport compute_metrics(std::span<const int> predicted, std::span<const double> scores,
                              std::span<const int> labels);

/// {precision, recall, f1, auc, accuracy, macro_f1, seed}; an undefined AUC
/// is written as null.
std::string metrics_json(const MetricsReport& m);

struct Aggregate {
  int predicted = 0;
  std::vector<double> mean_probs;
};

/// Mean of the per-patch class probabilities, then argmax. Ties go to the
/// lower class index, so a 0.5 binary mean is negative.
Aggregate aggregate_subject(std::span<const std::vector<double>> patch_probs);

/// Index of the highest validation macro-F1; earliest wins ties.
std::size_t select_best(std::span<const double> macro_f1_history);

// ---- models --------------------------------------------------------------

/// Affine classifier on standardised representations.
struct LinearHead {
  std::vector<double> mean;
  std::vector<double> inv_std;
  ParamSet params;  // "head.w" [2,R], "head.b" [2]
};

LinearHead make_head(std::size_t rep, std::uint64_t seed);

/// Encoder input for a patch: fitted onto a zero canvas.
Tensor patch_batch(std::span<const BonePatch* const> patches, std::size_t canvas);

/// Frozen representations [P,R], computed without recording.
Tensor patch_features(const pre::Encoder& encoder, std::span<const BonePatch* const> patches,
                      std::size_t canvas);

/// Class probabilities [P,2] of a head on raw representations.
Tensor head_probs(const LinearHead& head, const Tensor& features);

struct FinetuneConfig {
  std::size_t epochs = 60;
  double lr = 0.01;
  std::size_t batch = 64;
  std::size_t canvas = 40;
  std::uint64_t seed = 1;
  // jointly supervised baseline
  std::size_t supervised_epochs = 12;
  double supervised_lr = 1e-3;
  std::size_t supervised_batch = 32;
};

struct FinetuneResult {
  LinearHead head;
  std::vector<double> val_macro_f1;
  std::size_t best_epoch = 0;
  std::vector<double> train_loss;
};

/// Linear probe: the encoder is read-only; the head is trained by patch-level
/// class-balanced cross-entropy and the epoch with the best validation
/// macro-F1 is kept.
FinetuneResult finetune(const pre::Encoder& encoder, std::span<const SubjectRecord> train,
                        std::span<const SubjectRecord> val, const FinetuneConfig& cfg);

/// Encoder and head trained together from scratch (no pretext stage);
/// `encoder` is left at the selected epoch's weights.
FinetuneResult train_supervised(pre::Encoder& encoder, std::span<const SubjectRecord> train,
                                std::span<const SubjectRecord> val, const FinetuneConfig& cfg);

struct SubjectPrediction {
  std::string subject_id;
  int label = 0;
  int predicted = 0;
  double score = 0.0;  // mean positive-class probability
  std::vector<dataio::Segment> segments;
  std::vector<double> patch_scores;
};

std::vector<SubjectPrediction> predict_subjects(const pre::Encoder& encoder, const LinearHead& head,
                                                std::span<const SubjectRecord> subjects, std::size_t canvas);

MetricsReport evaluate(std::span<const SubjectPrediction> predictions, std::uint64_t seed = 0);

/// segment,mean_prob,std of the positive-class patch probability per bone.
std::string per_bone_csv(std::span<const SubjectPrediction> predictions);

}  // namespace osteo::cls
