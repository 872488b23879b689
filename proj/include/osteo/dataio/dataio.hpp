#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "osteo/dataio/image.hpp"
#include "osteo/diffcore/rng.hpp"

namespace osteo::dataio {

/// Background plus the seven target bones.
inline constexpr std::size_t kHandClasses = 8;

enum class Segment : std::uint8_t { Ulna = 1, Radius = 2, M1 = 3, M2 = 4, M3 = 5, M4 = 6, M5 = 7 };

inline constexpr std::array<Segment, 7> kAllSegments = {Segment::Ulna, Segment::Radius, Segment::M1,
                                                        Segment::M2,   Segment::M3,     Segment::M4,
                                                        Segment::M5};

std::string_view segment_name(Segment s);
std::optional<Segment> segment_from_name(std::string_view name);

/// One image with M weighted annotations.
struct AnnotatedImage {
  std::string id;
  Image image;
  std::vector<LabelMap> annotations;
  std::vector<double> weights;

  /// Throws ContractError / DimensionError on violated invariants.
  void validate() const;
};

struct BBox {
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  bool operator==(const BBox&) const = default;
};

/// Masked crop of one bone.
struct BonePatch {
  Segment segment = Segment::Ulna;
  Image crop;
  BBox bbox;
  std::string subject_id;
};

/// Synthetic hand radiograph with its 8-class mask and T-score.
struct HandSample {
  std::string subject_id;
  Image image;
  LabelMap mask;
  double t_score = 0.0;
};

struct HandSynthConfig {
  double prevalence = 0.285;
  double t_score_sd = 1.5;
  /// Pore density per unit of -t_score; 0 removes the pixel-to-label link.
  double texture_link = 0.035;
  double base_pore_density = 0.08;
  double bone_noise = 0.02;
  /// Random exposure multiplier range [1 - x, 1 + x].
  double exposure_jitter = 0.25;
  double soft_tissue_level = 0.3;
};

/// Ambiguous-boundary blobs: annotation j of each image is mode j. Mode 0 is
/// the bare disc; mode j >= 1 adds protrusion j, which the image shows only
/// faintly.
std::vector<AnnotatedImage> synth_ambiguous(std::size_t n, std::size_t size, std::size_t modes,
                                            const std::vector<double>& beta, std::uint64_t seed);

/// Seven capsule bones (2 forearm, 5 metacarpal) over a soft-tissue
/// silhouette. Trabecular pore density grows as the T-score falls.
std::vector<HandSample> synth_hand(std::size_t n, std::size_t size, std::uint64_t seed,
                                   const HandSynthConfig& cfg = {});

/// 1 iff t < -2.5.
int label_from_tscore(double t);

/// Per present bone class: Hadamard mask, tight bbox padded by `pad` and
/// clipped to the image, crop. Absent classes are skipped.
std::vector<BonePatch> extract_patches(const Image& image, const LabelMap& mask,
                                       const std::string& subject_id, std::size_t pad = 2);

struct Split {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
};

/// Subject-wise 80/10/10 partition; val and test are rounded to nearest and
/// train absorbs the remainder.
Split split_subjects(const std::vector<std::string>& ids, std::uint64_t seed);

// ---- raster and dataset files --------------------------------------------

void write_pgm(const std::filesystem::path& path, const Image& image, int bits = 16);
void write_pgm(const std::filesystem::path& path, const LabelMap& labels);
Image read_pgm_image(const std::filesystem::path& path);
LabelMap read_pgm_labels(const std::filesystem::path& path);

/// Dataset directory:
///   images/<id>.pgm, masks/<id>_<j>.pgm, meta/<id>.json, manifest.json
struct DatasetRecord {
  std::string id;
  std::string subject_id;
  Image image;
  std::vector<LabelMap> annotations;
  std::vector<double> weights;
  std::optional<double> t_score;
};

void write_dataset(const std::filesystem::path& root, const std::vector<DatasetRecord>& records,
                   const Split& split);
std::vector<DatasetRecord> read_dataset(const std::filesystem::path& root);
Split read_manifest(const std::filesystem::path& root);

DatasetRecord to_record(const HandSample& s);
DatasetRecord to_record(const AnnotatedImage& a);
AnnotatedImage to_annotated(const DatasetRecord& r);

}  // namespace osteo::dataio
