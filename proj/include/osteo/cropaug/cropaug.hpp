#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "osteo/dataio/image.hpp"
#include "osteo/diffcore/rng.hpp"

namespace osteo::crop {

using dataio::Image;

struct AugmentConfig {
  double rotation_deg = 30.0;    // uniform in [-x, x]
  double translate_frac = 0.10;  // of width / height, uniform in [-x, x]
  double flip_h_prob = 0.5;
  double flip_v_prob = 0.5;
  double brightness_min = 0.5;
  double brightness_max = 1.5;
  double contrast_min = 0.5;
  double contrast_max = 1.5;
  std::uint64_t seed = 0;

  void validate() const;
};

/// One draw of the augmentation parameters.
struct AugmentParams {
  double rotation_deg = 0.0;
  double shift_x = 0.0;  // fraction of width
  double shift_y = 0.0;  // fraction of height
  bool flip_h = false;
  bool flip_v = false;
  double brightness = 1.0;
  double contrast = 1.0;
};

AugmentParams draw_params(const AugmentConfig& cfg, Rng& rng);

/// Rotation about the centre (bilinear, zero fill), translation, flips,
/// then brightness and contrast. Photometric changes touch only nonzero
/// (content) pixels and contrast pivots on their mean, so empty regions stay
/// empty. Output is clamped to [0,1].
Image apply_augment(const Image& image, const AugmentParams& p);
Image augment(const Image& image, const AugmentConfig& cfg, Rng& rng);

/// Count of crops served and of crops that fell back after exhausting
/// their attempts.
struct CropStats {
  std::size_t crops = 0;
  std::size_t fallbacks = 0;
};

struct CropResult {
  Image crop;
  std::size_t row = 0;
  std::size_t col = 0;
  double nonzero = 0.0;
  int attempts = 0;
  bool fallback = false;
};

/// Rejection sampling over uniform origins: the first crop with nonzero
/// fraction >= min_nonzero wins; after max_attempts failures the densest
/// attempt is returned and counted as a fallback.
CropResult constrained_crop(const Image& image, std::size_t size, double min_nonzero, int max_attempts, Rng& rng,
                            CropStats* stats = nullptr);

struct ViewSpec {
  std::size_t global_count = 2;
  std::size_t global_size = 32;
  std::size_t local_count = 4;
  std::size_t local_size = 12;
  double min_nonzero = 0.10;  // 0 gives conventional multi-crop
  int max_attempts = 100;
};

struct ViewSet {
  std::vector<Image> global_views;
  std::vector<Image> local_views;
  double min_nonzero_frac = 0.0;
  std::string source_id;
};

/// Each view is augmented independently and then cropped.
ViewSet make_views(const Image& image, const AugmentConfig& cfg, const ViewSpec& spec, Rng& rng,
                   const std::string& source_id = {}, CropStats* stats = nullptr);

}  // namespace osteo::crop
