#include "osteo/cropaug/cropaug.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "osteo/diffcore/errors.hpp"

namespace osteo::crop {

void AugmentConfig::validate() const {
  if (rotation_deg < 0.0 || translate_frac < 0.0) throw ContractError("augmentation ranges must be nonnegative");
  if (flip_h_prob < 0.0 || flip_h_prob > 1.0 || flip_v_prob < 0.0 || flip_v_prob > 1.0) {
    throw ContractError("flip probabilities must lie in [0,1]");
  }
  if (!(brightness_min > 0.0 && brightness_min <= brightness_max)) throw ContractError("bad brightness range");
  if (!(contrast_min > 0.0 && contrast_min <= contrast_max)) throw ContractError("bad contrast range");
}

AugmentParams draw_params(const AugmentConfig& cfg, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto between = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  AugmentParams p;
  p.rotation_deg = between(-cfg.rotation_deg, cfg.rotation_deg);
  p.shift_x = between(-cfg.translate_frac, cfg.translate_frac);
  p.shift_y = between(-cfg.translate_frac, cfg.translate_frac);
  p.flip_h = unit(rng) < cfg.flip_h_prob;
  p.flip_v = unit(rng) < cfg.flip_v_prob;
  p.brightness = between(cfg.brightness_min, cfg.brightness_max);
  p.contrast = between(cfg.contrast_min, cfg.contrast_max);
  return p;
}

namespace {

double sample_zero_fill(const Image& src, double y, double x) {
  const double fy = std::floor(y), fx = std::floor(x);
  const double wy = y - fy, wx = x - fx;
  const long y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
  auto px = [&](long r, long c) {
    if (r < 0 || c < 0 || r >= static_cast<long>(src.height) || c >= static_cast<long>(src.width)) return 0.0;
    return src.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
  };
  double v = (1 - wy) * (1 - wx) * px(y0, x0);
  if (wx > 0) v += (1 - wy) * wx * px(y0, x0 + 1);
  if (wy > 0) v += wy * (1 - wx) * px(y0 + 1, x0);
  if (wx > 0 && wy > 0) v += wy * wx * px(y0 + 1, x0 + 1);
  return v;
}

}  // namespace

Image apply_augment(const Image& image, const AugmentParams& p) {
  if (image.empty()) throw DimensionError("augment of an empty image");
  const std::size_t h = image.height, w = image.width;
  const double cy = (static_cast<double>(h) - 1.0) / 2.0, cx = (static_cast<double>(w) - 1.0) / 2.0;
  const double theta = p.rotation_deg * std::numbers::pi / 180.0;
  const double ct = std::cos(theta), st = std::sin(theta);
  const double dy = p.shift_y * static_cast<double>(h), dx = p.shift_x * static_cast<double>(w);

  // Inverse-map every output pixel through flip, shift and rotation.
  Image out(h, w);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      double y = static_cast<double>(p.flip_v ? h - 1 - r : r) - dy;
      double x = static_cast<double>(p.flip_h ? w - 1 - c : c) - dx;
      const double ry = y - cy, rx = x - cx;
      x = ct * rx + st * ry + cx;
      y = -st * rx + ct * ry + cy;
      out.at(r, c) = sample_zero_fill(image, y, x);
    }

  double sum = 0.0;
  std::size_t content = 0;
  for (double& v : out.pixels) {
    if (v == 0.0) continue;
    v *= p.brightness;
    sum += v;
    ++content;
  }
  if (content > 0 && p.contrast != 1.0) {
    const double mean = sum / static_cast<double>(content);
    for (double& v : out.pixels)
      if (v != 0.0) v = mean + p.contrast * (v - mean);
  }
  for (double& v : out.pixels) v = std::clamp(v, 0.0, 1.0);
  return out;
}

Image augment(const Image& image, const AugmentConfig& cfg, Rng& rng) {
  return apply_augment(image, draw_params(cfg, rng));
}

CropResult constrained_crop(const Image& image, std::size_t size, double min_nonzero, int max_attempts, Rng& rng,
                            CropStats* stats) {
  if (size == 0 || size > image.height || size > image.width) {
    throw DimensionError("crop size " + std::to_string(size) + " exceeds image " + std::to_string(image.height) +
                         "x" + std::to_string(image.width));
  }
  if (min_nonzero < 0.0 || min_nonzero > 1.0) throw ContractError("min_nonzero must lie in [0,1]");
  if (max_attempts < 1) throw ContractError("max_attempts must be positive");
  std::uniform_int_distribution<std::size_t> row_d(0, image.height - size), col_d(0, image.width - size);

  CropResult best;
  best.nonzero = -1.0;
  for (int attempt = 1; attempt <= max_attempts; ++attempt) {
    const std::size_t r0 = row_d(rng), c0 = col_d(rng);
    std::size_t nz = 0;
    for (std::size_t r = 0; r < size; ++r)
      for (std::size_t c = 0; c < size; ++c) nz += image.at(r0 + r, c0 + c) != 0.0;
    const double frac = static_cast<double>(nz) / static_cast<double>(size * size);
    if (frac > best.nonzero) {
      best.row = r0;
      best.col = c0;
      best.nonzero = frac;
    }
    best.attempts = attempt;
    if (frac >= min_nonzero) {
      best.row = r0;
      best.col = c0;
      best.nonzero = frac;
      break;
    }
  }
  best.fallback = best.nonzero < min_nonzero;
  best.crop = Image(size, size);
  for (std::size_t r = 0; r < size; ++r)
    for (std::size_t c = 0; c < size; ++c) best.crop.at(r, c) = image.at(best.row + r, best.col + c);
  if (stats) {
    ++stats->crops;
    stats->fallbacks += best.fallback;
  }
  return best;
}

ViewSet make_views(const Image& image, const AugmentConfig& cfg, const ViewSpec& spec, Rng& rng,
                   const std::string& source_id, CropStats* stats) {
  if (image.height < spec.global_size || image.width < spec.global_size) {
    throw DimensionError("image smaller than the global view size");
  }
  ViewSet out;
  out.min_nonzero_frac = spec.min_nonzero;
  out.source_id = source_id;
  auto view = [&](std::size_t size) {
    return constrained_crop(augment(image, cfg, rng), size, spec.min_nonzero, spec.max_attempts, rng, stats).crop;
  };
  for (std::size_t i = 0; i < spec.global_count; ++i) out.global_views.push_back(view(spec.global_size));
  for (std::size_t i = 0; i < spec.local_count; ++i) out.local_views.push_back(view(spec.local_size));
  return out;
}

}  // namespace osteo::crop
