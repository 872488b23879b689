#include <algorithm>
#include <cmath>
#include <numbers>

#include <boost/math/distributions/normal.hpp>

#include "osteo/dataio/dataio.hpp"
#include "osteo/diffcore/errors.hpp"

namespace osteo::dataio {

namespace {

struct Capsule {
  double r0, c0, r1, c1, radius;
};

// Distance from (r,c) to the segment axis of a capsule.
double axis_distance(const Capsule& k, double r, double c) {
  const double dr = k.r1 - k.r0, dc = k.c1 - k.c0;
  const double len2 = dr * dr + dc * dc;
  double t = len2 > 0 ? ((r - k.r0) * dr + (c - k.c0) * dc) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double pr = k.r0 + t * dr - r, pc = k.c0 + t * dc - c;
  return std::sqrt(pr * pr + pc * pc);
}

// Bone layout on a 64x64 reference grid, in Segment order (ulna .. M5).
constexpr std::array<Capsule, 7> kLayout = {{
    {61.0, 24.0, 45.0, 25.0, 3.0},  // ulna
    {61.0, 37.0, 45.0, 36.0, 3.5},  // radius
    {39.0, 44.0, 28.0, 52.0, 2.3},  // M1
    {39.0, 37.5, 16.0, 39.5, 2.3},  // M2
    {39.0, 31.0, 14.0, 31.0, 2.3},  // M3
    {39.0, 24.5, 16.0, 22.5, 2.2},  // M4
    {39.0, 18.5, 21.0, 13.5, 2.1},  // M5
}};

}  // namespace

int label_from_tscore(double t) {
  if (!std::isfinite(t)) throw ContractError("T-score must be finite");
  return t < -2.5 ? 1 : 0;
}

std::vector<AnnotatedImage> synth_ambiguous(std::size_t n, std::size_t size, std::size_t modes,
                                            const std::vector<double>& beta, std::uint64_t seed) {
  if (modes < 1 || modes > 5) throw ContractError("synth_ambiguous supports 1..5 modes");
  if (beta.size() != modes) throw DimensionError("beta length must equal the number of modes");
  if (size < 24) throw ContractError("synth_ambiguous needs size >= 24");
  const double f = static_cast<double>(size) / 32.0;
  std::vector<AnnotatedImage> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = make_stream(seed, i);
    std::uniform_real_distribution<double> ucx(13.0 * f, 16.0 * f), ucy(13.0 * f, 16.0 * f);
    const double cx = ucx(rng), cy = ucy(rng);
    const double radius = 5.0 * f;
    const double half = 4.0 * f, reach = radius + 9.0 * f;

    auto in_disc = [&](double r, double c) {
      return (r - cy) * (r - cy) + (c - cx) * (c - cx) <= radius * radius;
    };
    // Protrusion j (1-based) points right, down, left, up.
    auto in_protrusion = [&](std::size_t j, double r, double c) {
      const double dr = r - cy, dc = c - cx;
      switch (j) {
        case 1: return std::abs(dr) < half && dc > 0 && dc < reach;
        case 2: return std::abs(dc) < half && dr > 0 && dr < reach;
        case 3: return std::abs(dr) < half && dc < 0 && -dc < reach;
        case 4: return std::abs(dc) < half && dr < 0 && -dr < reach;
        default: return false;
      }
    };

    AnnotatedImage a;
    a.id = "amb_" + std::to_string(i);
    a.image = Image(size, size);
    a.weights = beta;
    a.annotations.assign(modes, LabelMap(size, size));
    std::normal_distribution<double> noise(0.0, 0.05);
    for (std::size_t r = 0; r < size; ++r)
      for (std::size_t c = 0; c < size; ++c) {
        const double pr = static_cast<double>(r) + 0.5, pc = static_cast<double>(c) + 0.5;
        double v = 0.1;
        bool faint = false;
        for (std::size_t j = 1; j < modes; ++j) faint = faint || in_protrusion(j, pr, pc);
        if (faint) v = 0.45;
        const bool disc = in_disc(pr, pc);
        if (disc) v = 0.85;
        a.image.at(r, c) = std::clamp(v + noise(rng), 0.0, 1.0);
        for (std::size_t m = 0; m < modes; ++m) {
          const bool fg = disc || (m >= 1 && in_protrusion(m, pr, pc));
          a.annotations[m].at(r, c) = fg ? 1 : 0;
        }
      }
    out.push_back(std::move(a));
  }
  return out;
}

std::vector<HandSample> synth_hand(std::size_t n, std::size_t size, std::uint64_t seed,
                                   const HandSynthConfig& cfg) {
  if (size < 48) throw ContractError("synth_hand needs size >= 48");
  if (!(cfg.prevalence > 0.0 && cfg.prevalence < 1.0)) throw ContractError("prevalence must be in (0,1)");
  const double f = static_cast<double>(size) / 64.0;
  const boost::math::normal_distribution<double> std_normal;
  const double t_mean = -2.5 - cfg.t_score_sd * boost::math::quantile(std_normal, cfg.prevalence);

  std::vector<HandSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = make_stream(seed, i);
    std::normal_distribution<double> t_dist(t_mean, cfg.t_score_sd);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    HandSample s;
    s.subject_id = "subj_" + std::to_string(i);
    s.t_score = t_dist(rng);

    const double angle = (unit(rng) * 16.0 - 8.0) * std::numbers::pi / 180.0;
    const double shift_r = unit(rng) * 6.0 - 3.0, shift_c = unit(rng) * 6.0 - 3.0;
    const double ca = std::cos(angle), sa = std::sin(angle);
    auto place = [&](double r, double c, double& orow, double& ocol) {
      const double dr = r - 32.0, dc = c - 32.0;
      orow = (32.0 + ca * dr - sa * dc + shift_r) * f;
      ocol = (32.0 + sa * dr + ca * dc + shift_c) * f;
    };

    std::array<Capsule, 7> bones{};
    std::array<double, 7> density{};
    const double subject_density =
        cfg.base_pore_density + cfg.texture_link * (-s.t_score) + cfg.bone_noise * gauss(rng);
    for (std::size_t b = 0; b < 7; ++b) {
      Capsule k = kLayout[b];
      const double stretch = 0.9 + 0.2 * unit(rng);
      k.r1 = k.r0 + (k.r1 - k.r0) * stretch;
      k.c1 = k.c0 + (k.c1 - k.c0) * stretch;
      place(k.r0, k.c0, bones[b].r0, bones[b].c0);
      place(k.r1, k.c1, bones[b].r1, bones[b].c1);
      bones[b].radius = k.radius * f;
      density[b] = std::clamp(subject_density + cfg.bone_noise * gauss(rng), 0.0, 0.6);
    }

    // Soft-tissue silhouette: palm ellipse plus forearm band.
    double pr0, pc0, fr0, fc0;
    place(28.0, 31.0, pr0, pc0);
    place(54.0, 30.5, fr0, fc0);
    const double tissue = cfg.soft_tissue_level * (0.8 + 0.4 * unit(rng));
    const double speckle = 0.05 + 0.25 * unit(rng);
    const double exposure = 1.0 - cfg.exposure_jitter + 2.0 * cfg.exposure_jitter * unit(rng);
    const double wave_phase = unit(rng) * 2.0 * std::numbers::pi;

    s.image = Image(size, size);
    s.mask = LabelMap(size, size);
    for (std::size_t r = 0; r < size; ++r)
      for (std::size_t c = 0; c < size; ++c) {
        const double y = static_cast<double>(r) + 0.5, x = static_cast<double>(c) + 0.5;
        // Tissue membership in the hand frame.
        const double dy = y - pr0, dx = x - pc0;
        const double ry = (ca * dy + sa * dx) / (17.0 * f), rx = (-sa * dy + ca * dx) / (19.0 * f);
        const double fy = y - fr0, fx = x - fc0;
        const double ay = (ca * fy + sa * fx) / f, ax = (-sa * fy + ca * fx) / f;
        const bool in_tissue = ry * ry + rx * rx <= 1.0 || (std::abs(ax) <= 13.0 && ay >= -12.0);
        if (!in_tissue) continue;

        double v = tissue * (1.0 + 0.15 * std::sin(0.3 * x / f + 0.2 * y / f + wave_phase));
        if (unit(rng) < speckle) v *= 0.6;
        for (std::size_t b = 0; b < 7; ++b) {
          const double d = axis_distance(bones[b], y, x);
          if (d > bones[b].radius) continue;
          s.mask.at(r, c) = static_cast<std::uint8_t>(b + 1);
          if (d > bones[b].radius - 1.0) {
            v = 0.9;
          } else {
            v = unit(rng) < density[b] ? 0.3 : 0.72;
          }
          break;
        }
        v = v * exposure + 0.02 * gauss(rng);
        s.image.at(r, c) = std::clamp(v, 1e-3, 1.0);
      }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace osteo::dataio
