#include <doctest.h>

#include <random>

#include "osteo/cropaug/cropaug.hpp"
#include "osteo/diffcore/errors.hpp"

using namespace osteo;
using namespace osteo::crop;

namespace {

Image random_image(std::size_t h, std::size_t w, Rng& rng) {
  Image im(h, w);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  for (auto& v : im.pixels) v = u(rng);
  return im;
}

// A dense square blob covering `area` of a side x side zero canvas.
Image blob_image(std::size_t side, double area) {
  Image im(side, side);
  const auto edge = static_cast<std::size_t>(std::lround(std::sqrt(area) * static_cast<double>(side)));
  const std::size_t off = (side - edge) / 3;
  for (std::size_t r = off; r < off + edge; ++r)
    for (std::size_t c = off; c < off + edge; ++c) im.at(r, c) = 0.7;
  return im;
}

}  // namespace

TEST_CASE("augment reference cases") {
  Rng rng(1);
  const Image im = random_image(9, 7, rng);

  SUBCASE("identity parameters") { CHECK(apply_augment(im, AugmentParams{}) == im); }
  SUBCASE("horizontal flip is an involution") {
    AugmentParams p;
    p.flip_h = true;
    const Image once = apply_augment(im, p);
    CHECK(once.at(2, 0) == im.at(2, 6));
    CHECK(apply_augment(once, p) == im);
  }
  SUBCASE("vertical flip is an involution") {
    AugmentParams p;
    p.flip_v = true;
    CHECK(apply_augment(apply_augment(im, p), p) == im);
  }
  SUBCASE("brightness on a constant image") {
    AugmentParams p;
    p.brightness = 0.5;
    const Image out = apply_augment(Image(5, 5, 0.8), p);
    for (double v : out.pixels) CHECK(v == doctest::Approx(0.4).epsilon(1e-15));
  }
  SUBCASE("contrast leaves a constant image alone") {
    AugmentParams p;
    p.contrast = 1.4;
    const Image out = apply_augment(Image(5, 5, 0.3), p);
    for (double v : out.pixels) CHECK(v == doctest::Approx(0.3).epsilon(1e-15));
  }
  SUBCASE("integer shift moves content and fills with zeros") {
    AugmentParams p;
    p.shift_x = 2.0 / 7.0;
    const Image out = apply_augment(im, p);
    CHECK(out.at(4, 0) == 0.0);
    CHECK(out.at(4, 1) == 0.0);
    CHECK(out.at(4, 5) == doctest::Approx(im.at(4, 3)));
  }
  SUBCASE("quarter turn of a square image") {
    const Image sq = random_image(6, 6, rng);
    AugmentParams p;
    p.rotation_deg = 90.0;
    const Image out = apply_augment(sq, p);
    for (std::size_t r = 0; r < 6; ++r)
      for (std::size_t c = 0; c < 6; ++c) CHECK(out.at(r, c) == doctest::Approx(sq.at(5 - c, r)).epsilon(1e-9));
  }
}

TEST_CASE("augment keeps range, shape and empty background") {
  Rng rng(2);
  const Image im = blob_image(40, 0.3);
  AugmentConfig cfg;
  for (int t = 0; t < 200; ++t) {
    const AugmentParams p = draw_params(cfg, rng);
    CHECK(std::abs(p.rotation_deg) <= 30.0);
    CHECK(std::abs(p.shift_x) <= 0.1);
    CHECK(p.brightness >= 0.5);
    CHECK(p.contrast <= 1.5);
    const Image out = apply_augment(im, p);
    CHECK(out.height == 40);
    CHECK(out.width == 40);
    for (double v : out.pixels) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    CHECK(out.at(39, 39) == 0.0);
  }
}

TEST_CASE("augmentation draws are seed-determined") {
  AugmentConfig cfg;
  Rng a(77), b(77);
  const Image im = blob_image(32, 0.4);
  for (int t = 0; t < 20; ++t) CHECK(augment(im, cfg, a) == augment(im, cfg, b));
}

TEST_CASE("constrained_crop reference cases") {
  Rng rng(3);
  CropStats stats;
  SUBCASE("dense image accepts the first origin") {
    const auto res = constrained_crop(random_image(20, 20, rng), 8, 0.1, 100, rng, &stats);
    CHECK(res.attempts == 1);
    CHECK_FALSE(res.fallback);
    CHECK(res.crop.height == 8);
  }
  SUBCASE("empty image falls back and is counted") {
    const auto res = constrained_crop(Image(20, 20), 8, 0.1, 100, rng, &stats);
    CHECK(res.fallback);
    CHECK(res.nonzero == 0.0);
    CHECK(res.attempts == 100);
    CHECK(stats.fallbacks == 1);
  }
  SUBCASE("fallback keeps the densest attempt") {
    Image im(20, 20);
    im.at(0, 0) = 1.0;
    const auto res = constrained_crop(im, 10, 0.5, 200, rng, &stats);
    CHECK(res.fallback);
    CHECK(res.nonzero == doctest::Approx(0.01));
    CHECK(res.row == 0);
    CHECK(res.col == 0);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(constrained_crop(Image(10, 20), 11, 0.1, 10, rng), DimensionError);
    CHECK_THROWS_AS(constrained_crop(Image(10, 20), 5, 1.5, 10, rng), ContractError);
  }
}

TEST_CASE("constrained crops always meet the threshold on a dense blob") {
  Rng rng(4);
  const Image im = blob_image(40, 0.4);
  CropStats constrained, conventional;
  std::size_t sparse_conventional = 0;
  for (int t = 0; t < 10000; ++t) {
    const auto a = constrained_crop(im, 12, 0.10, 100, rng, &constrained);
    CHECK(a.nonzero >= 0.10);
    const auto b = constrained_crop(im, 12, 0.0, 100, rng, &conventional);
    sparse_conventional += b.nonzero < 0.10;
  }
  CHECK(constrained.fallbacks == 0);
  CHECK(conventional.fallbacks == 0);
  CHECK(sparse_conventional >= 100);
}

TEST_CASE("make_views shapes, threshold and determinism") {
  const Image im = blob_image(40, 0.3);
  AugmentConfig cfg;
  ViewSpec spec;
  Rng a(9), b(9);
  CropStats stats;
  for (int t = 0; t < 50; ++t) {
    const ViewSet v = make_views(im, cfg, spec, a, "img", &stats);
    const ViewSet w = make_views(im, cfg, spec, b);
    REQUIRE(v.global_views.size() == 2);
    REQUIRE(v.local_views.size() == 4);
    for (const auto& g : v.global_views) {
      CHECK(g.height == 32);
      CHECK(g.nonzero_fraction() >= 0.10);
    }
    for (const auto& l : v.local_views) {
      CHECK(l.width == 12);
      CHECK(l.nonzero_fraction() >= 0.10);
    }
    CHECK(v.global_views == w.global_views);
    CHECK(v.local_views == w.local_views);
    CHECK(v.source_id == "img");
  }
  CHECK(stats.crops == 300);
  CHECK_THROWS_AS(make_views(Image(20, 20), cfg, spec, a), DimensionError);
}
