#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "osteo/diffcore/tensor.hpp"

namespace osteo::dataio {

/// Single-channel raster, row-major, intensities nominally in [0,1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), pixels(h * w, fill) {}

  double& at(std::size_t r, std::size_t c) { return pixels[r * width + c]; }
  double at(std::size_t r, std::size_t c) const { return pixels[r * width + c]; }
  std::size_t size() const { return pixels.size(); }
  bool empty() const { return pixels.empty(); }

  /// Fraction of pixels that are not exactly zero.
  double nonzero_fraction() const;
  /// As a [1,H,W] tensor.
  diffcore::Tensor to_tensor() const;

  bool operator==(const Image&) const = default;
};

/// Per-pixel class indices, 0 = background.
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> labels;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), labels(h * w, fill) {}

  std::uint8_t& at(std::size_t r, std::size_t c) { return labels[r * width + c]; }
  std::uint8_t at(std::size_t r, std::size_t c) const { return labels[r * width + c]; }
  std::size_t size() const { return labels.size(); }

  bool operator==(const LabelMap&) const = default;
};

/// Bilinear resampling to the requested size (pixel-centre aligned).
Image resize_bilinear(const Image& src, std::size_t height, std::size_t width);

/// `src` placed at the centre of a zero canvas; larger sources are first
/// shrunk to fit, preserving aspect ratio.
Image fit_to_canvas(const Image& src, std::size_t side);

/// Centre crop (or zero pad) to `side` x `side`.
Image center_crop(const Image& src, std::size_t side);

}  // namespace osteo::dataio
