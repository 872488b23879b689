#include "osteo/dataio/image.hpp"

#include <algorithm>
#include <cmath>

#include "osteo/diffcore/errors.hpp"

namespace osteo::dataio {

double Image::nonzero_fraction() const {
  if (pixels.empty()) return 0.0;
  const auto nz = std::count_if(pixels.begin(), pixels.end(), [](double v) { return v != 0.0; });
  return static_cast<double>(nz) / static_cast<double>(pixels.size());
}

diffcore::Tensor Image::to_tensor() const { return diffcore::Tensor({1, height, width}, pixels); }

Image resize_bilinear(const Image& src, std::size_t height, std::size_t width) {
  if (src.empty() || height == 0 || width == 0) throw DimensionError("resize of empty image");
  if (src.height == height && src.width == width) return src;
  Image out(height, width);
  const double sy = static_cast<double>(src.height) / static_cast<double>(height);
  const double sx = static_cast<double>(src.width) / static_cast<double>(width);
  for (std::size_t r = 0; r < height; ++r) {
    const double fy = std::clamp((static_cast<double>(r) + 0.5) * sy - 0.5, 0.0,
                                 static_cast<double>(src.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t c = 0; c < width; ++c) {
      const double fx = std::clamp((static_cast<double>(c) + 0.5) * sx - 0.5, 0.0,
                                   static_cast<double>(src.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - static_cast<double>(x0);
      out.at(r, c) = (1 - wy) * ((1 - wx) * src.at(y0, x0) + wx * src.at(y0, x1)) +
                     wy * ((1 - wx) * src.at(y1, x0) + wx * src.at(y1, x1));
    }
  }
  return out;
}

Image fit_to_canvas(const Image& src, std::size_t side) {
  Image img = src;
  if (img.height > side || img.width > side) {
    const double f = static_cast<double>(side) / static_cast<double>(std::max(img.height, img.width));
    const auto h = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(img.height * f)));
    const auto w = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(img.width * f)));
    img = resize_bilinear(img, h, w);
  }
  return center_crop(img, side);
}

Image center_crop(const Image& src, std::size_t side) {
  Image out(side, side);
  const long oy = (static_cast<long>(side) - static_cast<long>(src.height)) / 2;
  const long ox = (static_cast<long>(side) - static_cast<long>(src.width)) / 2;
  for (std::size_t r = 0; r < src.height; ++r) {
    const long tr = static_cast<long>(r) + oy;
    if (tr < 0 || tr >= static_cast<long>(side)) continue;
    for (std::size_t c = 0; c < src.width; ++c) {
      const long tc = static_cast<long>(c) + ox;
      if (tc < 0 || tc >= static_cast<long>(side)) continue;
      out.at(tr, tc) = src.at(r, c);
    }
  }
  return out;
}

}  // namespace osteo::dataio
