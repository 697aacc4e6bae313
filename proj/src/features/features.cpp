#include "cfnet/features/features.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace cfnet::features {

void HogConfig::validate() const {
  if (cell == 0) throw ConfigError("hog: cell size must be >= 1");
  if (bins < 2) throw ConfigError("hog: bins must be >= 2");
  if (block == 0 || block_stride == 0) throw ConfigError("hog: block and stride must be >= 1");
  if (!(clip > 0) || !(eps > 0)) throw ConfigError("hog: clip and eps must be > 0");
}

std::size_t HogConfig::descriptor_length(std::size_t height, std::size_t width) const {
  validate();
  if (height == 0 || width == 0 || height % cell || width % cell) {
    throw ShapeError("hog: image " + std::to_string(height) + "x" + std::to_string(width) +
                     " not divisible by cell size " + std::to_string(cell));
  }
  const std::size_t cy = height / cell, cx = width / cell;
  if (cy < block || cx < block) throw ShapeError("hog: image smaller than one block");
  const std::size_t by = (cy - block) / block_stride + 1, bx = (cx - block) / block_stride + 1;
  return by * bx * block * block * bins;
}

std::vector<float> hog_extract(std::span<const float> image, std::size_t height, std::size_t width,
                               const HogConfig& cfg) {
  const std::size_t len = cfg.descriptor_length(height, width);
  if (image.size() != height * width) throw ShapeError("hog: pixel count does not match dims");

  const std::size_t ncy = height / cfg.cell, ncx = width / cfg.cell;
  const double bin_width = 180.0 / static_cast<double>(cfg.bins);
  std::vector<double> hist(ncy * ncx * cfg.bins, 0.0);
  auto px = [&](long y, long x) {
    y = std::clamp(y, 0L, static_cast<long>(height) - 1);
    x = std::clamp(x, 0L, static_cast<long>(width) - 1);
    return static_cast<double>(image[static_cast<std::size_t>(y) * width + static_cast<std::size_t>(x)]);
  };

  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const long ly = static_cast<long>(y), lx = static_cast<long>(x);
      const double gx = px(ly, lx + 1) - px(ly, lx - 1);
      const double gy = px(ly + 1, lx) - px(ly - 1, lx);
      const double mag = std::hypot(gx, gy);
      if (mag == 0.0) continue;
      double deg = std::atan2(gy, gx) * 180.0 / std::numbers::pi;
      deg = std::fmod(deg, 180.0);
      if (deg < 0) deg += 180.0;
      if (deg >= 180.0) deg -= 180.0;
      const double pos = deg / bin_width;
      const double lo = std::floor(pos);
      const double frac = pos - lo;
      const std::size_t b0 = static_cast<std::size_t>(lo) % cfg.bins;
      const std::size_t b1 = (b0 + 1) % cfg.bins;
      double* h = &hist[((y / cfg.cell) * ncx + x / cfg.cell) * cfg.bins];
      h[b0] += mag * (1.0 - frac);
      h[b1] += mag * frac;
    }
  }

  std::vector<float> out;
  out.reserve(len);
  const std::size_t blen = cfg.block * cfg.block * cfg.bins;
  std::vector<double> v(blen);
  for (std::size_t by = 0; by + cfg.block <= ncy; by += cfg.block_stride) {
    for (std::size_t bx = 0; bx + cfg.block <= ncx; bx += cfg.block_stride) {
      std::size_t k = 0;
      for (std::size_t cy = by; cy < by + cfg.block; ++cy)
        for (std::size_t cx = bx; cx < bx + cfg.block; ++cx)
          for (std::size_t b = 0; b < cfg.bins; ++b) v[k++] = hist[(cy * ncx + cx) * cfg.bins + b];
      // L2-Hys: normalise, clip, renormalise.
      auto normalise = [&] {
        double ss = 0.0;
        for (double e : v) ss += e * e;
        const double inv = 1.0 / std::sqrt(ss + cfg.eps * cfg.eps);
        for (double& e : v) e *= inv;
      };
      normalise();
      for (double& e : v) e = std::min(e, cfg.clip);
      normalise();
      for (double e : v) out.push_back(static_cast<float>(e));
    }
  }
  return out;
}

std::vector<float> har_aggregate(const RadarCube& cube) {
  if (cube.channels == 0 || cube.frames == 0 || cube.height == 0 || cube.width == 0) {
    throw ShapeError("har_aggregate: every cube dimension must be >= 1");
  }
  const std::size_t plane = cube.height * cube.width, n = cube.channels * cube.frames;
  if (cube.values.size() != n * plane) throw ShapeError("har_aggregate: value count does not match dims");
  std::vector<double> acc(plane, 0.0);
  for (std::size_t f = 0; f < n; ++f) {
    const float* src = cube.values.data() + f * plane;
    for (std::size_t i = 0; i < plane; ++i) acc[i] += src[i];
  }
  std::vector<float> out(plane);
  for (std::size_t i = 0; i < plane; ++i) out[i] = static_cast<float>(acc[i] / static_cast<double>(n));
  return out;
}

}  // namespace cfnet::features
