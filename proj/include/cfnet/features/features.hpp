#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cfnet/errors.hpp"

namespace cfnet::features {

// Dalal-Triggs HOG. Orientation convention: bins index the *gradient*
// direction, unsigned, with bin b centred at b * 180/bins degrees. Gradients are
// [-1, 0, 1] central differences with replicated borders, x to the right and y
// down, so a horizontal ramp I(x, y) = x / W votes entirely into bin 0.
struct HogConfig {
  std::size_t cell = 8;
  std::size_t bins = 9;
  std::size_t block = 2;         // cells per block side
  std::size_t block_stride = 1;  // in cells
  double clip = 0.2;
  double eps = 1e-6;

  void validate() const;
  std::size_t descriptor_length(std::size_t height, std::size_t width) const;
};

// Row-major image; returns blocks in row-major order, each block as its cells in
// row-major order, each cell as `bins` values.
std::vector<float> hog_extract(std::span<const float> image, std::size_t height, std::size_t width,
                               const HogConfig& cfg = {});

struct RadarCube {
  std::size_t channels = 0, frames = 0, height = 0, width = 0;
  std::vector<float> values;  // [C, T, H, W] row-major

  RadarCube() = default;
  RadarCube(std::size_t c, std::size_t t, std::size_t h, std::size_t w, float fill = 0.0f)
      : channels(c), frames(t), height(h), width(w), values(c * t * h * w, fill) {}
};

// Mean over channels and frames: [C, T, H, W] -> [H, W].
std::vector<float> har_aggregate(const RadarCube& cube);

}  // namespace cfnet::features
