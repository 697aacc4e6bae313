#pragma once

#include <cstddef>
#include <optional>
#include <random>

#include "cfnet/pipeline/manifest.hpp"

namespace cfnet::pipeline {

struct AugmentConfig {
  // geometric, applied to every image of a sample
  double p_rot90 = 1.0;  // rotate by a uniformly drawn multiple of 90 degrees
  double p_hflip = 0.5;
  double p_vflip = 0.5;
  // photometric, 1-bit stream only
  double p_speckle = 0.3;
  double speckle_var_min = 0.0, speckle_var_max = 0.05;
  double p_gamma = 0.3;
  double gamma_min = 0.7, gamma_max = 1.4;
  double p_blur = 0.2;
  double blur_sigma_min = 0.3, blur_sigma_max = 1.0;
  double p_brightness = 0.3;
  double brightness_min = -0.1, brightness_max = 0.1;
  double contrast_min = 0.8, contrast_max = 1.2;
  double p_erase = 0.3;
  double erase_area_min = 0.02, erase_area_max = 0.15;
  double erase_aspect_min = 0.3, erase_aspect_max = 3.3;
  float erase_fill = 0.0f;

  std::size_t oversample_target = 800;  // per class per epoch; 0 = every sample once
  bool oversample_pretrain = true;
  bool oversample_finetune = true;
  bool allow_undersample = false;  // classes above the target are subsampled instead of rejected

  void validate() const;
  // Every probability zero.
  static AugmentConfig identity();
};

struct AugmentSample {
  Image x1bit, x16bit;
  std::optional<Image> aux;  // follows the geometry only (e.g. the HOG source image)
};

Image rotate90(const Image& img, int quarter_turns);  // counter-clockwise
Image flip_horizontal(const Image& img);
Image flip_vertical(const Image& img);
Image gaussian_blur(const Image& img, double sigma);

// Fills an area_frac * H * W rectangle of the given aspect (width / height)
// at a random position; returns the number of pixels set.
std::size_t erase_rect(Image& img, double area_frac, double aspect, float fill, std::mt19937_64& rng);

// Draws every decision from rng in a fixed order; outputs clipped to [0, 1].
AugmentSample augment(AugmentSample s, const AugmentConfig& cfg, std::mt19937_64& rng);

}  // namespace cfnet::pipeline
