#include "cfnet/pipeline/augment.hpp"

#include <algorithm>
#include <cmath>

#include "cfnet/pipeline/rng.hpp"

namespace cfnet::pipeline {

namespace {

void check_prob(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string("augment: ") + name + " must be in [0,1]");
}

void check_range(double lo, double hi, const char* name) {
  if (!(lo <= hi)) throw ConfigError(std::string("augment: ") + name + " range is empty");
}

void clip01(Image& img) {
  for (auto& v : img.pixels) v = std::clamp(v, 0.0f, 1.0f);
}

}  // namespace

void AugmentConfig::validate() const {
  check_prob(p_rot90, "p_rot90");
  check_prob(p_hflip, "p_hflip");
  check_prob(p_vflip, "p_vflip");
  check_prob(p_speckle, "p_speckle");
  check_prob(p_gamma, "p_gamma");
  check_prob(p_blur, "p_blur");
  check_prob(p_brightness, "p_brightness");
  check_prob(p_erase, "p_erase");
  check_range(speckle_var_min, speckle_var_max, "speckle variance");
  check_range(gamma_min, gamma_max, "gamma");
  check_range(blur_sigma_min, blur_sigma_max, "blur sigma");
  check_range(brightness_min, brightness_max, "brightness");
  check_range(contrast_min, contrast_max, "contrast");
  check_range(erase_area_min, erase_area_max, "erase area");
  check_range(erase_aspect_min, erase_aspect_max, "erase aspect");
  if (speckle_var_min < 0) throw ConfigError("augment: speckle variance must be non-negative");
  if (gamma_min <= 0) throw ConfigError("augment: gamma must be positive");
  if (blur_sigma_min < 0) throw ConfigError("augment: blur sigma must be non-negative");
  if (erase_area_min < 0 || erase_area_max > 1) throw ConfigError("augment: erase area must be within [0,1]");
  if (erase_aspect_min <= 0) throw ConfigError("augment: erase aspect must be positive");
}

AugmentConfig AugmentConfig::identity() {
  AugmentConfig c;
  c.p_rot90 = c.p_hflip = c.p_vflip = 0;
  c.p_speckle = c.p_gamma = c.p_blur = c.p_brightness = c.p_erase = 0;
  return c;
}

Image rotate90(const Image& img, int quarter_turns) {
  const int k = ((quarter_turns % 4) + 4) % 4;
  if (k == 0) return img;
  const std::size_t h = img.height, w = img.width;
  Image out = (k == 2) ? Image(h, w) : Image(w, h);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const float v = img.at(y, x);
      if (k == 1) out.at(w - 1 - x, y) = v;
      else if (k == 2) out.at(h - 1 - y, w - 1 - x) = v;
      else out.at(x, h - 1 - y) = v;
    }
  }
  return out;
}

Image flip_horizontal(const Image& img) {
  Image out(img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) out.at(y, img.width - 1 - x) = img.at(y, x);
  return out;
}

Image flip_vertical(const Image& img) {
  Image out(img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) out.at(img.height - 1 - y, x) = img.at(y, x);
  return out;
}

Image gaussian_blur(const Image& img, double sigma) {
  if (sigma <= 0) return img;
  const long r = std::max(1L, static_cast<long>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double sum = 0;
  for (long i = -r; i <= r; ++i) sum += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= sum;
  const long h = static_cast<long>(img.height), w = static_cast<long>(img.width);
  auto clampi = [](long v, long n) { return std::clamp(v, 0L, n - 1); };
  Image tmp(img.height, img.width), out(img.height, img.width);
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      double acc = 0;
      for (long i = -r; i <= r; ++i) acc += k[static_cast<std::size_t>(i + r)] * img.pixels[static_cast<std::size_t>(y * w + clampi(x + i, w))];
      tmp.pixels[static_cast<std::size_t>(y * w + x)] = static_cast<float>(acc);
    }
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      double acc = 0;
      for (long i = -r; i <= r; ++i) acc += k[static_cast<std::size_t>(i + r)] * tmp.pixels[static_cast<std::size_t>(clampi(y + i, h) * w + x)];
      out.pixels[static_cast<std::size_t>(y * w + x)] = static_cast<float>(acc);
    }
  return out;
}

std::size_t erase_rect(Image& img, double area_frac, double aspect, float fill, std::mt19937_64& rng) {
  const double H = static_cast<double>(img.height), W = static_cast<double>(img.width);
  const double area = area_frac * H * W;
  if (area <= 0 || img.pixels.empty()) return 0;
  auto eh = static_cast<std::size_t>(std::clamp(std::round(std::sqrt(area / aspect)), 1.0, H));
  auto ew = static_cast<std::size_t>(std::clamp(std::round(area / static_cast<double>(eh)), 1.0, W));
  if (ew == img.width) eh = static_cast<std::size_t>(std::clamp(std::round(area / W), 1.0, H));
  const std::size_t y0 = below(rng, img.height - eh + 1), x0 = below(rng, img.width - ew + 1);
  for (std::size_t y = y0; y < y0 + eh; ++y)
    for (std::size_t x = x0; x < x0 + ew; ++x) img.at(y, x) = fill;
  return eh * ew;
}

AugmentSample augment(AugmentSample s, const AugmentConfig& cfg, std::mt19937_64& rng) {
  const bool rot = bernoulli(rng, cfg.p_rot90);
  const int turns = static_cast<int>(below(rng, 4));
  const bool hf = bernoulli(rng, cfg.p_hflip), vf = bernoulli(rng, cfg.p_vflip);
  const bool speckle = bernoulli(rng, cfg.p_speckle);
  const double speckle_var = uniform(rng, cfg.speckle_var_min, cfg.speckle_var_max);
  const std::uint64_t speckle_seed = rng();
  const bool gam = bernoulli(rng, cfg.p_gamma);
  const double gamma = uniform(rng, cfg.gamma_min, cfg.gamma_max);
  const bool blur = bernoulli(rng, cfg.p_blur);
  const double sigma = uniform(rng, cfg.blur_sigma_min, cfg.blur_sigma_max);
  const bool bc = bernoulli(rng, cfg.p_brightness);
  const double brightness = uniform(rng, cfg.brightness_min, cfg.brightness_max);
  const double contrast = uniform(rng, cfg.contrast_min, cfg.contrast_max);
  const bool erase = bernoulli(rng, cfg.p_erase);
  const double area = uniform(rng, cfg.erase_area_min, cfg.erase_area_max);
  const double aspect = std::exp(uniform(rng, std::log(cfg.erase_aspect_min), std::log(cfg.erase_aspect_max)));
  const std::uint64_t erase_seed = rng();

  auto geometry = [&](Image& img) {
    if (rot) img = rotate90(img, turns);
    if (hf) img = flip_horizontal(img);
    if (vf) img = flip_vertical(img);
  };
  geometry(s.x1bit);
  geometry(s.x16bit);
  if (s.aux) geometry(*s.aux);

  Image& x = s.x1bit;
  if (speckle) {
    std::mt19937_64 nrng(speckle_seed);
    const double sd = std::sqrt(speckle_var);
    for (auto& v : x.pixels) v = static_cast<float>(v * (1.0 + sd * normal(nrng)));
    clip01(x);
  }
  if (gam) {
    for (auto& v : x.pixels) v = static_cast<float>(std::pow(std::max(v, 0.0f), gamma));
  }
  if (blur) x = gaussian_blur(x, sigma);
  if (bc) {
    for (auto& v : x.pixels) v = static_cast<float>((v - 0.5) * contrast + 0.5 + brightness);
  }
  clip01(x);
  if (erase) {
    std::mt19937_64 erng(erase_seed);
    erase_rect(x, area, aspect, cfg.erase_fill, erng);
  }
  clip01(x);
  clip01(s.x16bit);
  if (s.aux) clip01(*s.aux);
  return s;
}

}  // namespace cfnet::pipeline
