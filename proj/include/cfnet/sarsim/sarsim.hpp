#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

#include "cfnet/errors.hpp"

// Stripmap SAR echo simulation and Range-Doppler image formation.
//
// Geometry: broadside, stop-and-go, baseband echoes, no antenna pattern and no
// thermal noise. Matrices are stored range-major: element (r, a) is range bin r
// of azimuth pulse a. A reflectivity map pixel (jj, ii) sits at range offset
// (jj - H/2) * range_spacing and azimuth offset (ii - W/2) * azimuth_spacing
// from the scene centre, and is imaged at bin (N_range/2 + jj - H/2,
// N_azimuth/2 + ii - W/2).
namespace cfnet::sar {

struct RadarParams {
  double wavelength = 0.055;        // m
  double chirp_rate = 5e10;         // Hz/s
  double pulse_duration = 30e-6;    // s
  double sample_rate = 2e6;         // Hz
  double prf = 0.0;                 // Hz; 0 selects sqrt(Ka * N_azimuth)
  double velocity = 150.0;          // m/s
  double ref_range = 10e3;          // m
  double range_spacing = 0.0;       // m; 0 selects c / (2 fs)
  double azimuth_spacing = 0.0;     // m; 0 selects v / prf
  std::size_t n_range = 64;
  std::size_t n_azimuth = 64;
  double light_speed = 299792458.0;  // m/s
  bool migration = true;            // false: v -> infinity limit, RCMC shift is zero

  void validate() const;

  double azimuth_rate(double range) const;  // Ka = 2 v^2 / (lambda R)
  double effective_prf() const;
  double effective_range_spacing() const;
  double effective_azimuth_spacing() const;
  double bin_spacing() const { return light_speed / (2.0 * sample_rate); }
  // Slant range of range bin r.
  double bin_range(std::size_t r) const;
  std::size_t pulse_samples() const;
};

class ComplexMatrix {
 public:
  using value_type = std::complex<float>;

  ComplexMatrix() = default;
  ComplexMatrix(std::size_t n_range, std::size_t n_azimuth);

  std::size_t n_range() const { return nr_; }
  std::size_t n_azimuth() const { return na_; }
  std::size_t size() const { return v_.size(); }

  value_type& at(std::size_t r, std::size_t a) { return v_[r * na_ + a]; }
  const value_type& at(std::size_t r, std::size_t a) const { return v_[r * na_ + a]; }
  std::span<value_type> values() { return v_; }
  std::span<const value_type> values() const { return v_; }

 private:
  std::size_t nr_ = 0, na_ = 0;
  std::vector<value_type> v_;
};

// Row-major real image, values nominally in [0, 1].
struct Image {
  std::size_t height = 0, width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, float fill = 0.0f) : height(h), width(w), pixels(h * w, fill) {}
  float& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
  float at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
};

using ReflectivityMap = Image;

struct ImagePair {
  Image img_16bit;
  Image img_1bit;
};

// Exact nested-loop superposition of delayed LFM echoes.
ComplexMatrix simulate_echo(const ReflectivityMap& psf, const RadarParams& params);

// sign(Re) + i sign(Im) with sign(0) = +1 (also for -0).
ComplexMatrix quantize_1bit(const ComplexMatrix& echo);

// Circular matched filter along range for every azimuth column.
ComplexMatrix range_compress(const ComplexMatrix& echo, const RadarParams& params);

// Azimuth FFT followed by range cell migration correction. The result stays in
// the range-Doppler domain.
ComplexMatrix rcmc(const ComplexMatrix& rc, const RadarParams& params);

// Azimuth matched filtering of a range-Doppler matrix; complex output.
ComplexMatrix azimuth_focus(const ComplexMatrix& rcmc_out, const RadarParams& params);

// |azimuth_focus| normalised by its maximum (all-zero input stays zero).
Image azimuth_compress(const ComplexMatrix& rcmc_out, const RadarParams& params);

// Complex full chain: range_compress -> rcmc -> azimuth_focus. Linear in echo.
ComplexMatrix rda(const ComplexMatrix& echo, const RadarParams& params);

ImagePair generate_pair(const ReflectivityMap& target, const RadarParams& params);

// Reference chirp sampled on the circular range grid, centred at bin 0.
std::vector<std::complex<float>> reference_chirp(const RadarParams& params);

// out[j] = 8-tap normalised truncated-sinc (Lanczos window) interpolation of line at j + shift[j]
// (circular). Integer shifts reduce to exact circular shifts.
void shift_line(std::span<const std::complex<float>> line, std::span<const double> shift,
                std::span<std::complex<float>> out);

// Range migration in range samples at Doppler frequency fd for range bin r.
double migration_samples(const RadarParams& params, double fd, std::size_t r);

}  // namespace cfnet::sar
