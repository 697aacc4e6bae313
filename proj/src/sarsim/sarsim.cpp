#include "cfnet/sarsim/sarsim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "cfnet/sarsim/fft.hpp"

namespace cfnet::sar {

namespace {

constexpr double kPi = std::numbers::pi;

bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

void check_dims(const ComplexMatrix& m, const RadarParams& p, const char* who) {
  if (m.n_range() != p.n_range || m.n_azimuth() != p.n_azimuth) {
    throw ShapeError(std::string(who) + ": matrix is " + std::to_string(m.n_range()) + "x" +
                     std::to_string(m.n_azimuth()) + ", params expect " + std::to_string(p.n_range) +
                     "x" + std::to_string(p.n_azimuth));
  }
}

// Signed circular frequency index of bin m.
double signed_bin(std::size_t m, std::size_t n) {
  return m < n / 2 ? static_cast<double>(m) : static_cast<double>(m) - static_cast<double>(n);
}

double sinc(double x) {
  if (x == 0.0) return 1.0;
  return std::sin(kPi * x) / (kPi * x);
}

}  // namespace

void RadarParams::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("radar: " + m); };
  if (!(wavelength > 0)) fail("wavelength must be > 0");
  if (!(pulse_duration > 0)) fail("pulse_duration must be > 0");
  if (!(sample_rate > 0)) fail("sample_rate must be > 0");
  if (!(velocity > 0)) fail("velocity must be > 0");
  if (!(ref_range > 0)) fail("ref_range must be > 0");
  if (!(light_speed > 0)) fail("light_speed must be > 0");
  if (!std::isfinite(chirp_rate) || chirp_rate == 0) fail("chirp_rate must be finite and nonzero");
  if (prf < 0 || range_spacing < 0 || azimuth_spacing < 0) fail("prf and spacings must be >= 0");
  if (sample_rate < std::abs(chirp_rate) * pulse_duration) {
    fail("sample_rate " + std::to_string(sample_rate) + " below chirp bandwidth " +
         std::to_string(std::abs(chirp_rate) * pulse_duration));
  }
  if (!is_pow2(n_range) || !is_pow2(n_azimuth)) fail("grid sizes must be powers of two");
  if (pulse_samples() >= n_range) fail("pulse longer than the range window");
  double half_swath = static_cast<double>(n_range / 2) * bin_spacing();
  if (half_swath >= ref_range) fail("range window reaches zero range");
}

double RadarParams::azimuth_rate(double range) const {
  return 2.0 * velocity * velocity / (wavelength * range);
}

double RadarParams::effective_prf() const {
  if (prf > 0) return prf;
  return std::sqrt(azimuth_rate(ref_range) * static_cast<double>(n_azimuth));
}

double RadarParams::effective_range_spacing() const {
  return range_spacing > 0 ? range_spacing : bin_spacing();
}

double RadarParams::effective_azimuth_spacing() const {
  return azimuth_spacing > 0 ? azimuth_spacing : velocity / effective_prf();
}

double RadarParams::bin_range(std::size_t r) const {
  return ref_range + (static_cast<double>(r) - static_cast<double>(n_range / 2)) * bin_spacing();
}

std::size_t RadarParams::pulse_samples() const {
  return static_cast<std::size_t>(std::llround(pulse_duration * sample_rate));
}

ComplexMatrix::ComplexMatrix(std::size_t n_range, std::size_t n_azimuth)
    : nr_(n_range), na_(n_azimuth), v_(n_range * n_azimuth) {}

ComplexMatrix simulate_echo(const ReflectivityMap& psf, const RadarParams& p) {
  p.validate();
  if (psf.pixels.size() != psf.height * psf.width) throw ShapeError("simulate_echo: malformed map");
  if (psf.height > p.n_range || psf.width > p.n_azimuth) {
    throw ValueError("simulate_echo: scene " + std::to_string(psf.height) + "x" +
                     std::to_string(psf.width) + " exceeds the unambiguous " +
                     std::to_string(p.n_range) + "x" + std::to_string(p.n_azimuth) + " window");
  }
  for (float v : psf.pixels) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ValueError("simulate_echo: reflectivity outside [0,1]");
  }

  const std::size_t nr = p.n_range, na = p.n_azimuth;
  const double c = p.light_speed, fs = p.sample_rate, prf = p.effective_prf();
  const double dr = p.effective_range_spacing(), da = p.effective_azimuth_spacing();
  const double t0 = 2.0 * p.ref_range / c;  // fast time of range bin nr/2
  const double half_tp = 0.5 * p.pulse_duration;
  const double k_phase = 4.0 * kPi / p.wavelength;

  std::vector<std::complex<double>> acc(nr * na);
  for (std::size_t jj = 0; jj < psf.height; ++jj) {
    const double rj = p.ref_range + dr * (static_cast<double>(jj) - static_cast<double>(psf.height / 2));
    for (std::size_t ii = 0; ii < psf.width; ++ii) {
      const double w = psf.at(jj, ii);
      if (w == 0.0) continue;
      const double xp = da * (static_cast<double>(ii) - static_cast<double>(psf.width / 2));
      for (std::size_t k = 0; k < na; ++k) {
        const double tk = (static_cast<double>(k) - static_cast<double>(na / 2)) / prf;
        const double dx = p.velocity * tk - xp;
        const double R = std::sqrt(rj * rj + dx * dx);
        const double delay = 2.0 * R / c;
        const double centre = static_cast<double>(nr / 2) + (delay - t0) * fs;
        if (centre < 0.0 || centre >= static_cast<double>(nr)) {
          throw ValueError("simulate_echo: scene exceeds the unambiguous range window");
        }
        const std::complex<double> carrier = std::polar(w, -k_phase * R);
        const auto lo = static_cast<long>(std::ceil(centre - half_tp * fs - 1.0));
        const auto hi = static_cast<long>(std::floor(centre + half_tp * fs + 1.0));
        for (long n = std::max(lo, 0L); n <= hi && n < static_cast<long>(nr); ++n) {
          const double tau = t0 + (static_cast<double>(n) - static_cast<double>(nr / 2)) / fs;
          const double dt = tau - delay;
          if (dt < -half_tp || dt >= half_tp) continue;
          acc[static_cast<std::size_t>(n) * na + k] += carrier * std::polar(1.0, kPi * p.chirp_rate * dt * dt);
        }
      }
    }
  }
  ComplexMatrix out(nr, na);
  auto o = out.values();
  for (std::size_t i = 0; i < acc.size(); ++i) o[i] = std::complex<float>(acc[i]);
  return out;
}

ComplexMatrix quantize_1bit(const ComplexMatrix& echo) {
  ComplexMatrix out(echo.n_range(), echo.n_azimuth());
  auto in = echo.values();
  auto o = out.values();
  for (std::size_t i = 0; i < in.size(); ++i) {
    o[i] = {in[i].real() >= 0.0f ? 1.0f : -1.0f, in[i].imag() >= 0.0f ? 1.0f : -1.0f};
  }
  return out;
}

std::vector<std::complex<float>> reference_chirp(const RadarParams& p) {
  const std::size_t n = p.n_range;
  const double fs = p.sample_rate, half_tp = 0.5 * p.pulse_duration;
  std::vector<std::complex<float>> h(n);
  const long half = static_cast<long>(n / 2);
  for (long m = -half; m < half; ++m) {
    const double t = static_cast<double>(m) / fs;
    if (t < -half_tp || t >= half_tp) continue;
    const std::size_t idx = static_cast<std::size_t>((m + static_cast<long>(n)) % static_cast<long>(n));
    h[idx] = std::complex<float>(std::polar(1.0, kPi * p.chirp_rate * t * t));
  }
  return h;
}

ComplexMatrix range_compress(const ComplexMatrix& echo, const RadarParams& p) {
  p.validate();
  check_dims(echo, p, "range_compress");
  const std::size_t nr = p.n_range, na = p.n_azimuth;
  auto h = reference_chirp(p);
  fft(h.data(), nr, false);
  ComplexMatrix out = echo;
  auto d = out.values();
  fft_many(d.data(), nr, na, na, 1, false);
  for (std::size_t r = 0; r < nr; ++r) {
    const auto hc = std::conj(h[r]);
    for (std::size_t a = 0; a < na; ++a) d[r * na + a] *= hc;
  }
  fft_many(d.data(), nr, na, na, 1, true);
  return out;
}

double migration_samples(const RadarParams& p, double fd, std::size_t r) {
  if (!p.migration) return 0.0;
  const double R = p.bin_range(r);
  const double dR = p.wavelength * p.wavelength * R * fd * fd / (8.0 * p.velocity * p.velocity);
  return dR / p.bin_spacing();
}

void shift_line(std::span<const std::complex<float>> line, std::span<const double> shift,
                std::span<std::complex<float>> out) {
  const std::size_t n = line.size();
  if (shift.size() != n || out.size() != n) throw ShapeError("shift_line: length mismatch");
  const long ln = static_cast<long>(n);
  auto wrap = [ln](long i) { return static_cast<std::size_t>(((i % ln) + ln) % ln); };
  for (std::size_t j = 0; j < n; ++j) {
    const double pos = static_cast<double>(j) + shift[j];
    const double base = std::floor(pos);
    const double frac = pos - base;
    const long b = static_cast<long>(base);
    if (frac == 0.0) {
      out[j] = line[wrap(b)];
      continue;
    }
    std::complex<double> acc = 0.0;
    double wsum = 0.0;
    for (long t = -3; t <= 4; ++t) {
      const double x = frac - static_cast<double>(t);
      const double w = sinc(x) * sinc(x / 4.0);  // Lanczos-windowed
      acc += w * std::complex<double>(line[wrap(b + t)]);
      wsum += w;
    }
    out[j] = std::complex<float>(acc / wsum);
  }
}

ComplexMatrix rcmc(const ComplexMatrix& rc, const RadarParams& p) {
  p.validate();
  check_dims(rc, p, "rcmc");
  const std::size_t nr = p.n_range, na = p.n_azimuth;
  const double prf = p.effective_prf();
  ComplexMatrix rd = rc;
  auto d = rd.values();
  fft_many(d.data(), na, nr, 1, na, false);
  if (!p.migration) return rd;

  const double limit = static_cast<double>(nr) / 4.0;
  ComplexMatrix out(nr, na);
  std::vector<std::complex<float>> col(nr), shifted(nr);
  std::vector<double> shift(nr);
  for (std::size_t m = 0; m < na; ++m) {
    const double fd = signed_bin(m, na) * prf / static_cast<double>(na);
    for (std::size_t r = 0; r < nr; ++r) {
      shift[r] = migration_samples(p, fd, r);
      if (shift[r] > limit) {
        throw ConfigError("rcmc: range migration of " + std::to_string(shift[r]) +
                          " samples exceeds N_range/4; scene and radar parameters are inconsistent");
      }
      col[r] = rd.at(r, m);
    }
    shift_line(col, shift, shifted);
    for (std::size_t r = 0; r < nr; ++r) out.at(r, m) = shifted[r];
  }
  return out;
}

ComplexMatrix azimuth_focus(const ComplexMatrix& rcmc_out, const RadarParams& p) {
  p.validate();
  check_dims(rcmc_out, p, "azimuth_focus");
  const std::size_t nr = p.n_range, na = p.n_azimuth;
  const double prf = p.effective_prf();
  ComplexMatrix out = rcmc_out;
  auto d = out.values();
  std::vector<std::complex<float>> h(na);
  const long half = static_cast<long>(na / 2);
  for (std::size_t r = 0; r < nr; ++r) {
    const double ka = p.azimuth_rate(p.bin_range(r));
    std::fill(h.begin(), h.end(), std::complex<float>{});
    for (long m = -half; m < half; ++m) {
      const double t = static_cast<double>(m) / prf;
      const std::size_t idx = static_cast<std::size_t>((m + static_cast<long>(na)) % static_cast<long>(na));
      h[idx] = std::complex<float>(std::polar(1.0, -kPi * ka * t * t));
    }
    fft(h.data(), na, false);
    for (std::size_t a = 0; a < na; ++a) d[r * na + a] *= std::conj(h[a]);
  }
  fft_many(d.data(), na, nr, 1, na, true);
  return out;
}

Image azimuth_compress(const ComplexMatrix& rcmc_out, const RadarParams& p) {
  ComplexMatrix f = azimuth_focus(rcmc_out, p);
  Image img(p.n_range, p.n_azimuth);
  auto v = f.values();
  float mx = 0.0f;
  for (std::size_t i = 0; i < v.size(); ++i) {
    img.pixels[i] = std::abs(v[i]);
    mx = std::max(mx, img.pixels[i]);
  }
  if (mx > 0.0f) {
    for (auto& x : img.pixels) x = std::min(1.0f, x / mx);
  }
  return img;
}

ComplexMatrix rda(const ComplexMatrix& echo, const RadarParams& p) {
  return azimuth_focus(rcmc(range_compress(echo, p), p), p);
}

ImagePair generate_pair(const ReflectivityMap& target, const RadarParams& p) {
  ComplexMatrix e = simulate_echo(target, p);
  ImagePair out;
  out.img_16bit = azimuth_compress(rcmc(range_compress(e, p), p), p);
  const auto ev = e.values();
  if (std::all_of(ev.begin(), ev.end(), [](auto z) { return z == std::complex<float>{}; })) {
    // No echo reaches the receiver, so there is nothing to quantize.
    out.img_1bit = Image(p.n_range, p.n_azimuth);
    return out;
  }
  out.img_1bit = azimuth_compress(rcmc(range_compress(quantize_1bit(e), p), p), p);
  return out;
}

}  // namespace cfnet::sar
