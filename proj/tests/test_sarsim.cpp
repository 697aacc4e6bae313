#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "cfnet/sarsim/fft.hpp"
#include "cfnet/sarsim/sarsim.hpp"

using namespace cfnet;
using namespace cfnet::sar;
using cf = std::complex<float>;
using cd = std::complex<double>;

namespace {

constexpr double kPi = std::numbers::pi;

double rel_frob(std::span<const cf> a, std::span<const cf> b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += std::norm(cd(a[i]) - cd(b[i]));
    den += std::norm(cd(b[i]));
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-30);
}

std::pair<std::size_t, std::size_t> argmax(const Image& img) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < img.pixels.size(); ++i)
    if (img.pixels[i] > img.pixels[best]) best = i;
  return {best / img.width, best % img.width};
}

ReflectivityMap point_map(const RadarParams& p, std::size_t r, std::size_t a, float w = 1.0f) {
  ReflectivityMap m(p.n_range, p.n_azimuth);
  m.at(r, a) = w;
  return m;
}

ComplexMatrix random_matrix(std::size_t nr, std::size_t na, std::mt19937_64& rng) {
  std::normal_distribution<float> d;
  ComplexMatrix m(nr, na);
  for (auto& z : m.values()) z = {d(rng), d(rng)};
  return m;
}

double psnr(const Image& a, const Image& b) {
  double mse = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    double d = a.pixels[i] - b.pixels[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.pixels.size());
  return mse == 0 ? INFINITY : 10 * std::log10(1.0 / mse);
}

}  // namespace

TEST_CASE("radar parameter validation") {
  RadarParams p;
  CHECK_NOTHROW(p.validate());
  CHECK(p.pulse_samples() == 60);
  CHECK(p.bin_spacing() == doctest::Approx(74.9481).epsilon(1e-5));

  auto bad = p;
  bad.n_range = 48;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = p;
  bad.sample_rate = 1e6;  // below 1.5 MHz bandwidth
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = p;
  bad.velocity = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = p;
  bad.pulse_duration = -1e-6;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("fft round trip and DFT agreement") {
  std::mt19937_64 rng(3);
  std::normal_distribution<float> d;
  std::vector<cf> x(32);
  for (auto& z : x) z = {d(rng), d(rng)};
  auto y = x;
  fft(y.data(), y.size(), false);
  for (std::size_t k = 0; k < x.size(); ++k) {
    cd acc = 0;
    for (std::size_t n = 0; n < x.size(); ++n)
      acc += cd(x[n]) * std::polar(1.0, -2 * kPi * double(k * n) / double(x.size()));
    CHECK(std::abs(acc - cd(y[k])) < 1e-4);
  }
  fft(y.data(), y.size(), true);
  CHECK(rel_frob(y, x) < 1e-6);
}

TEST_CASE("quantize_1bit") {
  ComplexMatrix m(2, 2);
  m.at(0, 0) = {0.3f, -2.1f};
  m.at(0, 1) = {0.0f, -0.0f};
  m.at(1, 0) = {-1e-30f, 5.0f};
  m.at(1, 1) = {-4.0f, -4.0f};
  auto q = quantize_1bit(m);
  CHECK(q.at(0, 0) == cf(1, -1));
  CHECK(q.at(0, 1) == cf(1, 1));
  CHECK(q.at(1, 0) == cf(-1, 1));
  CHECK(q.at(1, 1) == cf(-1, -1));

  std::mt19937_64 rng(5);
  auto r = random_matrix(16, 8, rng);
  auto q1 = quantize_1bit(r);
  auto q2 = quantize_1bit(q1);
  CHECK(std::equal(q1.values().begin(), q1.values().end(), q2.values().begin()));
  double energy = 0;
  for (auto z : q1.values()) energy += std::norm(z);
  CHECK(energy == 2.0 * 16 * 8);
}

TEST_CASE("simulate_echo") {
  RadarParams p;
  SUBCASE("zero map gives zero echo") {
    auto e = simulate_echo(ReflectivityMap(p.n_range, p.n_azimuth), p);
    for (auto z : e.values()) CHECK(z == cf{});
  }
  SUBCASE("superposition") {
    const double a = 0.7, b = 0.25;
    auto e1 = simulate_echo(point_map(p, 20, 30), p);
    auto e2 = simulate_echo(point_map(p, 41, 12), p);
    ReflectivityMap both(p.n_range, p.n_azimuth);
    both.at(20, 30) = float(a);
    both.at(41, 12) = float(b);
    auto e = simulate_echo(both, p);
    std::vector<cf> expect(e.size());
    for (std::size_t i = 0; i < expect.size(); ++i)
      expect[i] = cf(a * cd(e1.values()[i]) + b * cd(e2.values()[i]));
    CHECK(rel_frob(e.values(), expect) < 1e-6);
  }
  SUBCASE("centre point envelope is 1 inside the pulse support") {
    auto e = simulate_echo(point_map(p, p.n_range / 2, p.n_azimuth / 2), p);
    const double prf = p.effective_prf();
    int inside_total = 0;
    for (std::size_t k = 0; k < p.n_azimuth; ++k) {
      double t = (double(k) - double(p.n_azimuth / 2)) / prf;
      double R = std::hypot(p.ref_range, p.velocity * t);
      double delay = 2 * R / p.light_speed;
      for (std::size_t n = 0; n < p.n_range; ++n) {
        double tau = 2 * p.ref_range / p.light_speed + (double(n) - double(p.n_range / 2)) / p.sample_rate;
        double dt = tau - delay;
        bool inside = dt >= -p.pulse_duration / 2 && dt < p.pulse_duration / 2;
        inside_total += inside;
        CHECK(std::abs(e.at(n, k)) == doctest::Approx(inside ? 1.0 : 0.0).epsilon(1e-5));
      }
    }
    CHECK(std::abs(inside_total - int(p.n_azimuth * p.pulse_samples())) <= int(p.n_azimuth));
  }
  SUBCASE("errors") {
    ReflectivityMap big(p.n_range * 2, p.n_azimuth);
    CHECK_THROWS_AS(simulate_echo(big, p), ValueError);
    ReflectivityMap m(4, 4);
    m.at(0, 0) = 1.5f;
    CHECK_THROWS_AS(simulate_echo(m, p), ValueError);
  }
}

TEST_CASE("range_compress") {
  RadarParams p;
  const std::size_t nr = p.n_range, na = p.n_azimuth;
  SUBCASE("reference chirp compresses to its sample count at zero delay") {
    auto h = reference_chirp(p);
    ComplexMatrix m(nr, na);
    for (std::size_t r = 0; r < nr; ++r) m.at(r, 5) = h[r];
    auto rc = range_compress(m, p);
    std::size_t best = 0;
    for (std::size_t r = 0; r < nr; ++r)
      if (std::abs(rc.at(r, 5)) > std::abs(rc.at(best, 5))) best = r;
    CHECK(best == 0);
    CHECK(std::abs(rc.at(0, 5)) == doctest::Approx(double(p.pulse_samples())).epsilon(1e-4));
    for (std::size_t r = 0; r < nr; ++r) CHECK(std::abs(rc.at(r, 4)) == 0.0f);
  }
  SUBCASE("matches direct circular correlation") {
    std::mt19937_64 rng(11);
    auto m = random_matrix(nr, na, rng);
    auto h = reference_chirp(p);
    std::vector<cf> direct(nr * na);
    for (std::size_t a = 0; a < na; ++a)
      for (std::size_t r = 0; r < nr; ++r) {
        cd acc = 0;
        for (std::size_t n = 0; n < nr; ++n) acc += cd(m.at((r + n) % nr, a)) * std::conj(cd(h[n]));
        direct[r * na + a] = cf(acc);
      }
    auto rc = range_compress(m, p);
    CHECK(rel_frob(rc.values(), direct) < 1e-3);
  }
  SUBCASE("zero in, zero out") {
    auto rc = range_compress(ComplexMatrix(nr, na), p);
    for (auto z : rc.values()) CHECK(z == cf{});
  }
  SUBCASE("-3 dB mainlobe width") {
    auto h = reference_chirp(p);
    ComplexMatrix m(nr, na);
    for (std::size_t r = 0; r < nr; ++r) m.at(r, 0) = h[r];
    auto rc = range_compress(m, p);
    // 32x band-limited upsampling of one column by spectral zero padding.
    const std::size_t up = 32, nu = nr * up;
    std::vector<cf> col(nr), wide(nu);
    for (std::size_t r = 0; r < nr; ++r) col[r] = rc.at(r, 0);
    fft(col.data(), nr, false);
    for (std::size_t k = 0; k < nr / 2; ++k) {
      wide[k] = col[k];
      wide[nu - nr / 2 + k] = col[nr / 2 + k];
    }
    fft(wide.data(), nu, true);
    double peak = 0;
    for (auto z : wide) peak = std::max(peak, double(std::norm(z)));
    std::size_t above = 0;
    for (auto z : wide) above += std::norm(z) >= 0.5 * peak;
    double width = double(above) / up;
    double expect = p.sample_rate / (std::abs(p.chirp_rate) * p.pulse_duration);
    CHECK(std::abs(width - expect) <= 1.0);
  }
}

TEST_CASE("rcmc") {
  RadarParams p;
  const std::size_t nr = p.n_range, na = p.n_azimuth;
  std::mt19937_64 rng(17);
  SUBCASE("zero migration equals the azimuth DFT") {
    auto q = p;
    q.migration = false;
    auto m = random_matrix(nr, na, rng);
    auto out = rcmc(m, q);
    std::vector<cf> expect(nr * na);
    for (std::size_t r = 0; r < nr; ++r)
      for (std::size_t k = 0; k < na; ++k) {
        cd acc = 0;
        for (std::size_t n = 0; n < na; ++n)
          acc += cd(m.at(r, n)) * std::polar(1.0, -2 * kPi * double(k * n) / double(na));
        expect[r * na + k] = cf(acc);
      }
    CHECK(rel_frob(out.values(), expect) < 1e-5);
  }
  SUBCASE("integer shift is an exact circular shift") {
    std::vector<cf> line(16), out(16);
    for (std::size_t i = 0; i < 16; ++i) line[i] = {float(i), float(-2.0 * i)};
    for (double s : {0.0, 3.0, -5.0, 19.0}) {
      std::vector<double> sh(16, s);
      shift_line(line, sh, out);
      for (long j = 0; j < 16; ++j) CHECK(out[j] == line[((j + long(s)) % 16 + 16) % 16]);
    }
  }
  SUBCASE("half-sample shift of a sinusoid follows the phase ramp") {
    const std::size_t n = 64;
    const double f = 3.0 / 64.0;
    std::vector<cf> line(n), out(n), expect(n);
    for (std::size_t j = 0; j < n; ++j) {
      line[j] = cf(std::polar(1.0, 2 * kPi * f * double(j)));
      expect[j] = cf(std::polar(1.0, 2 * kPi * f * (double(j) + 0.5)));
    }
    std::vector<double> sh(n, 0.5);
    shift_line(line, sh, out);
    CHECK(rel_frob(out, expect) < 1e-2);
  }
  SUBCASE("migration beyond a quarter window is rejected") {
    auto q = p;
    q.prf = 2000;
    q.velocity = 10;
    CHECK_THROWS_AS(rcmc(ComplexMatrix(nr, na), q), ConfigError);
  }
  SUBCASE("default migration is a sub-sample correction") {
    double fd = p.effective_prf() / 2;
    double s = migration_samples(p, fd, nr - 1);
    CHECK(s > 0);
    CHECK(s < 1);
  }
}

TEST_CASE("azimuth_compress and the full chain") {
  RadarParams p;
  const std::size_t nr = p.n_range, na = p.n_azimuth;
  SUBCASE("zero input gives a zero image") {
    auto img = azimuth_compress(ComplexMatrix(nr, na), p);
    for (float v : img.pixels) CHECK(v == 0.0f);
  }
  SUBCASE("normalised output") {
    std::mt19937_64 rng(23);
    auto img = azimuth_compress(random_matrix(nr, na, rng), p);
    float mx = 0;
    for (float v : img.pixels) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
      mx = std::max(mx, v);
    }
    CHECK(mx == 1.0f);
  }
  SUBCASE("point targets focus at their scene position") {
    for (std::size_t r : {16u, 32u, 48u})
      for (std::size_t a : {16u, 32u, 48u}) {
        CAPTURE(r);
        CAPTURE(a);
        auto pair = generate_pair(point_map(p, r, a), p);
        auto [pr, pa] = argmax(pair.img_16bit);
        CHECK(std::abs(long(pr) - long(r)) <= 1);
        CHECK(std::abs(long(pa) - long(a)) <= 1);
        auto [qr, qa] = argmax(pair.img_1bit);
        CHECK(std::abs(long(qr) - long(pr)) <= 1);
        CHECK(std::abs(long(qa) - long(pa)) <= 1);
      }
  }
  SUBCASE("linearity before detection") {
    std::mt19937_64 rng(29);
    auto e1 = random_matrix(nr, na, rng);
    auto e2 = random_matrix(nr, na, rng);
    const double a = 1.3, b = -0.4;
    ComplexMatrix mix(nr, na);
    for (std::size_t i = 0; i < mix.size(); ++i)
      mix.values()[i] = cf(a * cd(e1.values()[i]) + b * cd(e2.values()[i]));
    auto y = rda(mix, p);
    auto y1 = rda(e1, p);
    auto y2 = rda(e2, p);
    std::vector<cf> expect(y.size());
    for (std::size_t i = 0; i < expect.size(); ++i)
      expect[i] = cf(a * cd(y1.values()[i]) + b * cd(y2.values()[i]));
    CHECK(rel_frob(y.values(), expect) < 1e-4);
  }
}

TEST_CASE("generate_pair") {
  RadarParams p;
  SUBCASE("zero target") {
    auto pair = generate_pair(ReflectivityMap(p.n_range, p.n_azimuth), p);
    for (float v : pair.img_16bit.pixels) CHECK(v == 0.0f);
    for (float v : pair.img_1bit.pixels) CHECK(v == 0.0f);
  }
  SUBCASE("1-bit chain keeps the brighter of two scatterers") {
    std::mt19937_64 rng(31);
    std::uniform_int_distribution<std::size_t> pos(8, 55);
    int kept = 0;
    for (int trial = 0; trial < 20; ++trial) {
      std::size_t r1, a1, r2, a2;
      do {
        r1 = pos(rng), a1 = pos(rng), r2 = pos(rng), a2 = pos(rng);
      } while (std::abs(long(r1) - long(r2)) + std::abs(long(a1) - long(a2)) < 6);
      ReflectivityMap m(p.n_range, p.n_azimuth);
      m.at(r1, a1) = 1.0f;
      m.at(r2, a2) = 0.3f;
      auto img = generate_pair(m, p).img_1bit;
      auto local = [&](std::size_t r, std::size_t a) {
        float v = 0;
        for (std::size_t y = r - 1; y <= r + 1; ++y)
          for (std::size_t x = a - 1; x <= a + 1; ++x) v = std::max(v, img.at(y, x));
        return v;
      };
      kept += local(r1, a1) > local(r2, a2);
    }
    CHECK(kept >= 18);
  }
  SUBCASE("1-bit images lose fidelity on extended targets") {
    std::mt19937_64 rng(37);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (int trial = 0; trial < 20; ++trial) {
      ReflectivityMap m(p.n_range, p.n_azimuth);
      std::size_t r0 = 20 + trial % 8, a0 = 18 + trial % 5;
      for (std::size_t y = r0; y < r0 + 12; ++y)
        for (std::size_t x = a0; x < a0 + 16; ++x)
          if (u(rng) < 0.5f) m.at(y, x) = u(rng);
      auto pair = generate_pair(m, p);
      double q = psnr(pair.img_1bit, pair.img_16bit);
      CHECK(std::isfinite(q));
      CHECK(q < psnr(pair.img_16bit, pair.img_16bit));
    }
  }
}
