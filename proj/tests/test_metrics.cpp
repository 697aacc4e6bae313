#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "cfnet/metrics/metrics.hpp"

using namespace cfnet;
using namespace cfnet::metrics;

namespace {

ConfusionMatrix table4() { return load_confusion_csv(std::string(CFNET_FIXTURES) + "/table4.csv"); }

}  // namespace

TEST_CASE("confusion") {
  std::vector<std::size_t> y{0, 1, 2, 2, 1};
  auto m = confusion(y, y, 3);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(m.at(i, j) == (i == j ? (i == 0 ? 1u : 2u) : 0u));

  std::vector<std::size_t> pred{0}, lab{2};
  auto one = confusion(pred, lab, 3);
  CHECK(one.at(2, 0) == 1);
  CHECK(one.total() == 1);

  std::vector<std::size_t> p2{0, 0, 1, 2, 2, 2}, l2{0, 1, 1, 2, 0, 2};
  auto m2 = confusion(p2, l2, 3);
  CHECK(m2.row_sum(0) == 2);
  CHECK(m2.row_sum(1) == 2);
  CHECK(m2.row_sum(2) == 2);
  CHECK_THROWS_AS(confusion(std::vector<std::size_t>{3}, std::vector<std::size_t>{0}, 3), ValueError);
  CHECK_THROWS_AS(confusion(std::vector<std::size_t>{0, 1}, std::vector<std::size_t>{0}, 3), ShapeError);
}

TEST_CASE("report on the published six-class confusion matrix") {
  auto m = table4();
  REQUIRE(m.classes() == 6);
  CHECK(m.total() == 172);
  auto r = report(m);
  CHECK(r.accuracy == doctest::Approx(139.0 / 172.0).epsilon(1e-12));
  CHECK(std::abs(r.accuracy * 100 - 80.81) < 0.01);
  CHECK(std::abs(r.macro_f1 * 100 - 56.58) < 0.01);
  // Hand computation, per class (TP, column sum, row sum):
  //   C1 3/4 3/8  C2 5/12 5/7  C3 3/7 3/8  C4 108/118 108/118  C5 18/28 18/22  C6 2/3 2/9
  const double prec[] = {3.0 / 4, 5.0 / 12, 3.0 / 7, 108.0 / 118, 18.0 / 28, 2.0 / 3};
  const double rec[] = {3.0 / 8, 5.0 / 7, 3.0 / 8, 108.0 / 118, 18.0 / 22, 2.0 / 9};
  const double f1[] = {0.5, 10.0 / 19, 0.4, 108.0 / 118, 0.72, 1.0 / 3};
  double mf = 0;
  for (std::size_t k = 0; k < 6; ++k) {
    CHECK(r.per_class[k].precision == doctest::Approx(prec[k]).epsilon(1e-12));
    CHECK(r.per_class[k].recall == doctest::Approx(rec[k]).epsilon(1e-12));
    CHECK(r.per_class[k].f1 == doctest::Approx(f1[k]).epsilon(1e-12));
    mf += f1[k];
  }
  CHECK(r.macro_f1 == doctest::Approx(mf / 6).epsilon(1e-12));
  CHECK(r.per_class[0].precision == 0.75);
}

TEST_CASE("report invariants") {
  auto m = table4();
  auto r = report(m);
  double weighted = 0;
  for (const auto& s : r.per_class) weighted += s.recall * double(s.support);
  CHECK(std::abs(weighted / double(r.total) - r.accuracy) < 1e-12);

  // permuting class indices
  const std::size_t perm[] = {3, 0, 5, 1, 4, 2};
  ConfusionMatrix p(6);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) p.at(perm[i], perm[j]) = m.at(i, j);
  auto rp = report(p);
  CHECK(rp.accuracy == doctest::Approx(r.accuracy).epsilon(1e-12));
  CHECK(rp.macro_f1 == doctest::Approx(r.macro_f1).epsilon(1e-12));
  CHECK(rp.macro_precision == doctest::Approx(r.macro_precision).epsilon(1e-12));
  CHECK(rp.macro_recall == doctest::Approx(r.macro_recall).epsilon(1e-12));
  for (std::size_t i = 0; i < 6; ++i) CHECK(rp.per_class[perm[i]].f1 == doctest::Approx(r.per_class[i].f1));

  for (const auto& s : r.per_class) {
    for (double v : {s.precision, s.recall, s.f1}) {
      CHECK(v >= 0);
      CHECK(v <= 1);
    }
  }

  // a never-predicted, never-present class scores 0 without NaN
  ConfusionMatrix z(3);
  z.at(0, 0) = 4;
  z.at(1, 0) = 1;
  auto rz = report(z);
  CHECK(rz.per_class[2].precision == 0);
  CHECK(rz.per_class[2].f1 == 0);
  CHECK(rz.per_class[1].f1 == 0);
  CHECK_THROWS_AS(report(ConfusionMatrix(3)), ValueError);
}

TEST_CASE("psnr") {
  std::vector<float> a(100, 0.5f), b(100, 0.6f);
  CHECK(std::isinf(psnr(a, a)));
  CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-5));

  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(0, 1);
  std::vector<float> x(256), y(256);
  for (auto& v : x) v = u(rng);
  for (auto& v : y) v = u(rng);
  double mse = 0;
  for (std::size_t i = 0; i < 256; ++i) mse += (double(x[i]) - y[i]) * (double(x[i]) - y[i]);
  mse /= 256;
  CHECK(std::abs(psnr(x, y) - 10 * std::log10(1 / mse)) < 1e-6);
  CHECK(psnr(x, y) == psnr(y, x));
  CHECK(std::abs(psnr(x, y, 255.0) - 10 * std::log10(255.0 * 255.0 / mse)) < 1e-6);

  // monotone in noise variance
  std::normal_distribution<float> n;
  std::vector<float> e(256);
  for (auto& v : e) v = n(rng);
  double prev = INFINITY;
  for (float sigma : {0.01f, 0.02f, 0.05f, 0.1f, 0.2f}) {
    std::vector<float> noisy(256);
    for (std::size_t i = 0; i < 256; ++i) noisy[i] = x[i] + sigma * e[i];
    double q = psnr(x, noisy);
    CHECK(q < prev);
    prev = q;
  }
  CHECK_THROWS_AS(psnr(x, std::vector<float>(3)), ShapeError);
}

TEST_CASE("csv round trip and formats") {
  auto m = table4();
  std::stringstream ss;
  write_confusion_csv(ss, m);
  auto back = read_confusion_csv(ss);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) CHECK(back.at(i, j) == m.at(i, j));

  std::stringstream bare("1,2\n3,4\n");
  auto b = read_confusion_csv(bare);
  CHECK(b.at(1, 0) == 3);
  std::stringstream ragged("1,2\n3\n");
  CHECK_THROWS_AS(read_confusion_csv(ragged), FormatError);

  std::stringstream rep;
  write_report_csv(rep, report(m));
  std::string text = rep.str();
  CHECK(text.rfind("class,precision,recall,f1,support\n", 0) == 0);
  CHECK(text.find("macro,0.636669,0.569991,0.565817,172") != std::string::npos);
  CHECK(text.find("accuracy,0.808140") != std::string::npos);
  CHECK(format_value(INFINITY) == "inf");
  CHECK(format_report(report(m)).find("accuracy 0.8081") != std::string::npos);
}
