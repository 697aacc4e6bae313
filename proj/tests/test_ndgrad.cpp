#include <doctest.h>

#include <sstream>

#include "cfnet/ndgrad/adamw.hpp"
#include "cfnet/ndgrad/cft.hpp"
#include "cfnet/ndgrad/ops.hpp"
#include "cfnet/ndgrad/params.hpp"
#include "grad_cases.hpp"

using namespace cfnet;
using namespace cfnet::nd;
using cfnet::testing::gradcheck;
using cfnet::testing::random_tensor;
using cfnet::testing::weighted_sum;


TEST_CASE("primitive examples") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor a({2, 2}, {1.5f, -2, 3, 4});
  auto m = matmul(eye, a);
  CHECK(std::vector<float>(m.data().begin(), m.data().end()) == std::vector<float>{1.5f, -2, 3, 4});

  auto r = relu(Tensor({3}, {-1.0f, 0.0f, 2.5f}));
  CHECK(std::vector<float>(r.data().begin(), r.data().end()) == std::vector<float>{0, 0, 2.5f});

  auto s = softmax(Tensor({3}, {0, 0, 0}));
  for (float v : s.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-7));

  auto c = conv2d(Tensor::full({1, 1, 3, 3}, 1.0f), Tensor::full({1, 1, 2, 2}, 1.0f), std::nullopt, {1, 0});
  CHECK(c.shape() == Shape{1, 1, 2, 2});
  for (float v : c.data()) CHECK(v == 4.0f);
}

TEST_CASE("conv2d matches a direct nested-loop convolution") {
  std::mt19937_64 rng(3);
  auto x = random_tensor<float>({2, 3, 7, 6}, rng);
  auto w = random_tensor<float>({4, 3, 3, 3}, rng);
  auto b = random_tensor<float>({4}, rng);
  const std::size_t s = 2, p = 1;
  auto y = conv2d(x, w, std::optional(b), {s, p});
  const std::size_t Ho = y.dim(2), Wo = y.dim(3);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 4; ++o)
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          double acc = b.data()[o];
          for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t ky = 0; ky < 3; ++ky)
              for (std::size_t kx = 0; kx < 3; ++kx) {
                long iy = long(oy * s + ky) - long(p), ix = long(ox * s + kx) - long(p);
                if (iy < 0 || ix < 0 || iy >= 7 || ix >= 6) continue;
                acc += double(x.data()[((n * 3 + c) * 7 + iy) * 6 + ix]) * w.data()[((o * 3 + c) * 3 + ky) * 3 + kx];
              }
          CHECK(y.data()[((n * 4 + o) * Ho + oy) * Wo + ox] == doctest::Approx(acc).epsilon(1e-5));
        }
}

TEST_CASE("conv2d output shape rule") {
  for (std::size_t H : {4, 5, 8, 9})
    for (std::size_t k : {1, 2, 3})
      for (std::size_t st : {1, 2, 3})
        for (std::size_t p : {0, 1}) {
          auto y = conv2d(Tensor::zeros({1, 1, H, H}), Tensor::zeros({1, 1, k, k}), std::nullopt, {st, p});
          const std::size_t expect = (H + 2 * p - k) / st + 1;
          CHECK(y.dim(2) == expect);
          CHECK(y.dim(3) == expect);
        }
}

TEST_CASE("every primitive matches central differences in float64") {
  for (const auto& pc : testing::primitive_cases()) {
    CAPTURE(pc.name);
    for (int point = 0; point < 10; ++point) {
      std::mt19937_64 rng(1000 + point);
      std::vector<Tensor64> ins;
      for (const auto& s : pc.shapes) ins.push_back(random_tensor<double>(s, rng, pc.lo, pc.hi));
      CHECK(gradcheck<double>(pc.fn, ins, 1e-6) < 1e-6);
    }
  }
}

TEST_CASE("float32 composite of conv, relu and mean passes the finite-difference check") {
  std::mt19937_64 rng(5);
  testing::ScalarFn<float> f = [](const std::vector<Tensor>& x) {
    return mean(relu(conv2d(x[0], x[1], std::nullopt, {1, 0})));
  };
  // Five kernel parameters (5 output channels of a 1x1 conv).
  for (int point = 0; point < 10; ++point) {
    auto x = random_tensor<float>({1, 1, 3, 7}, rng);
    auto w = random_tensor<float>({5, 1, 1, 1}, rng);
    CHECK(gradcheck<float>(f, {x, w}, 1e-3) < 1e-3);
  }
}

TEST_CASE("backward basics") {
  Tensor x({3}, {1, 2, 3}, true);
  {
    TapeF tape;
    TapeF::Scope scope(tape);
    auto loss = sum(square(x));
    backward(loss);
    CHECK_THROWS_AS(backward(loss), TapeError);
  }
  CHECK(std::vector<float>(x.grad().begin(), x.grad().end()) == std::vector<float>{2, 4, 6});

  // Constant loss: no parameters, nothing happens.
  Tensor p({2}, {1, 1}, true);
  {
    TapeF tape;
    TapeF::Scope scope(tape);
    auto c = Tensor::scalar(3.0f);
    backward(sum(c));
  }
  CHECK_FALSE(p.has_grad());

  // Non-scalar loss.
  {
    TapeF tape;
    TapeF::Scope scope(tape);
    auto y = square(x);
    CHECK_THROWS_AS(backward(y), TapeError);
  }

  // Dead tape.
  Tensor dangling;
  {
    TapeF tape;
    TapeF::Scope scope(tape);
    dangling = sum(square(x));
  }
  CHECK_THROWS_AS(backward(dangling), TapeError);
}

TEST_CASE("unreachable parameters keep no gradient") {
  Tensor a({2}, {1, 2}, true), b({2}, {3, 4}, true);
  TapeF tape;
  TapeF::Scope scope(tape);
  auto unused = square(b);
  backward(sum(a));
  CHECK(a.has_grad());
  CHECK_FALSE(b.has_grad());
}

TEST_CASE("no active tape means no recording") {
  Tensor a({2}, {1, 2}, true);
  auto y = square(a);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("shape errors name the primitive") {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("matmul") != std::string::npos);
    CHECK(std::string(e.what()).find("[2x3]") != std::string::npos);
  }
  CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({4})), ShapeError);
  CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), std::nullopt, {}), ShapeError);
}

TEST_CASE("non-finite output raises a numeric error") {
  CHECK_THROWS_AS(log(Tensor({1}, {0.0f})), NumericError);
  CHECK_THROWS_AS(exp(Tensor({1}, {1000.0f})), NumericError);
}

TEST_CASE("forward determinism and softmax rows") {
  std::mt19937_64 rng(8);
  auto x = random_tensor<float>({6, 9}, rng, -5, 5);
  auto a = softmax(x), b = softmax(x);
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0;
    for (std::size_t i = 0; i < 9; ++i) {
      CHECK(a.data()[r * 9 + i] >= 0.0f);
      s += a.data()[r * 9 + i];
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("adamw") {
  SUBCASE("zero gradient without decay leaves parameters unchanged") {
    Tensor p({3}, {0.5f, -1, 2}, true);
    AdamW opt({0.1, 0.9, 0.999, 1e-8, 0.0});
    opt.add_group({"p"}, {p});
    p.mutable_grad();
    opt.step();
    CHECK(std::vector<float>(p.data().begin(), p.data().end()) == std::vector<float>{0.5f, -1, 2});
    CHECK_FALSE(p.has_grad());
  }
  SUBCASE("analytic first step") {
    Tensor p({1}, {0.0f}, true);
    AdamW opt({0.1, 0.9, 0.999, 1e-8, 0.0});
    opt.add_group({"p"}, {p});
    p.mutable_grad()[0] = 1.0f;
    opt.step();
    CHECK(p.data()[0] == doctest::Approx(-0.1).epsilon(1e-6));
  }
  SUBCASE("ten steps on p^2 shrink |p| monotonically") {
    Tensor p({1}, {1.0f}, true);
    AdamW opt({0.05, 0.9, 0.999, 1e-8, 0.0});
    opt.add_group({"p"}, {p});
    float prev = 1.0f;
    for (int i = 0; i < 10; ++i) {
      TapeF tape;
      TapeF::Scope scope(tape);
      backward(sum(square(p)));
      opt.step();
      CHECK(std::abs(p.data()[0]) < prev);
      prev = std::abs(p.data()[0]);
    }
  }
  SUBCASE("missing gradient") {
    Tensor p({1}, {1.0f}, true);
    AdamW opt({});
    opt.add_group({"p"}, {p});
    CHECK_THROWS_AS(opt.step(), ValueError);
    CHECK_NOTHROW(opt.step(MissingGrad::kSkip));
    CHECK(p.data()[0] == 1.0f);
  }
}

TEST_CASE("cft round trip and format errors") {
  std::mt19937_64 rng(1);
  auto t = random_tensor<float>({3, 1, 4}, rng);
  std::stringstream ss;
  write_cft(ss, t);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "CFT1");
  CHECK(bytes.size() == 4 + 3 + 3 * 4 + 12 * 4);
  auto back = read_cft(ss).as_tensor();
  CHECK(back.shape() == t.shape());
  CHECK(std::equal(back.data().begin(), back.data().end(), t.data().begin()));

  std::stringstream c;
  write_cft(c, Shape{2}, {{1.0f, -2.0f}, {0.5f, 0.25f}});
  auto blob = read_cft(c);
  CHECK(blob.dtype == Dtype::kC64);
  CHECK(blob.c64[1] == std::complex<float>(0.5f, 0.25f));

  std::string bad = bytes;
  bad[0] = 'X';
  std::stringstream b1(bad);
  CHECK_THROWS_AS(read_cft(b1), FormatError);
  std::string ver = bytes;
  ver[4] = 9;
  std::stringstream b2(ver);
  CHECK_THROWS_AS(read_cft(b2), FormatError);
  std::stringstream b3(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(read_cft(b3), FormatError);
}
