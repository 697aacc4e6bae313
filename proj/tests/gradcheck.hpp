#pragma once

// Central finite-difference oracle for the autodiff engine. Test-only: it uses
// nothing but forward evaluation, so it stays independent of every backward
// rule it checks.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "cfnet/ndgrad/ops.hpp"
#include "cfnet/ndgrad/tensor.hpp"

namespace cfnet::testing {

template <typename T>
using ScalarFn = std::function<nd::BasicTensor<T>(const std::vector<nd::BasicTensor<T>>&)>;

template <typename T>
nd::BasicTensor<T> random_tensor(nd::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<T> v(nd::numel(shape));
  for (auto& x : v) x = static_cast<T>(d(rng));
  return nd::BasicTensor<T>(std::move(shape), std::move(v));
}

// Norm-wise relative error ||analytic - numeric|| / max(||numeric||, floor),
// maximised over the inputs.
template <typename T>
double gradcheck(const ScalarFn<T>& f, std::vector<nd::BasicTensor<T>> inputs, double eps,
                 double floor = 1e-6) {
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.clear_grad();
  }
  {
    nd::Tape<T> tape;
    typename nd::Tape<T>::Scope scope(tape);
    auto loss = f(inputs);
    nd::backward(loss);
  }
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    std::vector<double> analytic(inputs[k].size(), 0.0);
    if (inputs[k].has_grad()) {
      for (std::size_t i = 0; i < analytic.size(); ++i) analytic[i] = inputs[k].grad()[i];
    }
    double num2 = 0.0, diff2 = 0.0;
    auto data = inputs[k].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const T orig = data[i];
      data[i] = static_cast<T>(orig + eps);
      const double fp = f(inputs).item();
      data[i] = static_cast<T>(orig - eps);
      const double fm = f(inputs).item();
      data[i] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      num2 += numeric * numeric;
      diff2 += (numeric - analytic[i]) * (numeric - analytic[i]);
    }
    worst = std::max(worst, std::sqrt(diff2) / std::max(std::sqrt(num2), floor));
  }
  return worst;
}

// Projects an output onto fixed random weights so every element matters.
template <typename T>
nd::BasicTensor<T> weighted_sum(const nd::BasicTensor<T>& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  auto w = random_tensor<T>(y.shape(), rng);
  return nd::sum(nd::mul(y, w));
}

}  // namespace cfnet::testing
