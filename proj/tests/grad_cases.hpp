#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "cfnet/ndgrad/ops.hpp"
#include "gradcheck.hpp"

namespace cfnet::testing {

using nd::Shape;
using nd::Tensor64;

struct PrimitiveCase {
  const char* name;
  std::vector<Shape> shapes;
  double lo, hi;
  ScalarFn<double> fn;
};

inline std::vector<PrimitiveCase> primitive_cases() {
  using V = std::vector<Tensor64>;
  return {
      {"add", {{2, 3}, {3}}, -1, 1, [](const V& x) { return weighted_sum(add(x[0], x[1])); }},
      {"sub", {{2, 1, 3}, {4, 1}}, -1, 1, [](const V& x) { return weighted_sum(sub(x[0], x[1])); }},
      {"mul", {{3, 4}, {3, 4}}, -1, 1, [](const V& x) { return weighted_sum(mul(x[0], x[1])); }},
      {"div", {{3, 4}, {4}}, 0.5, 2, [](const V& x) { return weighted_sum(div(x[0], x[1])); }},
      {"scale", {{5}}, -1, 1, [](const V& x) { return weighted_sum(scale(x[0], 2.5)); }},
      {"add_scalar", {{5}}, -1, 1, [](const V& x) { return weighted_sum(add_scalar(x[0], 0.3)); }},
      {"matmul", {{3, 4}, {4, 2}}, -1, 1, [](const V& x) { return weighted_sum(matmul(x[0], x[1])); }},
      {"matmul_batched", {{2, 3, 4}, {2, 4, 2}}, -1, 1,
       [](const V& x) { return weighted_sum(matmul(x[0], x[1])); }},
      {"matmul_fold", {{2, 3, 4}, {4, 2}}, -1, 1, [](const V& x) { return weighted_sum(matmul(x[0], x[1])); }},
      {"transpose", {{2, 3, 4}}, -1, 1, [](const V& x) { return weighted_sum(transpose(x[0])); }},
      {"conv2d", {{2, 2, 5, 5}, {3, 2, 3, 3}, {3}}, -1, 1,
       [](const V& x) { return weighted_sum(conv2d(x[0], x[1], std::optional(x[2]), {2, 1})); }},
      {"conv_transpose2d", {{2, 3, 3, 3}, {3, 2, 2, 2}, {2}}, -1, 1,
       [](const V& x) { return weighted_sum(conv_transpose2d(x[0], x[1], std::optional(x[2]), {2, 0})); }},
      {"conv_transpose2d_k3", {{1, 2, 3, 3}, {2, 2, 3, 3}}, -1, 1,
       [](const V& x) { return weighted_sum(conv_transpose2d(x[0], x[1], std::nullopt, {2, 1})); }},
      {"relu", {{10}}, -1, 1, [](const V& x) { return weighted_sum(relu(x[0])); }},
      {"sigmoid", {{10}}, -3, 3, [](const V& x) { return weighted_sum(sigmoid(x[0])); }},
      {"softmax", {{3, 5}}, -2, 2, [](const V& x) { return weighted_sum(softmax(x[0])); }},
      {"log_softmax", {{3, 5}}, -2, 2, [](const V& x) { return weighted_sum(log_softmax(x[0])); }},
      {"global_avg_pool", {{2, 3, 4, 4}}, -1, 1, [](const V& x) { return weighted_sum(global_avg_pool(x[0])); }},
      {"avg_pool2d", {{1, 2, 4, 4}}, -1, 1, [](const V& x) { return weighted_sum(avg_pool2d(x[0], 2)); }},
      {"reshape", {{2, 6}}, -1, 1, [](const V& x) { return weighted_sum(reshape(x[0], {3, 4})); }},
      {"flatten", {{2, 2, 3}}, -1, 1, [](const V& x) { return weighted_sum(flatten(x[0])); }},
      {"concat", {{2, 1, 3}, {2, 2, 3}}, -1, 1,
       [](const V& x) { return weighted_sum(concat(std::vector<Tensor64>{x[0], x[1]}, 1)); }},
      {"mean_axes", {{2, 3, 4}}, -1, 1, [](const V& x) { return weighted_sum(mean(x[0], {0, 2})); }},
      {"sum_axes", {{2, 3, 4}}, -1, 1, [](const V& x) { return weighted_sum(sum(x[0], {1})); }},
      {"sum", {{2, 3}}, -1, 1, [](const V& x) { return sum(mul(x[0], x[0])); }},
      {"mean", {{2, 3}}, -1, 1, [](const V& x) { return mean(mul(x[0], x[0])); }},
      {"square", {{6}}, -1, 1, [](const V& x) { return weighted_sum(square(x[0])); }},
      {"sqrt", {{6}}, 0.2, 2, [](const V& x) { return weighted_sum(sqrt(x[0])); }},
      {"exp", {{6}}, -1, 1, [](const V& x) { return weighted_sum(exp(x[0])); }},
      {"log", {{6}}, 0.2, 2, [](const V& x) { return weighted_sum(log(x[0])); }},
      {"pow_scalar", {{6}}, 0.2, 2, [](const V& x) { return weighted_sum(pow_scalar(x[0], 2.5)); }},
      {"l2_norm", {{3, 4}}, -1, 1, [](const V& x) { return weighted_sum(l2_norm(x[0], 1)); }},
      {"pairwise_distance", {{4, 3}}, -1, 1, [](const V& x) { return weighted_sum(pairwise_distance(x[0])); }},
      {"slice", {{3, 5}}, -1, 1, [](const V& x) { return weighted_sum(slice(x[0], 1, 1, 4)); }},
      {"take", {{3, 4}}, -1, 1, [](const V& x) { return weighted_sum(take(x[0], {0, 5, 5, 11})); }},
  };
}


// Smallest |d(a,p) - d(a,n) + m| over anchors plus the smallest gap between
// competing candidate distances; small values mean a kink or a mining tie.
inline double kink_distance(const Tensor64& x, const std::vector<std::size_t>& labels, double m) {
  const std::size_t n = x.dim(0), dim = x.dim(1);
  auto dist = [&](std::size_t i, std::size_t j) {
    double s = 0;
    for (std::size_t k = 0; k < dim; ++k) s += std::pow(x.at(i * dim + k) - x.at(j * dim + k), 2);
    return std::sqrt(s);
  };
  double worst = INFINITY;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> pos, neg;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) (labels[j] == labels[i] ? pos : neg).push_back(dist(i, j));
    if (pos.empty()) continue;
    std::sort(pos.rbegin(), pos.rend());
    std::sort(neg.begin(), neg.end());
    worst = std::min(worst, std::abs(pos[0] - neg[0] + m));
    if (pos.size() > 1) worst = std::min(worst, pos[0] - pos[1]);
    if (neg.size() > 1) worst = std::min(worst, neg[1] - neg[0]);
  }
  return worst;
}

}  // namespace cfnet::testing
