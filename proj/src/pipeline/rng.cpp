#include "cfnet/pipeline/rng.hpp"

#include <cmath>
#include <numbers>

namespace cfnet::pipeline {

double normal(std::mt19937_64& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace cfnet::pipeline
