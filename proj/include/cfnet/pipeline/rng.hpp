#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace cfnet::pipeline {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Order-sensitive hash of a key tuple, e.g. (seed, stage tag, epoch, index).
inline std::uint64_t stream_seed(std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = 0x243f6a8885a308d3ULL;
  for (auto k : keys) h = splitmix64(h ^ splitmix64(k));
  return h;
}

inline std::mt19937_64 stream(std::initializer_list<std::uint64_t> keys) { return std::mt19937_64(stream_seed(keys)); }

// Distribution-free helpers: std:: distributions are implementation-defined,
// these give identical draws on every standard library.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }
inline double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }
inline std::uint64_t below(std::mt19937_64& rng, std::uint64_t n) { return n == 0 ? 0 : rng() % n; }
inline bool bernoulli(std::mt19937_64& rng, double p) { return uniform01(rng) < p; }
double normal(std::mt19937_64& rng);

template <typename It>
void shuffle(It first, It last, std::mt19937_64& rng) {
  const auto n = static_cast<std::uint64_t>(last - first);
  for (std::uint64_t i = n; i > 1; --i) std::swap(first[i - 1], first[below(rng, i)]);
}

// Stage tags mixed into stream seeds.
enum class StreamTag : std::uint64_t {
  kSplit = 1,
  kTarget,
  kPlan,
  kBatches,
  kAugment,
  kInit,
  kGallery,
  kRoute,
};

inline std::uint64_t tag(StreamTag t) { return static_cast<std::uint64_t>(t); }

}  // namespace cfnet::pipeline
