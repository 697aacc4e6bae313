#pragma once

#include <complex>
#include <cstddef>

namespace cfnet::sar {

// Batched in-place complex FFT over `count` transforms of length n, element
// stride `stride` and transform distance `dist`. The inverse is scaled by 1/n.
// Thread-safe: planning is serialised internally.
void fft_many(std::complex<float>* data, std::size_t n, std::size_t count, std::size_t stride,
              std::size_t dist, bool inverse);

inline void fft(std::complex<float>* data, std::size_t n, bool inverse) {
  fft_many(data, n, 1, 1, n, inverse);
}

}  // namespace cfnet::sar
