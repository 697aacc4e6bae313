#include "cfnet/sarsim/fft.hpp"

#include <fftw3.h>

#include <mutex>

#include "cfnet/errors.hpp"

namespace cfnet::sar {

namespace {
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace

void fft_many(std::complex<float>* data, std::size_t n, std::size_t count, std::size_t stride,
              std::size_t dist, bool inverse) {
  if (n == 0 || count == 0) return;
  auto* buf = reinterpret_cast<fftwf_complex*>(data);
  int len = static_cast<int>(n);
  fftwf_plan plan;
  {
    std::lock_guard lock(planner_mutex());
    plan = fftwf_plan_many_dft(1, &len, static_cast<int>(count), buf, nullptr, static_cast<int>(stride),
                               static_cast<int>(dist), buf, nullptr, static_cast<int>(stride),
                               static_cast<int>(dist), inverse ? FFTW_BACKWARD : FFTW_FORWARD,
                               FFTW_ESTIMATE);
  }
  if (!plan) throw Error("fft: planning failed");
  fftwf_execute(plan);
  {
    std::lock_guard lock(planner_mutex());
    fftwf_destroy_plan(plan);
  }
  if (inverse) {
    const float s = 1.0f / static_cast<float>(n);
    for (std::size_t c = 0; c < count; ++c)
      for (std::size_t i = 0; i < n; ++i) data[c * dist + i * stride] *= s;
  }
}

}  // namespace cfnet::sar
