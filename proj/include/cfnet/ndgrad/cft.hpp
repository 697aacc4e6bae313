#pragma once

#include <complex>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "cfnet/ndgrad/tensor.hpp"

// CFT tensor file:
//   "CFT1" | version u8 = 1 | dtype u8 | rank u8 | rank x u32 dims | payload
// All integers and payload values little-endian, payload row-major.
namespace cfnet::nd {

enum class Dtype : std::uint8_t { kF32 = 0, kF64 = 1, kC64 = 2 };

inline constexpr std::uint8_t kCftVersion = 1;

struct CftBlob {
  Dtype dtype = Dtype::kF32;
  Shape shape;
  std::vector<float> f32;
  std::vector<double> f64;
  std::vector<std::complex<float>> c64;

  Tensor as_tensor() const;  // f32 blobs only
  Tensor64 as_tensor64() const;  // f64 blobs only
};

void write_cft(std::ostream& os, const Tensor& t);
void write_cft(std::ostream& os, const Tensor64& t);
void write_cft(std::ostream& os, const Shape& shape, const std::vector<std::complex<float>>& values);
CftBlob read_cft(std::istream& is);

void save_cft(const std::filesystem::path& path, const Tensor& t);
Tensor load_cft(const std::filesystem::path& path);

}  // namespace cfnet::nd
