#include "cfnet/ndgrad/cft.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace cfnet::nd {

static_assert(std::endian::native == std::endian::little, "CFT I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'C', 'F', 'T', '1'};

void put(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!os) throw FormatError("cft: write failed");
}

void get(std::istream& is, void* p, std::size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw FormatError("cft: truncated data");
}

void header(std::ostream& os, Dtype dtype, const Shape& shape) {
  if (shape.size() > 255) throw FormatError("cft: rank exceeds 255");
  put(os, kMagic, 4);
  const std::uint8_t h[3] = {kCftVersion, static_cast<std::uint8_t>(dtype),
                             static_cast<std::uint8_t>(shape.size())};
  put(os, h, 3);
  for (auto d : shape) {
    if (d > 0xffffffffULL) throw FormatError("cft: dimension exceeds u32");
    const auto u = static_cast<std::uint32_t>(d);
    put(os, &u, 4);
  }
}

}  // namespace

Tensor CftBlob::as_tensor() const {
  if (dtype != Dtype::kF32) throw FormatError("cft: expected float32 payload");
  return Tensor(shape, f32);
}

Tensor64 CftBlob::as_tensor64() const {
  if (dtype != Dtype::kF64) throw FormatError("cft: expected float64 payload");
  return Tensor64(shape, f64);
}

void write_cft(std::ostream& os, const Tensor& t) {
  header(os, Dtype::kF32, t.shape());
  put(os, t.data().data(), t.size() * sizeof(float));
}

void write_cft(std::ostream& os, const Tensor64& t) {
  header(os, Dtype::kF64, t.shape());
  put(os, t.data().data(), t.size() * sizeof(double));
}

void write_cft(std::ostream& os, const Shape& shape, const std::vector<std::complex<float>>& values) {
  if (numel(shape) != values.size()) throw ShapeError("cft: complex payload does not match shape");
  header(os, Dtype::kC64, shape);
  put(os, values.data(), values.size() * sizeof(std::complex<float>));
}

CftBlob read_cft(std::istream& is) {
  char magic[4];
  get(is, magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("cft: bad magic (not a CFT1 tensor)");
  std::uint8_t h[3];
  get(is, h, 3);
  if (h[0] != kCftVersion) throw FormatError("cft: unsupported version " + std::to_string(h[0]));
  if (h[1] > 2) throw FormatError("cft: unknown dtype " + std::to_string(h[1]));
  CftBlob b;
  b.dtype = static_cast<Dtype>(h[1]);
  b.shape.resize(h[2]);
  for (auto& d : b.shape) {
    std::uint32_t u;
    get(is, &u, 4);
    if (u == 0) throw FormatError("cft: zero dimension");
    d = u;
  }
  const std::size_t n = numel(b.shape);
  switch (b.dtype) {
    case Dtype::kF32:
      b.f32.resize(n);
      get(is, b.f32.data(), n * sizeof(float));
      break;
    case Dtype::kF64:
      b.f64.resize(n);
      get(is, b.f64.data(), n * sizeof(double));
      break;
    case Dtype::kC64:
      b.c64.resize(n);
      get(is, b.c64.data(), n * sizeof(std::complex<float>));
      break;
  }
  return b;
}

void save_cft(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cft: cannot open " + path.string() + " for writing");
  write_cft(os, t);
}

Tensor load_cft(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cft: cannot open " + path.string());
  return read_cft(is).as_tensor();
}

}  // namespace cfnet::nd
