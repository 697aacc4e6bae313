#include "cfnet/pipeline/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <variant>

#include "cfnet/ndgrad/cft.hpp"

namespace cfnet::pipeline {

namespace {

constexpr char kMagic[4] = {'C', 'F', 'C', 'K'};
const std::string kMeta = "meta.";
const std::string kOptim = "optim.";

void put(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!os) throw FormatError("checkpoint: write failed");
}

void get(std::istream& is, void* p, std::size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw FormatError("checkpoint: truncated file");
}

struct Entry {
  std::string name;
  std::variant<nd::Tensor, nd::Tensor64> value;
};

nd::Tensor floats(const std::vector<float>& v) { return nd::Tensor({v.size()}, v); }
nd::Tensor64 scalar64(double v) { return nd::Tensor64({1}, {v}); }

bool starts_with(const std::string& s, const std::string& p) { return s.compare(0, p.size(), p) == 0; }

}  // namespace

OptimizerState OptimizerState::capture(const nd::AdamW& opt) {
  OptimizerState s;
  s.steps = opt.steps();
  for (const auto& slot : opt.slots()) s.slots.push_back({slot.name, slot.m, slot.v, slot.lr_scale});
  return s;
}

void OptimizerState::restore(nd::AdamW& opt) const {
  std::map<std::string, const Slot*> by_name;
  for (const auto& s : slots) by_name[s.name] = &s;
  for (auto& slot : opt.slots()) {
    auto it = by_name.find(slot.name);
    if (it == by_name.end()) throw ValueError("optimizer state lacks slot " + slot.name);
    if (it->second->m.size() != slot.m.size()) throw ShapeError("optimizer state size mismatch for " + slot.name);
    slot.m = it->second->m;
    slot.v = it->second->v;
    slot.lr_scale = it->second->lr_scale;
  }
  opt.set_steps(steps);
}

void CheckpointBundle::set_meta(const std::string& key, double value) {
  for (auto& [k, v] : meta) {
    if (k == key) {
      v = value;
      return;
    }
  }
  meta.emplace_back(key, value);
}

std::optional<double> CheckpointBundle::get_meta(const std::string& key) const {
  for (const auto& [k, v] : meta)
    if (k == key) return v;
  return std::nullopt;
}

double CheckpointBundle::require_meta(const std::string& key) const {
  auto v = get_meta(key);
  if (!v) throw FormatError("checkpoint: missing metadata '" + key + "'");
  return *v;
}

void write_checkpoint(std::ostream& os, const CheckpointBundle& b) {
  std::vector<Entry> entries;
  for (const auto& [name, t] : b.params.entries()) {
    if (starts_with(name, kMeta) || starts_with(name, kOptim)) {
      throw ValueError("checkpoint: parameter name '" + name + "' uses a reserved prefix");
    }
    entries.push_back({name, t});
  }
  for (const auto& [k, v] : b.meta) entries.push_back({kMeta + k, scalar64(v)});
  if (b.optimizer) {
    entries.push_back({kOptim + "steps", scalar64(static_cast<double>(b.optimizer->steps))});
    for (const auto& s : b.optimizer->slots) {
      entries.push_back({kOptim + s.name + ".m", floats(s.m)});
      entries.push_back({kOptim + s.name + ".v", floats(s.v)});
      entries.push_back({kOptim + s.name + ".lr_scale", scalar64(s.lr_scale)});
    }
  }
  if (entries.size() > 0xffffffffULL) throw FormatError("checkpoint: too many entries");
  put(os, kMagic, 4);
  put(os, &kCheckpointVersion, 1);
  const auto count = static_cast<std::uint32_t>(entries.size());
  put(os, &count, 4);
  for (const auto& e : entries) {
    if (e.name.size() > 0xffff) throw FormatError("checkpoint: entry name too long");
    const auto len = static_cast<std::uint16_t>(e.name.size());
    put(os, &len, 2);
    put(os, e.name.data(), e.name.size());
    std::visit([&](const auto& t) { nd::write_cft(os, t); }, e.value);
  }
}

CheckpointBundle read_checkpoint(std::istream& is) {
  char magic[4];
  get(is, magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("checkpoint: bad magic (not a CFCK file)");
  std::uint8_t version;
  get(is, &version, 1);
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  std::uint32_t count;
  get(is, &count, 4);
  CheckpointBundle b;
  std::vector<std::pair<std::string, nd::CftBlob>> optim;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint16_t len;
    get(is, &len, 2);
    std::string name(len, '\0');
    get(is, name.data(), len);
    nd::CftBlob blob = nd::read_cft(is);
    if (starts_with(name, kMeta)) {
      if (blob.dtype != nd::Dtype::kF64 || blob.f64.size() != 1) throw FormatError("checkpoint: bad meta entry " + name);
      b.meta.emplace_back(name.substr(kMeta.size()), blob.f64[0]);
    } else if (starts_with(name, kOptim)) {
      optim.emplace_back(name.substr(kOptim.size()), std::move(blob));
    } else {
      if (b.params.contains(name)) throw FormatError("checkpoint: duplicate entry " + name);
      b.params.add(name, blob.as_tensor());
    }
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("checkpoint: trailing bytes after last entry");
  if (!optim.empty()) {
    OptimizerState st;
    auto tail = [](const std::string& n, const std::string& suffix) {
      return n.size() > suffix.size() && n.compare(n.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    for (auto& [name, blob] : optim) {
      if (name == "steps") {
        if (blob.f64.size() != 1) throw FormatError("checkpoint: bad optim.steps");
        st.steps = static_cast<std::uint64_t>(blob.f64[0]);
      } else if (tail(name, ".m")) {
        st.slots.push_back({name.substr(0, name.size() - 2), blob.f32, {}, 1.0});
      } else if (tail(name, ".v")) {
        if (st.slots.empty() || st.slots.back().name != name.substr(0, name.size() - 2)) {
          throw FormatError("checkpoint: optimizer entry out of order: " + name);
        }
        st.slots.back().v = blob.f32;
      } else if (tail(name, ".lr_scale")) {
        if (st.slots.empty() || blob.f64.size() != 1) throw FormatError("checkpoint: bad optimizer entry " + name);
        st.slots.back().lr_scale = blob.f64[0];
      } else {
        throw FormatError("checkpoint: unknown optimizer entry " + name);
      }
    }
    b.optimizer = std::move(st);
  }
  return b;
}

void checkpoint_save(const CheckpointBundle& b, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot write checkpoint " + path.string());
  write_checkpoint(os, b);
}

CheckpointBundle checkpoint_load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint " + path.string());
  return read_checkpoint(is);
}

}  // namespace cfnet::pipeline
