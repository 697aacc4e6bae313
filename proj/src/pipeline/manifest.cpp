#include "cfnet/pipeline/manifest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "cfnet/ndgrad/cft.hpp"

namespace cfnet::pipeline {

namespace {

constexpr std::string_view kHeader = "id,path_1bit,path_16bit,label,split,path_hog";

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

void strip_cr(std::string& s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
}

void check_cell(const std::string& s, const char* what) {
  if (s.find_first_of(",\n\r") != std::string::npos) {
    throw ValueError(std::string("manifest: ") + what + " contains a comma or newline: " + s);
  }
}

std::string portable(const fs::path& p) { return p.generic_string(); }

}  // namespace

std::string_view split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "train";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw FormatError("manifest: unknown split '" + std::string(s) + "'");
}

std::vector<std::size_t> Manifest::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < rows.size(); ++i)
    if (rows[i].split == s) out.push_back(i);
  return out;
}

std::vector<std::size_t> Manifest::labels(const std::vector<std::size_t>& idx) const {
  std::vector<std::size_t> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(rows.at(i).label);
  return out;
}

std::vector<std::size_t> Manifest::class_counts(std::optional<Split> s) const {
  std::vector<std::size_t> c(classes.size(), 0);
  for (const auto& r : rows)
    if (!s || r.split == *s) ++c.at(r.label);
  return c;
}

bool Manifest::has_hog() const {
  return !rows.empty() && std::all_of(rows.begin(), rows.end(), [](const SamplePair& r) { return !r.path_hog.empty(); });
}

void Manifest::validate() const {
  if (classes.empty()) throw ValueError("manifest: no classes");
  std::set<std::string> ids;
  for (const auto& r : rows) {
    if (r.label >= classes.size()) {
      throw ValueError("manifest: row " + r.id + " has label " + std::to_string(r.label) + " but only " +
                       std::to_string(classes.size()) + " classes");
    }
    if (r.path_1bit.empty() || r.path_16bit.empty()) throw ValueError("manifest: row " + r.id + " lacks an image path");
    if (!ids.insert(r.id).second) throw ValueError("manifest: duplicate id " + r.id);
  }
}

void write_manifest(const Manifest& m, const fs::path& file) {
  m.validate();
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  {
    std::ofstream os(file, std::ios::binary);
    if (!os) throw Error("cannot write manifest " + file.string());
    os << kHeader << '\n';
    for (const auto& r : m.rows) {
      check_cell(r.id, "id");
      for (const auto* p : {&r.path_1bit, &r.path_16bit, &r.path_hog}) check_cell(portable(*p), "path");
      os << r.id << ',' << portable(r.path_1bit) << ',' << portable(r.path_16bit) << ',' << r.label << ','
         << split_name(r.split) << ',' << portable(r.path_hog) << '\n';
    }
  }
  std::ofstream cs(file.parent_path() / "classes.csv", std::ios::binary);
  if (!cs) throw Error("cannot write classes.csv next to " + file.string());
  cs << "index,name\n";
  for (std::size_t k = 0; k < m.classes.size(); ++k) {
    check_cell(m.classes[k], "class name");
    cs << k << ',' << m.classes[k] << '\n';
  }
}

Manifest read_manifest(const fs::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw Error("cannot open manifest " + file.string());
  Manifest m;
  m.root = file.parent_path();
  std::string line;
  if (!std::getline(is, line)) throw FormatError("manifest " + file.string() + " is empty");
  strip_cr(line);
  if (line != kHeader) throw FormatError("manifest " + file.string() + ": unexpected header '" + line + "'");
  std::size_t lineno = 1, max_label = 0;
  while (std::getline(is, line)) {
    ++lineno;
    strip_cr(line);
    if (line.empty()) continue;
    auto c = split_csv(line);
    if (c.size() != 6) {
      throw FormatError("manifest " + file.string() + " line " + std::to_string(lineno) + ": expected 6 fields, got " +
                        std::to_string(c.size()));
    }
    SamplePair r;
    r.id = c[0];
    r.path_1bit = c[1];
    r.path_16bit = c[2];
    try {
      std::size_t pos = 0;
      r.label = std::stoul(c[3], &pos);
      if (pos != c[3].size()) throw std::invalid_argument(c[3]);
    } catch (const std::exception&) {
      throw FormatError("manifest " + file.string() + " line " + std::to_string(lineno) + ": bad label '" + c[3] + "'");
    }
    r.split = parse_split(c[4]);
    r.path_hog = c[5];
    max_label = std::max(max_label, r.label);
    m.rows.push_back(std::move(r));
  }
  std::ifstream cs(m.root / "classes.csv", std::ios::binary);
  if (cs) {
    std::getline(cs, line);
    while (std::getline(cs, line)) {
      strip_cr(line);
      if (line.empty()) continue;
      auto c = split_csv(line);
      if (c.size() != 2) throw FormatError("classes.csv: malformed line '" + line + "'");
      m.classes.push_back(c[1]);
    }
  } else {
    for (std::size_t k = 0; k <= max_label && !m.rows.empty(); ++k) m.classes.push_back("c" + std::to_string(k));
  }
  m.validate();
  return m;
}

Manifest rebase(const Manifest& m, const fs::path& new_root) {
  Manifest out = m;
  out.root = new_root;
  const fs::path base = fs::weakly_canonical(fs::absolute(new_root));
  auto re = [&](const fs::path& p) -> fs::path {
    if (p.empty()) return p;
    return fs::weakly_canonical(fs::absolute(m.resolve(p))).lexically_relative(base);
  };
  for (auto& r : out.rows) {
    r.path_1bit = re(r.path_1bit);
    r.path_16bit = re(r.path_16bit);
    r.path_hog = re(r.path_hog);
  }
  return out;
}

void save_image(const fs::path& path, const Image& img) {
  nd::save_cft(path, nd::Tensor({img.height, img.width}, img.pixels));
}

Image load_image(const fs::path& path) {
  auto t = nd::load_cft(path);
  if (t.rank() != 2) throw FormatError("image " + path.string() + " is not a rank-2 tensor");
  Image img(t.dim(0), t.dim(1));
  std::copy(t.data().begin(), t.data().end(), img.pixels.begin());
  return img;
}

void write_pgm(const fs::path& path, const Image& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> bytes(img.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const float v = std::clamp(img.pixels[i], 0.0f, 1.0f);
    bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
  }
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Image hconcat(const std::vector<Image>& panels, std::size_t gutter) {
  if (panels.empty()) return {};
  const std::size_t h = panels.front().height;
  std::size_t w = 0;
  for (const auto& p : panels) {
    if (p.height != h) throw ShapeError("hconcat: panel heights differ");
    w += p.width;
  }
  w += gutter * (panels.size() - 1);
  Image out(h, w, 1.0f);
  std::size_t x0 = 0;
  for (const auto& p : panels) {
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < p.width; ++x) out.at(y, x0 + x) = p.at(y, x);
    x0 += p.width + gutter;
  }
  return out;
}

}  // namespace cfnet::pipeline
