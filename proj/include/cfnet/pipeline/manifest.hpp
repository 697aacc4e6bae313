#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cfnet/errors.hpp"
#include "cfnet/sarsim/sarsim.hpp"

namespace cfnet::pipeline {

namespace fs = std::filesystem;
using sar::Image;

enum class Split { kTrain, kVal, kTest };

std::string_view split_name(Split s);
Split parse_split(std::string_view s);

// Paths are stored relative to the manifest directory.
struct SamplePair {
  std::string id;
  fs::path path_1bit, path_16bit;
  std::size_t label = 0;
  Split split = Split::kTrain;
  fs::path path_hog;  // empty when no descriptor has been extracted
};

struct Manifest {
  std::vector<SamplePair> rows;
  std::vector<std::string> classes;
  fs::path root;  // directory relative paths resolve against

  std::size_t num_classes() const { return classes.size(); }
  fs::path resolve(const fs::path& p) const { return p.is_absolute() ? p : root / p; }
  std::vector<std::size_t> indices(Split s) const;
  std::vector<std::size_t> labels(const std::vector<std::size_t>& idx) const;
  std::vector<std::size_t> class_counts(std::optional<Split> s = std::nullopt) const;
  bool has_hog() const;

  // Labels in range, unique ids, non-empty image paths.
  void validate() const;
};

// CSV "id,path_1bit,path_16bit,label,split,path_hog" plus "classes.csv"
// ("index,name") in the same directory.
void write_manifest(const Manifest& m, const fs::path& file);
Manifest read_manifest(const fs::path& file);

// Re-expresses every path of m relative to new_root.
Manifest rebase(const Manifest& m, const fs::path& new_root);

// Rank-2 float32 CFT.
void save_image(const fs::path& path, const Image& img);
Image load_image(const fs::path& path);

// Binary PGM (P5, maxval 255); values clamped to [0,1] and rounded.
void write_pgm(const fs::path& path, const Image& img);
// Side-by-side panels separated by a 2-pixel white gutter.
Image hconcat(const std::vector<Image>& panels, std::size_t gutter = 2);

}  // namespace cfnet::pipeline
