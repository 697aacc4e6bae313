#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "cfnet/pipeline/manifest.hpp"
#include "cfnet/sarsim/sarsim.hpp"

namespace cfnet::pipeline {

enum class Imbalance { kBalanced, kTable1 };

Imbalance parse_imbalance(std::string_view s);

// Ground truth written as the 16-bit image: the full-precision RDA re-image, or
// the rendered reflectivity map scaled to peak 1.
enum class GtSource { kRda, kOriginal };

GtSource parse_gt_source(std::string_view s);

// Class ratios of the FUSAR-Ship six-class subset used by the imbalance profile.
inline constexpr std::size_t kTable1Counts[6] = {50, 50, 54, 785, 148, 56};

struct SynthConfig {
  std::size_t num_classes = 6;
  std::size_t per_class = 34;
  std::size_t size = 64;
  std::uint64_t seed = 0;
  Imbalance imbalance = Imbalance::kBalanced;
  GtSource gt_source = GtSource::kRda;
  double train_frac = 0.7;
  double val_frac = 0.15;  // test gets the remainder
  std::size_t workers = 1;

  void validate() const;
};

// Per-class sample counts: per_class each, or the table1 ratios scaled by
// per_class / 50 (round half up).
std::vector<std::size_t> class_sizes(const SynthConfig& cfg);

struct SplitCounts {
  std::vector<std::size_t> train, val, test;
  std::size_t total(Split s) const;
};

// train_c = round_half_up(train_frac * n_c) per class. The validation total
// round_half_up(val_frac * N) is distributed over classes by largest remainder
// of val_frac * n_c (ties to the lower class index), capped by what train left.
SplitCounts split_counts(const std::vector<std::size_t>& sizes, double train_frac, double val_frac);

// Target family names, one per class index (up to 10).
const std::vector<std::string>& family_names();

// Random pose/scale/weight instance of a family on a size x size grid, values in [0,1].
sar::ReflectivityMap render_target(std::size_t family, std::size_t size, std::mt19937_64& rng);

// Rows, ids, labels and splits without rendering anything.
Manifest plan_dataset(const SynthConfig& cfg);

// Renders every row through sar::generate_pair and writes
//   out_dir/manifest.csv, out_dir/classes.csv,
//   out_dir/images/<id>_{1bit,16bit,target}.cft
Manifest synth_dataset(const SynthConfig& cfg, const sar::RadarParams& params, const std::filesystem::path& out_dir);

}  // namespace cfnet::pipeline
