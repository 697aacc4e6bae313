#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cfnet/ndgrad/adamw.hpp"
#include "cfnet/ndgrad/params.hpp"

// Checkpoint file:
//   "CFCK" | version u8 = 1 | u32 entry count | entries
//   entry = u16 name length | UTF-8 name | CFT tensor blob
// Parameters keep their own names; scalar metadata is stored as float64
// "meta.<key>" entries and optimizer state as "optim.*" entries.
namespace cfnet::pipeline {

inline constexpr std::uint8_t kCheckpointVersion = 1;

struct OptimizerState {
  std::uint64_t steps = 0;
  struct Slot {
    std::string name;
    std::vector<float> m, v;
    double lr_scale = 1.0;
  };
  std::vector<Slot> slots;

  static OptimizerState capture(const nd::AdamW& opt);
  // Slots are matched by name; every slot of opt must be present.
  void restore(nd::AdamW& opt) const;
};

struct CheckpointBundle {
  nd::ParamStore params;
  std::vector<std::pair<std::string, double>> meta;
  std::optional<OptimizerState> optimizer;

  void set_meta(const std::string& key, double value);
  std::optional<double> get_meta(const std::string& key) const;
  double require_meta(const std::string& key) const;
};

void write_checkpoint(std::ostream& os, const CheckpointBundle& b);
CheckpointBundle read_checkpoint(std::istream& is);
void checkpoint_save(const CheckpointBundle& b, const std::filesystem::path& path);
CheckpointBundle checkpoint_load(const std::filesystem::path& path);

}  // namespace cfnet::pipeline
