#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "cfnet/pipeline/dataset.hpp"
#include "cfnet/pipeline/stages.hpp"
#include "cfnet/sarsim/sarsim.hpp"

namespace cfnet::cli {

enum class KeyType { kUInt, kReal, kBool, kChoice, kUIntList };

struct KeyInfo {
  std::string key;
  KeyType type;
  std::string default_value;
  std::string help;
  std::vector<std::string> choices;  // kChoice only
};

// Every accepted key, in documentation order.
const std::vector<KeyInfo>& known_keys();

// Flat "key = value" configuration. Lines may carry '#' comments; blank lines
// are ignored. Unknown keys and malformed values raise ConfigError.
class RunConfig {
 public:
  RunConfig();

  static RunConfig from_file(const std::filesystem::path& file);
  void merge_text(std::string_view text, const std::string& origin);
  void set(const std::string& key, const std::string& value);
  // "key=value"
  void apply(std::string_view assignment);

  const std::string& get(const std::string& key) const;
  std::uint64_t get_uint(const std::string& key) const;
  double get_real(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  // Every key in documentation order, one "key = value" line each.
  std::string resolved() const;
  void write_resolved(const std::filesystem::path& file) const;

  std::uint64_t seed() const { return get_uint("seed"); }
  std::size_t workers() const { return get_uint("workers"); }
  sar::RadarParams radar() const;
  pipeline::SynthConfig dataset() const;
  model::EncoderConfig encoder() const;
  model::ClassifierConfig classifier(std::size_t num_classes) const;
  losses::LossWeights loss() const;
  pipeline::AugmentConfig augment() const;
  pipeline::TrainConfig train() const;
  features::HogConfig hog() const;
  pipeline::HogStageConfig hog_stage() const;
  pipeline::PretrainConfig pretrain() const;
  pipeline::FinetuneConfig finetune(std::size_t num_classes) const;
  pipeline::EvalConfig eval() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace cfnet::cli
