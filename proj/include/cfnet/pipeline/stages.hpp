#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "cfnet/features/features.hpp"
#include "cfnet/losses/losses.hpp"
#include "cfnet/metrics/metrics.hpp"
#include "cfnet/model/model.hpp"
#include "cfnet/pipeline/augment.hpp"
#include "cfnet/pipeline/checkpoint.hpp"
#include "cfnet/pipeline/manifest.hpp"

namespace cfnet::pipeline {

using Logger = std::function<void(const std::string&)>;

struct TrainConfig {
  std::size_t pretrain_epochs = 30;
  std::size_t head_epochs = 5;
  std::size_t full_epochs = 15;
  double pretrain_lr = 1e-4;
  double finetune_lr = 5e-5;
  double backbone_lr_scale = 0.1;
  double weight_decay = 0.01;
  std::size_t P = 6, K = 2;  // pretraining batches
  std::size_t batch_size = 32;  // fine-tuning batches
  std::size_t val_every = 1;  // epochs between validation passes
  std::size_t workers = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

struct PretrainConfig {
  TrainConfig train;
  double teacher_free_prob = 0.5;  // share of steps whose student decoder skips the teacher keys and values
  AugmentConfig augment;
  losses::LossWeights weights;
  model::EncoderConfig encoder;
};

struct PretrainRecord {
  std::size_t epoch = 0;
  double l_rec = 0, l_con = 0, l_align = 0, l_sep = 0, l_total = 0;
};

struct PretrainResult {
  CheckpointBundle best, final;
  std::vector<PretrainRecord> curves;
};

// Kind tags stored as meta.kind.
inline constexpr double kKindCFNet = 1, kKindClassifier = 2;

void write_encoder_meta(CheckpointBundle& b, const model::EncoderConfig& enc);
model::EncoderConfig read_encoder_meta(const CheckpointBundle& b);

// Fresh CF-Net parameters, deterministic in seed. Both decoder output biases
// start at logit(output_mean) so initial reconstructions sit at that level.
nd::ParamStore init_pretrain_params(const model::EncoderConfig& enc, std::uint64_t seed, double output_mean = 0.5);

// Mean 16-bit intensity over the rows, clamped to [1e-3, 1 - 1e-3].
double mean_intensity(const std::vector<Image>& images);

// Trains on the train split with PK batches; every loss component is logged
// each step whether or not its weight is zero. Throws NumericError naming the
// component when a loss turns non-finite.
PretrainResult pretrain(const Manifest& m, const PretrainConfig& cfg, const Logger& log = {});

void write_pretrain_curves(std::ostream& os, const std::vector<PretrainRecord>& curves);

enum class HogSource { kReconstructed, kRaw1bit, kOff };
HogSource parse_hog_source(std::string_view s);
std::string_view hog_source_name(HogSource s);

struct HogStageConfig {
  HogSource source = HogSource::kReconstructed;
  features::HogConfig hog;
  std::size_t batch_size = 32;
};

// Image the descriptor was computed from, stored next to it.
std::filesystem::path hog_source_path(const std::filesystem::path& hog_path);

// Writes out_dir/hog/<id>_hog.cft (rank-1 descriptor) and <id>_hogsrc.cft for
// every row, and out_dir/manifest.csv pointing at them. With source=off the
// manifest is copied without descriptors. cfnet is required for
// source=reconstructed.
Manifest extract_hog_stage(const Manifest& m, const std::optional<CheckpointBundle>& cfnet,
                           const HogStageConfig& cfg, const std::filesystem::path& out_dir);

enum class FocalAlpha { kNone, kInverseFrequency };
FocalAlpha parse_focal_alpha(std::string_view s);

struct FinetuneConfig {
  TrainConfig train;
  AugmentConfig augment;
  model::EncoderConfig encoder;  // must match a pretrained checkpoint when one is given
  model::ClassifierConfig classifier;
  features::HogConfig hog;  // used to recompute descriptors of augmented samples
  double focal_gamma = 2.0;
  FocalAlpha focal_alpha = FocalAlpha::kInverseFrequency;
};

struct FinetuneRecord {
  std::size_t epoch = 0;  // 1-based over both phases
  int phase = 1;
  double train_loss = 0, train_acc = 0;
  double val_acc = -1;  // negative when not evaluated
};

struct FinetuneResult {
  CheckpointBundle best, final;
  std::vector<FinetuneRecord> curves;
  double best_val_acc = 0;
  std::size_t best_epoch = 0;  // 0 means the end of the head-only phase
};

void write_classifier_meta(CheckpointBundle& b, const model::EncoderConfig& enc, const model::ClassifierConfig& c);
model::ClassifierConfig read_classifier_meta(const CheckpointBundle& b);

// pretrained == nullopt initialises the backbone from scratch.
FinetuneResult finetune(const Manifest& m, const std::optional<CheckpointBundle>& pretrained,
                        const FinetuneConfig& cfg, const Logger& log = {});

void write_finetune_curves(std::ostream& os, const std::vector<FinetuneRecord>& curves);

// Argmax predictions for the given rows (no augmentation).
std::vector<std::size_t> predict(const Manifest& m, const std::vector<std::size_t>& rows,
                                 const CheckpointBundle& classifier, std::size_t batch_size = 64);

struct EvalConfig {
  Split split = Split::kTest;
  std::size_t gallery = 6;  // triptychs written
  std::size_t batch_size = 64;
};

struct EvalResult {
  std::vector<std::size_t> rows, labels, preds;
  metrics::ConfusionMatrix confusion;
  metrics::MetricReport report;
  // Present when a CF-Net checkpoint was given.
  std::vector<double> psnr_recon, psnr_1bit;
  std::vector<Image> gallery;  // 1-bit | reconstructed | 16-bit
};

EvalResult evaluate(const Manifest& m, const CheckpointBundle& classifier, const std::optional<CheckpointBundle>& cfnet,
                    const EvalConfig& cfg);

// Student reconstructions of x1bit images (values in [0, 1]).
std::vector<Image> reconstruct(const nd::ParamStore& cfnet, const model::EncoderConfig& enc,
                               const std::vector<Image>& x1bit, std::size_t batch_size = 32);

double mean(const std::vector<double>& v);

}  // namespace cfnet::pipeline
