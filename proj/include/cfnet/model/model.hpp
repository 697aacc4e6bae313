#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cfnet/ndgrad/params.hpp"
#include "cfnet/ndgrad/tensor.hpp"

namespace cfnet::model {

using nd::ParamStore;
using nd::Tensor;

struct EncoderConfig {
  std::vector<std::size_t> channels{8, 16, 32, 64, 128};

  void validate() const;
  std::size_t bottleneck() const { return channels.back(); }
  static constexpr std::size_t kStages = 5;
  static constexpr std::size_t kDivisor = 32;  // input side must be a multiple of 2^stages
};

// Parameter layout (dotted names):
//   <p>.enc.stage{i}.{w,b}                 conv3x3 stride 2, i = 0..4
//   attn.{wq,wk,wv,wo}                     [C, C], row-vector convention y = x W
//   <p>.dec.up{k}.{w,b}, <p>.dec.conv{k}.{w,b}   k = 3..0
//   <p>.dec.final_up.{w,b}, <p>.dec.out.{w,b}
// with <p> in {student, teacher}.
void init_cfnet(ParamStore& params, const EncoderConfig& cfg, std::uint64_t seed);

// Accepts [B,1,H,W] or [1,H,W]; returns s0..s4.
std::vector<Tensor> encoder_forward(const ParamStore& params, const std::string& prefix, const Tensor& image,
                                    const EncoderConfig& cfg);

struct Attention {
  Tensor fused;    // f_S + W_O(A V), same shape as f_S
  Tensor weights;  // A, [B, L, L]
};

// Query from f_s, key and value from f_t.
Attention cross_attention(const ParamStore& params, const Tensor& f_s, const Tensor& f_t);

// image is the encoder input, concatenated after the last upsampling stage.
Tensor decoder_forward(const ParamStore& params, const std::string& prefix, const Tensor& bottleneck,
                       const std::vector<Tensor>& skips, const Tensor& image, const EncoderConfig& cfg);

struct CFNetOutputs {
  Tensor x_hat_t, x_hat_s, f_t, f_s;
};

// teacher_free_student routes the student decoder through the self-attention
// path of student_reconstruct instead of the teacher keys and values.
CFNetOutputs cfnet_forward(const ParamStore& params, const EncoderConfig& cfg, const Tensor& x_16bit,
                           const Tensor& x_1bit, bool teacher_free_student = false);

// Teacher-free path: self-attention on the student bottleneck.
Tensor student_reconstruct(const ParamStore& params, const EncoderConfig& cfg, const Tensor& x_1bit);

struct ClassifierConfig {
  std::size_t num_classes = 6;
  std::size_t scales_used = 5;  // deepest k scales enter the average
  bool use_hog = true;
  std::size_t hog_dim = 1764;
  std::size_t embed = 128;
  std::size_t hog_hidden = 256;

  void validate() const;
  std::size_t first_scale() const { return EncoderConfig::kStages - scales_used; }
};

// Layout: backbone.stage{i}.{w,b}, clf.p{i}.{w,b} for used scales,
// clf.hog.fc{1,2}.{w,b} when use_hog, clf.fuse.{w,b}, clf.head.{w,b}.
void init_classifier(ParamStore& params, const EncoderConfig& enc, const ClassifierConfig& cfg, std::uint64_t seed);

// Copies student.enc.* of a pretrained CFNet store into backbone.*.
void load_backbone(ParamStore& classifier, const ParamStore& cfnet);

// Mean of equally shaped scale vectors.
Tensor scale_average(const std::vector<Tensor>& vectors);

// hog: [B, hog_dim] when cfg.use_hog, ignored otherwise. Returns [B, num_classes].
Tensor classifier_forward(const ParamStore& params, const EncoderConfig& enc, const ClassifierConfig& cfg,
                          const Tensor& x_1bit, const std::optional<Tensor>& hog);

// y = x W + b for x [B, in], W [in, out].
Tensor linear(const ParamStore& params, const std::string& name, const Tensor& x);

}  // namespace cfnet::model
