#include "cfnet/model/model.hpp"

#include <cmath>
#include <random>

#include "cfnet/ndgrad/ops.hpp"

namespace cfnet::model {

using nd::Conv2dAttrs;
using nd::Shape;

namespace {

std::string stage(const std::string& prefix, std::size_t i) {
  return prefix + ".stage" + std::to_string(i);
}

void add_conv(ParamStore& p, const std::string& name, std::size_t cout, std::size_t cin, std::size_t k,
              std::mt19937_64& rng) {
  p.add(name + ".w", nd::kaiming_uniform({cout, cin, k, k}, cin * k * k, rng));
  p.add(name + ".b", Tensor::zeros({cout}));
}

// Transposed conv weights are [Cin, Cout, k, k]; fan-in counts the inputs
// reaching one output pixel for stride == k.
void add_tconv(ParamStore& p, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
               std::mt19937_64& rng) {
  p.add(name + ".w", nd::kaiming_uniform({cin, cout, k, k}, cin, rng));
  p.add(name + ".b", Tensor::zeros({cout}));
}

void add_linear(ParamStore& p, const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng) {
  p.add(name + ".w", nd::kaiming_uniform({in, out}, in, rng));
  p.add(name + ".b", Tensor::zeros({out}));
}

void add_encoder(ParamStore& p, const std::string& prefix, const EncoderConfig& cfg, std::mt19937_64& rng) {
  std::size_t cin = 1;
  for (std::size_t i = 0; i < EncoderConfig::kStages; ++i) {
    add_conv(p, stage(prefix, i), cfg.channels[i], cin, 3, rng);
    cin = cfg.channels[i];
  }
}

void add_decoder(ParamStore& p, const std::string& prefix, const EncoderConfig& cfg, std::mt19937_64& rng) {
  std::size_t cur = cfg.bottleneck();
  for (std::size_t k = EncoderConfig::kStages - 1; k-- > 0;) {
    const std::size_t c = cfg.channels[k];
    add_tconv(p, prefix + ".up" + std::to_string(k), cur, c, 2, rng);
    add_conv(p, prefix + ".conv" + std::to_string(k), c, 2 * c, 3, rng);
    cur = c;
  }
  add_tconv(p, prefix + ".final_up", cur, cur, 2, rng);
  add_conv(p, prefix + ".out", 1, cur + 1, 3, rng);
}

Tensor batched(const Tensor& x, const char* who) {
  if (x.rank() == 3) return nd::reshape(x, Shape{1, x.dim(0), x.dim(1), x.dim(2)});
  if (x.rank() != 4) throw ShapeError(std::string(who) + ": expected [B,1,H,W] or [1,H,W], got " + nd::to_string(x.shape()));
  return x;
}

Tensor conv(const ParamStore& p, const std::string& name, const Tensor& x, std::size_t stride, std::size_t pad) {
  return nd::conv2d(x, p.get(name + ".w"), p.get(name + ".b"), Conv2dAttrs{stride, pad});
}

Tensor tconv(const ParamStore& p, const std::string& name, const Tensor& x) {
  return nd::conv_transpose2d(x, p.get(name + ".w"), p.get(name + ".b"), Conv2dAttrs{2, 0});
}

// [B,C,h,w] -> [B,L,C]
Tensor tokens(const Tensor& f) {
  const std::size_t b = f.dim(0), c = f.dim(1), l = f.dim(2) * f.dim(3);
  return nd::transpose(nd::reshape(f, Shape{b, c, l}));
}

}  // namespace

void EncoderConfig::validate() const {
  if (channels.size() != kStages) {
    throw ConfigError("model: encoder needs exactly 5 stage channel counts, got " + std::to_string(channels.size()));
  }
  for (std::size_t i = 0; i < channels.size(); ++i) {
    if (channels[i] == 0 || (i && channels[i] <= channels[i - 1])) {
      throw ConfigError("model: encoder channels must be positive and strictly increasing");
    }
  }
}

void init_cfnet(ParamStore& params, const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  add_encoder(params, "student.enc", cfg, rng);
  add_encoder(params, "teacher.enc", cfg, rng);
  const std::size_t c = cfg.bottleneck();
  for (const char* n : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) {
    params.add(n, nd::kaiming_uniform({c, c}, c, rng));
  }
  add_decoder(params, "student.dec", cfg, rng);
  add_decoder(params, "teacher.dec", cfg, rng);
}

std::vector<Tensor> encoder_forward(const ParamStore& params, const std::string& prefix, const Tensor& image,
                                    const EncoderConfig& cfg) {
  cfg.validate();
  Tensor x = batched(image, "encoder_forward");
  if (x.dim(1) != 1) throw ShapeError("encoder_forward: expected one input channel, got " + std::to_string(x.dim(1)));
  if (x.dim(2) % EncoderConfig::kDivisor || x.dim(3) % EncoderConfig::kDivisor) {
    throw ShapeError("encoder_forward: H and W must be multiples of 32, got " + nd::to_string(x.shape()));
  }
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < EncoderConfig::kStages; ++i) {
    x = nd::relu(conv(params, stage(prefix, i), x, 2, 1));
    out.push_back(x);
  }
  return out;
}

Attention cross_attention(const ParamStore& params, const Tensor& f_s, const Tensor& f_t) {
  if (f_s.shape() != f_t.shape() || f_s.rank() != 4) {
    throw ShapeError("cross_attention: bottlenecks must share a [B,C,h,w] shape, got " + nd::to_string(f_s.shape()) +
                     " and " + nd::to_string(f_t.shape()));
  }
  const std::size_t c = f_s.dim(1);
  const Tensor& wq = params.get("attn.wq");
  if (wq.dim(0) != c) throw ShapeError("cross_attention: projection size does not match channels");
  auto xs = tokens(f_s), xt = tokens(f_t);
  auto q = nd::matmul(xs, wq);
  auto k = nd::matmul(xt, params.get("attn.wk"));
  auto v = nd::matmul(xt, params.get("attn.wv"));
  auto scores = nd::scale(nd::matmul(q, nd::transpose(k)), static_cast<float>(1.0 / std::sqrt(double(c))));
  auto a = nd::softmax(scores);
  auto o = nd::matmul(nd::matmul(a, v), params.get("attn.wo"));
  auto back = nd::reshape(nd::transpose(o), f_s.shape());
  return {nd::add(f_s, back), a};
}

Tensor decoder_forward(const ParamStore& params, const std::string& prefix, const Tensor& bottleneck,
                       const std::vector<Tensor>& skips, const Tensor& image, const EncoderConfig& cfg) {
  if (bottleneck.rank() != 4 || bottleneck.dim(1) != cfg.bottleneck()) {
    throw ShapeError("decoder_forward: bottleneck must be [B," + std::to_string(cfg.bottleneck()) + ",h,w], got " +
                     nd::to_string(bottleneck.shape()));
  }
  if (skips.size() < EncoderConfig::kStages - 1) throw ShapeError("decoder_forward: needs skips s0..s3");
  Tensor x = bottleneck;
  for (std::size_t k = EncoderConfig::kStages - 1; k-- > 0;) {
    x = tconv(params, prefix + ".up" + std::to_string(k), x);
    if (x.shape() != skips[k].shape()) {
      throw ShapeError("decoder_forward: skip s" + std::to_string(k) + " is " + nd::to_string(skips[k].shape()) +
                       ", upsampled path is " + nd::to_string(x.shape()));
    }
    x = nd::concat(std::vector<Tensor>{x, skips[k]}, 1);
    x = nd::relu(conv(params, prefix + ".conv" + std::to_string(k), x, 1, 1));
  }
  x = nd::relu(tconv(params, prefix + ".final_up", x));
  const Tensor in = batched(image, "decoder_forward");
  if (in.rank() != 4 || in.dim(0) != x.dim(0) || in.dim(1) != 1 || in.dim(2) != x.dim(2) || in.dim(3) != x.dim(3)) {
    throw ShapeError("decoder_forward: input image is " + nd::to_string(in.shape()) + ", upsampled path is " +
                     nd::to_string(x.shape()));
  }
  return nd::sigmoid(conv(params, prefix + ".out", nd::concat(std::vector<Tensor>{x, in}, 1), 1, 1));
}

CFNetOutputs cfnet_forward(const ParamStore& params, const EncoderConfig& cfg, const Tensor& x_16bit,
                           const Tensor& x_1bit, bool teacher_free_student) {
  auto hi = batched(x_16bit, "cfnet_forward");
  auto lo = batched(x_1bit, "cfnet_forward");
  if (hi.shape() != lo.shape()) {
    throw ShapeError("cfnet_forward: inputs differ, " + nd::to_string(hi.shape()) + " vs " + nd::to_string(lo.shape()));
  }
  auto st = encoder_forward(params, "student.enc", lo, cfg);
  auto te = encoder_forward(params, "teacher.enc", hi, cfg);
  const Tensor& f_s = st.back();
  const Tensor& f_t = te.back();
  auto fused_s = cross_attention(params, f_s, teacher_free_student ? f_s : f_t).fused;
  auto fused_t = cross_attention(params, f_t, f_t).fused;
  CFNetOutputs out;
  out.x_hat_s = decoder_forward(params, "student.dec", fused_s, st, lo, cfg);
  out.x_hat_t = decoder_forward(params, "teacher.dec", fused_t, te, hi, cfg);
  out.f_s = f_s;
  out.f_t = f_t;
  return out;
}

Tensor student_reconstruct(const ParamStore& params, const EncoderConfig& cfg, const Tensor& x_1bit) {
  auto st = encoder_forward(params, "student.enc", x_1bit, cfg);
  auto fused = cross_attention(params, st.back(), st.back()).fused;
  return decoder_forward(params, "student.dec", fused, st, x_1bit, cfg);
}

void ClassifierConfig::validate() const {
  if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
  if (scales_used < 1 || scales_used > EncoderConfig::kStages) throw ConfigError("model: scales_used must be in 1..5");
  if (embed == 0 || hog_hidden == 0) throw ConfigError("model: layer widths must be positive");
  if (use_hog && hog_dim == 0) throw ConfigError("model: hog_dim must be positive when HOG is used");
}

void init_classifier(ParamStore& params, const EncoderConfig& enc, const ClassifierConfig& cfg, std::uint64_t seed) {
  enc.validate();
  cfg.validate();
  std::mt19937_64 rng(seed);
  add_encoder(params, "backbone", enc, rng);
  for (std::size_t i = cfg.first_scale(); i < EncoderConfig::kStages; ++i) {
    add_linear(params, "clf.p" + std::to_string(i), enc.channels[i], cfg.embed, rng);
  }
  if (cfg.use_hog) {
    add_linear(params, "clf.hog.fc1", cfg.hog_dim, cfg.hog_hidden, rng);
    add_linear(params, "clf.hog.fc2", cfg.hog_hidden, cfg.embed, rng);
  }
  add_linear(params, "clf.fuse", cfg.use_hog ? 2 * cfg.embed : cfg.embed, cfg.embed, rng);
  add_linear(params, "clf.head", cfg.embed, cfg.num_classes, rng);
}

void load_backbone(ParamStore& classifier, const ParamStore& cfnet) {
  classifier.copy_prefix(cfnet, "student.enc.", "backbone.");
}

Tensor linear(const ParamStore& params, const std::string& name, const Tensor& x) {
  return nd::add(nd::matmul(x, params.get(name + ".w")), params.get(name + ".b"));
}

Tensor scale_average(const std::vector<Tensor>& vectors) {
  if (vectors.empty()) throw ShapeError("scale_average: no inputs");
  Tensor acc = vectors[0];
  for (std::size_t i = 1; i < vectors.size(); ++i) acc = nd::add(acc, vectors[i]);
  return vectors.size() == 1 ? acc : nd::scale(acc, 1.0f / static_cast<float>(vectors.size()));
}

Tensor classifier_forward(const ParamStore& params, const EncoderConfig& enc, const ClassifierConfig& cfg,
                          const Tensor& x_1bit, const std::optional<Tensor>& hog) {
  cfg.validate();
  auto scales = encoder_forward(params, "backbone", x_1bit, enc);
  std::vector<Tensor> v;
  for (std::size_t i = cfg.first_scale(); i < EncoderConfig::kStages; ++i) {
    v.push_back(linear(params, "clf.p" + std::to_string(i), nd::global_avg_pool(scales[i])));
  }
  Tensor fused = scale_average(v);
  if (cfg.use_hog) {
    if (!hog) throw ShapeError("classifier_forward: HOG branch enabled but no descriptor given");
    const std::size_t b = fused.dim(0);
    if (hog->rank() != 2 || hog->dim(0) != b || hog->dim(1) != cfg.hog_dim) {
      throw ShapeError("classifier_forward: HOG input must be [" + std::to_string(b) + "x" +
                       std::to_string(cfg.hog_dim) + "], got " + nd::to_string(hog->shape()));
    }
    auto h = linear(params, "clf.hog.fc2", nd::relu(linear(params, "clf.hog.fc1", *hog)));
    fused = nd::concat(std::vector<Tensor>{fused, h}, 1);
  }
  auto z = nd::relu(linear(params, "clf.fuse", fused));
  return linear(params, "clf.head", z);
}

}  // namespace cfnet::model
