#include "cfnet/pipeline/stages.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <numeric>
#include <ostream>
#include <thread>

#if defined(__x86_64__)
#include <xmmintrin.h>
#endif

#include "cfnet/ndgrad/adamw.hpp"
#include "cfnet/ndgrad/cft.hpp"
#include "cfnet/ndgrad/ops.hpp"
#include "cfnet/pipeline/rng.hpp"
#include "cfnet/pipeline/sampling.hpp"

namespace cfnet::pipeline {

using nd::Tensor;

namespace {

constexpr std::uint64_t kStagePretrain = 1, kStageFinetune = 2;

// Flush-to-zero and denormals-are-zero for the calling thread while alive.
class FlushDenormals {
 public:
#if defined(__x86_64__)
  FlushDenormals() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | 0x8040u); }
  ~FlushDenormals() { _mm_setcsr(saved_); }

 private:
  unsigned saved_;
#endif
};

template <typename F>
void parallel_for(std::size_t n, std::size_t workers, F&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

Tensor stack(const std::vector<const Image*>& imgs) {
  const std::size_t h = imgs.front()->height, w = imgs.front()->width;
  std::vector<float> data;
  data.reserve(imgs.size() * h * w);
  for (const auto* im : imgs) {
    if (im->height != h || im->width != w) throw ShapeError("batch images differ in size");
    data.insert(data.end(), im->pixels.begin(), im->pixels.end());
  }
  return Tensor({imgs.size(), 1, h, w}, std::move(data));
}

Tensor stack_rows(const std::vector<const std::vector<float>*>& rows) {
  const std::size_t d = rows.front()->size();
  std::vector<float> data;
  data.reserve(rows.size() * d);
  for (const auto* r : rows) {
    if (r->size() != d) throw ShapeError("HOG descriptors differ in length");
    data.insert(data.end(), r->begin(), r->end());
  }
  return Tensor({rows.size(), d}, std::move(data));
}

std::vector<Image> load_images(const Manifest& m, const std::vector<std::size_t>& rows, bool one_bit,
                               std::size_t workers) {
  std::vector<Image> out(rows.size());
  parallel_for(rows.size(), workers, [&](std::size_t i) {
    const auto& r = m.rows[rows[i]];
    out[i] = load_image(m.resolve(one_bit ? r.path_1bit : r.path_16bit));
  });
  return out;
}

std::vector<std::vector<float>> load_hog(const Manifest& m, const std::vector<std::size_t>& rows) {
  std::vector<std::vector<float>> out;
  for (auto i : rows) {
    const auto& r = m.rows[i];
    if (r.path_hog.empty()) throw ValueError("row " + r.id + " has no HOG descriptor; run the hog stage first");
    auto t = nd::load_cft(m.resolve(r.path_hog));
    out.emplace_back(t.data().begin(), t.data().end());
  }
  return out;
}

std::vector<Image> load_hog_sources(const Manifest& m, const std::vector<std::size_t>& rows) {
  std::vector<Image> out;
  for (auto i : rows) out.push_back(load_image(m.resolve(hog_source_path(m.rows[i].path_hog))));
  return out;
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  auto d = logits.data();
  std::vector<std::size_t> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (d[i * c + j] > d[i * c + best]) best = j;
    out[i] = best;
  }
  return out;
}

std::vector<std::string> names_with_prefix(const nd::ParamStore& p, const std::string& prefix, bool match) {
  std::vector<std::string> out;
  for (const auto& [n, t] : p.entries())
    if ((n.rfind(prefix, 0) == 0) == match) out.push_back(n);
  return out;
}

void add_group(nd::AdamW& opt, nd::ParamStore& p, const std::vector<std::string>& names, double scale) {
  std::vector<Tensor> ts;
  for (const auto& n : names) ts.push_back(p.get(n));
  opt.add_group(names, ts, scale);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void say(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

}  // namespace

void TrainConfig::validate() const {
  if (!(pretrain_lr > 0 && finetune_lr > 0 && backbone_lr_scale >= 0)) {
    throw ConfigError("train: learning rates must be positive");
  }
  if (weight_decay < 0) throw ConfigError("train: weight_decay must be non-negative");
  if (P < 2 || K < 2) throw ConfigError("train: P and K must be at least 2");
  if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
  if (val_every == 0) throw ConfigError("train: val_every must be positive");
}

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

void write_encoder_meta(CheckpointBundle& b, const model::EncoderConfig& enc) {
  for (std::size_t i = 0; i < enc.channels.size(); ++i) {
    b.set_meta("enc.channel" + std::to_string(i), static_cast<double>(enc.channels[i]));
  }
}

model::EncoderConfig read_encoder_meta(const CheckpointBundle& b) {
  model::EncoderConfig enc;
  for (std::size_t i = 0; i < enc.channels.size(); ++i) {
    if (auto v = b.get_meta("enc.channel" + std::to_string(i))) enc.channels[i] = static_cast<std::size_t>(*v);
  }
  enc.validate();
  return enc;
}

double mean_intensity(const std::vector<Image>& images) {
  double sum = 0;
  std::size_t n = 0;
  for (const auto& img : images) {
    for (float v : img.pixels) sum += v;
    n += img.pixels.size();
  }
  return std::clamp(n ? sum / static_cast<double>(n) : 0.5, 1e-3, 1 - 1e-3);
}

nd::ParamStore init_pretrain_params(const model::EncoderConfig& enc, std::uint64_t seed, double output_mean) {
  if (!(output_mean > 0 && output_mean < 1)) throw ValueError("init_pretrain_params: output mean must lie in (0, 1)");
  nd::ParamStore p;
  model::init_cfnet(p, enc, stream_seed({seed, tag(StreamTag::kInit), kStagePretrain}));
  const auto logit = static_cast<float>(std::log(output_mean / (1 - output_mean)));
  for (const char* n : {"student.dec.out.b", "teacher.dec.out.b"}) {
    for (auto& v : p.get(n).mutable_data()) v = logit;
  }
  return p;
}

std::vector<Image> reconstruct(const nd::ParamStore& cfnet, const model::EncoderConfig& enc,
                               const std::vector<Image>& x1bit, std::size_t batch_size) {
  FlushDenormals ftz;
  std::vector<Image> out;
  out.reserve(x1bit.size());
  for (std::size_t i = 0; i < x1bit.size(); i += batch_size) {
    std::vector<const Image*> chunk;
    for (std::size_t j = i; j < std::min(x1bit.size(), i + batch_size); ++j) chunk.push_back(&x1bit[j]);
    auto y = model::student_reconstruct(cfnet, enc, stack(chunk));
    const std::size_t h = chunk.front()->height, w = chunk.front()->width;
    auto d = y.data();
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      Image im(h, w);
      std::copy(d.begin() + static_cast<long>(b * h * w), d.begin() + static_cast<long>((b + 1) * h * w),
                im.pixels.begin());
      out.push_back(std::move(im));
    }
  }
  return out;
}

PretrainResult pretrain(const Manifest& m, const PretrainConfig& cfg, const Logger& log) {
  cfg.train.validate();
  cfg.augment.validate();
  cfg.weights.validate();
  cfg.encoder.validate();
  const auto rows = m.indices(Split::kTrain);
  if (rows.empty()) throw ValueError("pretrain: the train split is empty");
  const auto labels = m.labels(rows);
  const auto x1 = load_images(m, rows, true, cfg.train.workers);
  const auto x16 = load_images(m, rows, false, cfg.train.workers);
  const std::uint64_t seed = cfg.train.seed;

  FlushDenormals ftz;
  auto params = init_pretrain_params(cfg.encoder, seed, mean_intensity(x16));
  for (auto& [n, t] : params.entries()) t.set_requires_grad(true);
  nd::AdamW opt({cfg.train.pretrain_lr, 0.9, 0.999, 1e-8, cfg.train.weight_decay});
  add_group(opt, params, names_with_prefix(params, "", true), 1.0);

  auto snapshot = [&](bool with_optimizer) {
    CheckpointBundle b;
    b.params = params.clone();
    b.set_meta("kind", kKindCFNet);
    write_encoder_meta(b, cfg.encoder);
    b.set_meta("seed", static_cast<double>(seed));
    b.set_meta("epochs", static_cast<double>(cfg.train.pretrain_epochs));
    if (with_optimizer) b.optimizer = OptimizerState::capture(opt);
    return b;
  };

  PretrainResult res;
  res.best = snapshot(false);
  double best_total = INFINITY;
  const auto& w = cfg.weights;
  const std::size_t target = cfg.augment.oversample_pretrain ? cfg.augment.oversample_target : 0;

  for (std::size_t epoch = 1; epoch <= cfg.train.pretrain_epochs; ++epoch) {
    const auto plan = oversample_plan(iota(rows.size()), labels, m.num_classes(), target,
                                      stream_seed({seed, kStagePretrain, epoch}), cfg.augment.allow_undersample);
    const auto batches = pk_batches(plan, labels, cfg.train.P, cfg.train.K, stream_seed({seed, kStagePretrain, epoch}));
    PretrainRecord rec;
    rec.epoch = epoch;
    std::size_t position = 0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto& batch = batches[bi];
      std::vector<AugmentSample> samples(batch.size());
      parallel_for(batch.size(), cfg.train.workers, [&](std::size_t j) {
        auto rng = stream({seed, tag(StreamTag::kAugment), kStagePretrain, epoch, position + j});
        samples[j] = augment({x1[batch[j]], x16[batch[j]], std::nullopt}, cfg.augment, rng);
      });
      position += batch.size();
      std::vector<const Image*> a, b;
      std::vector<std::size_t> y;
      for (std::size_t j = 0; j < batch.size(); ++j) {
        a.push_back(&samples[j].x1bit);
        b.push_back(&samples[j].x16bit);
        y.push_back(labels[batch[j]]);
      }
      const Tensor in1 = stack(a), in16 = stack(b);
      auto route = stream({seed, tag(StreamTag::kRoute), epoch, bi});
      const bool teacher_free = bernoulli(route, cfg.teacher_free_prob);

      nd::TapeF tape;
      nd::TapeF::Scope scope(tape);
      losses::LossTerms<float> terms;
      Tensor total;
      const char* stage = "forward pass";
      try {
        auto out = model::cfnet_forward(params, cfg.encoder, in16, in1, teacher_free);
        stage = "L_rec";
        terms.rec = losses::l_rec(out.x_hat_s, in16);
        stage = "L_con";
        terms.con = losses::l_con(out.x_hat_t, out.x_hat_s);
        stage = "L_align";
        terms.align = losses::l_align(out.f_t, out.f_s);
        stage = "L_sep";
        terms.sep = losses::l_sep(out.f_s, y, w.margin, w.normalize_sep);
        stage = "L_total";
        total = losses::compound(terms, w);
      } catch (const NumericError& e) {
        throw NumericError("pretrain: " + std::string(stage) + " is not finite at epoch " + std::to_string(epoch) +
                           " batch " + std::to_string(bi) + " (" + e.what() + ")");
      }
      const double vals[5] = {terms.rec->item(), terms.con->item(), terms.align->item(), terms.sep->item(),
                              total.item()};
      const char* names[5] = {"L_rec", "L_con", "L_align", "L_sep", "L_total"};
      for (int k = 0; k < 5; ++k) {
        if (!std::isfinite(vals[k])) {
          throw NumericError("pretrain: " + std::string(names[k]) + " is not finite at epoch " + std::to_string(epoch) +
                             " batch " + std::to_string(bi));
        }
      }
      tape.backward(total);
      opt.step(nd::MissingGrad::kSkip);
      rec.l_rec += vals[0];
      rec.l_con += vals[1];
      rec.l_align += vals[2];
      rec.l_sep += vals[3];
      rec.l_total += vals[4];
    }
    const double nb = static_cast<double>(std::max<std::size_t>(1, batches.size()));
    rec.l_rec /= nb;
    rec.l_con /= nb;
    rec.l_align /= nb;
    rec.l_sep /= nb;
    rec.l_total /= nb;
    res.curves.push_back(rec);
    if (rec.l_total < best_total) {
      best_total = rec.l_total;
      res.best = snapshot(false);
      res.best.set_meta("best_epoch", static_cast<double>(epoch));
    }
    say(log, "pretrain epoch " + std::to_string(epoch) + "/" + std::to_string(cfg.train.pretrain_epochs) +
                 " L_rec " + fmt(rec.l_rec) + " L_con " + fmt(rec.l_con) + " L_align " + fmt(rec.l_align) +
                 " L_sep " + fmt(rec.l_sep) + " L_total " + fmt(rec.l_total));
  }
  res.final = snapshot(true);
  return res;
}

void write_pretrain_curves(std::ostream& os, const std::vector<PretrainRecord>& curves) {
  os << "epoch,l_rec,l_con,l_align,l_sep,l_total\n";
  for (const auto& r : curves) {
    os << r.epoch << ',' << fmt(r.l_rec) << ',' << fmt(r.l_con) << ',' << fmt(r.l_align) << ',' << fmt(r.l_sep) << ','
       << fmt(r.l_total) << '\n';
  }
}

HogSource parse_hog_source(std::string_view s) {
  if (s == "reconstructed") return HogSource::kReconstructed;
  if (s == "raw1bit") return HogSource::kRaw1bit;
  if (s == "off") return HogSource::kOff;
  throw ConfigError("unknown hog source '" + std::string(s) + "' (expected reconstructed|raw1bit|off)");
}

std::string_view hog_source_name(HogSource s) {
  switch (s) {
    case HogSource::kReconstructed: return "reconstructed";
    case HogSource::kRaw1bit: return "raw1bit";
    case HogSource::kOff: return "off";
  }
  return "off";
}

std::filesystem::path hog_source_path(const std::filesystem::path& hog_path) {
  std::string s = hog_path.generic_string();
  const std::string suffix = "_hog.cft";
  if (s.size() < suffix.size() || s.compare(s.size() - suffix.size(), suffix.size(), suffix) != 0) {
    throw ValueError("HOG path " + s + " does not end in " + suffix);
  }
  return s.substr(0, s.size() - suffix.size()) + "_hogsrc.cft";
}

Manifest extract_hog_stage(const Manifest& m, const std::optional<CheckpointBundle>& cfnet, const HogStageConfig& cfg,
                           const std::filesystem::path& out_dir) {
  cfg.hog.validate();
  Manifest out = rebase(m, out_dir);
  for (auto& r : out.rows) r.path_hog.clear();
  if (cfg.source == HogSource::kOff) {
    write_manifest(out, out_dir / "manifest.csv");
    return out;
  }
  if (cfg.source == HogSource::kReconstructed && !cfnet) {
    throw ValueError("hog stage: source=reconstructed needs a pretrain checkpoint (run pretrain first)");
  }
  const auto all = iota(m.rows.size());
  auto src = load_images(m, all, true, 1);
  if (cfg.source == HogSource::kReconstructed) {
    src = reconstruct(cfnet->params, read_encoder_meta(*cfnet), src, cfg.batch_size);
  }
  std::filesystem::create_directories(out_dir / "hog");
  for (std::size_t i = 0; i < all.size(); ++i) {
    auto& r = out.rows[i];
    const auto& im = src[i];
    auto d = features::hog_extract(im.pixels, im.height, im.width, cfg.hog);
    r.path_hog = std::filesystem::path("hog") / (r.id + "_hog.cft");
    nd::save_cft(out_dir / r.path_hog, Tensor({d.size()}, d));
    save_image(out_dir / hog_source_path(r.path_hog), im);
  }
  write_manifest(out, out_dir / "manifest.csv");
  return out;
}

FocalAlpha parse_focal_alpha(std::string_view s) {
  if (s == "none") return FocalAlpha::kNone;
  if (s == "inverse_frequency") return FocalAlpha::kInverseFrequency;
  throw ConfigError("unknown focal alpha '" + std::string(s) + "' (expected none|inverse_frequency)");
}

void write_classifier_meta(CheckpointBundle& b, const model::EncoderConfig& enc, const model::ClassifierConfig& c) {
  b.set_meta("kind", kKindClassifier);
  write_encoder_meta(b, enc);
  b.set_meta("clf.num_classes", static_cast<double>(c.num_classes));
  b.set_meta("clf.scales_used", static_cast<double>(c.scales_used));
  b.set_meta("clf.use_hog", c.use_hog ? 1.0 : 0.0);
  b.set_meta("clf.hog_dim", static_cast<double>(c.hog_dim));
  b.set_meta("clf.embed", static_cast<double>(c.embed));
  b.set_meta("clf.hog_hidden", static_cast<double>(c.hog_hidden));
}

model::ClassifierConfig read_classifier_meta(const CheckpointBundle& b) {
  if (b.require_meta("kind") != kKindClassifier) throw FormatError("checkpoint is not a classifier checkpoint");
  model::ClassifierConfig c;
  c.num_classes = static_cast<std::size_t>(b.require_meta("clf.num_classes"));
  c.scales_used = static_cast<std::size_t>(b.require_meta("clf.scales_used"));
  c.use_hog = b.require_meta("clf.use_hog") != 0.0;
  c.hog_dim = static_cast<std::size_t>(b.require_meta("clf.hog_dim"));
  c.embed = static_cast<std::size_t>(b.require_meta("clf.embed"));
  c.hog_hidden = static_cast<std::size_t>(b.require_meta("clf.hog_hidden"));
  c.validate();
  return c;
}

namespace {

struct EvalSet {
  std::vector<Image> x1;
  std::vector<std::vector<float>> hog;
  std::vector<std::size_t> labels;
};

std::vector<std::size_t> predict_set(const nd::ParamStore& params, const model::EncoderConfig& enc,
                                     const model::ClassifierConfig& clf, const EvalSet& s, std::size_t batch_size) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < s.x1.size(); i += batch_size) {
    const std::size_t end = std::min(s.x1.size(), i + batch_size);
    std::vector<const Image*> imgs;
    std::vector<const std::vector<float>*> hogs;
    for (std::size_t j = i; j < end; ++j) {
      imgs.push_back(&s.x1[j]);
      if (clf.use_hog) hogs.push_back(&s.hog[j]);
    }
    std::optional<Tensor> h;
    if (clf.use_hog) h = stack_rows(hogs);
    auto p = argmax_rows(model::classifier_forward(params, enc, clf, stack(imgs), h));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

double accuracy(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  if (a.empty()) return 0.0;
  std::size_t ok = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ok += a[i] == b[i];
  return static_cast<double>(ok) / static_cast<double>(a.size());
}

EvalSet load_eval_set(const Manifest& m, const std::vector<std::size_t>& rows, bool use_hog) {
  EvalSet s;
  s.x1 = load_images(m, rows, true, 1);
  if (use_hog) s.hog = load_hog(m, rows);
  s.labels = m.labels(rows);
  return s;
}

}  // namespace

FinetuneResult finetune(const Manifest& m, const std::optional<CheckpointBundle>& pretrained,
                        const FinetuneConfig& cfg, const Logger& log) {
  FlushDenormals ftz;
  cfg.train.validate();
  cfg.augment.validate();
  cfg.classifier.validate();
  const auto& clf = cfg.classifier;
  const auto& enc = cfg.encoder;
  enc.validate();
  if (clf.num_classes != m.num_classes()) {
    throw ConfigError("finetune: classifier has " + std::to_string(clf.num_classes) + " classes, manifest has " +
                      std::to_string(m.num_classes()));
  }
  if (pretrained) {
    if (pretrained->get_meta("kind").value_or(kKindCFNet) != kKindCFNet) {
      throw FormatError("finetune: initial checkpoint is not a pretrain (CF-Net) checkpoint");
    }
    if (read_encoder_meta(*pretrained).channels != enc.channels) {
      throw ConfigError("finetune: encoder channels differ from the pretrain checkpoint");
    }
  }
  if (clf.use_hog && !m.has_hog()) {
    throw ValueError("finetune: the manifest has no HOG descriptors; run the hog stage first or set hog.source=off");
  }
  const auto rows = m.indices(Split::kTrain);
  const auto val_rows = m.indices(Split::kVal);
  if (rows.empty()) throw ValueError("finetune: the train split is empty");
  const auto labels = m.labels(rows);
  const auto x1 = load_images(m, rows, true, cfg.train.workers);
  std::vector<std::vector<float>> hog;
  std::vector<Image> hog_src;
  if (clf.use_hog) {
    hog = load_hog(m, rows);
    hog_src = load_hog_sources(m, rows);
    if (hog.front().size() != clf.hog_dim) {
      throw ShapeError("finetune: HOG descriptors have length " + std::to_string(hog.front().size()) +
                       " but the classifier expects " + std::to_string(clf.hog_dim));
    }
    const auto& im = hog_src.front();
    if (cfg.hog.descriptor_length(im.height, im.width) != clf.hog_dim) {
      throw ShapeError("finetune: hog.* settings give descriptors of length " +
                       std::to_string(cfg.hog.descriptor_length(im.height, im.width)) + ", classifier expects " +
                       std::to_string(clf.hog_dim));
    }
  }
  const EvalSet val = load_eval_set(m, val_rows, clf.use_hog);
  const std::uint64_t seed = cfg.train.seed;

  nd::ParamStore params;
  model::init_classifier(params, enc, clf, stream_seed({seed, tag(StreamTag::kInit), kStageFinetune}));
  if (pretrained) model::load_backbone(params, pretrained->params);

  std::vector<double> alpha;
  if (cfg.focal_alpha == FocalAlpha::kInverseFrequency) {
    alpha = losses::inverse_frequency_alpha(m.class_counts(Split::kTrain));
  }

  auto snapshot = [&](const nd::AdamW* opt) {
    CheckpointBundle b;
    b.params = params.clone();
    write_classifier_meta(b, enc, clf);
    b.set_meta("seed", static_cast<double>(seed));
    b.set_meta("init_pretrained", pretrained ? 1.0 : 0.0);
    if (opt) b.optimizer = OptimizerState::capture(*opt);
    return b;
  };
  auto validate_now = [&] { return val.x1.empty() ? -1.0 : accuracy(predict_set(params, enc, clf, val, 64), val.labels); };

  FinetuneResult res;
  const std::size_t target = cfg.augment.oversample_finetune ? cfg.augment.oversample_target : 0;
  const std::size_t total_epochs = cfg.train.head_epochs + cfg.train.full_epochs;

  auto run_epoch = [&](std::size_t epoch, int phase, nd::AdamW& opt) {
    const auto plan = oversample_plan(iota(rows.size()), labels, m.num_classes(), target,
                                      stream_seed({seed, kStageFinetune, epoch}), cfg.augment.allow_undersample);
    const auto batches = chunk_batches(plan, cfg.train.batch_size);
    FinetuneRecord rec;
    rec.epoch = epoch;
    rec.phase = phase;
    std::size_t position = 0, correct = 0;
    double loss_sum = 0;
    for (const auto& batch : batches) {
      std::vector<AugmentSample> samples(batch.size());
      std::vector<std::vector<float>> descr(batch.size());
      parallel_for(batch.size(), cfg.train.workers, [&](std::size_t j) {
        auto rng = stream({seed, tag(StreamTag::kAugment), kStageFinetune, epoch, position + j});
        AugmentSample s{x1[batch[j]], Image{}, std::nullopt};
        if (clf.use_hog) s.aux = hog_src[batch[j]];
        samples[j] = augment(std::move(s), cfg.augment, rng);
        if (clf.use_hog) {
          const auto& a = *samples[j].aux;
          descr[j] = features::hog_extract(a.pixels, a.height, a.width, cfg.hog);
        }
      });
      position += batch.size();
      std::vector<const Image*> imgs;
      std::vector<const std::vector<float>*> hogs;
      std::vector<std::size_t> y;
      for (std::size_t j = 0; j < batch.size(); ++j) {
        imgs.push_back(&samples[j].x1bit);
        if (clf.use_hog) hogs.push_back(&descr[j]);
        y.push_back(labels[batch[j]]);
      }
      std::optional<Tensor> h;
      if (clf.use_hog) h = stack_rows(hogs);
      nd::TapeF tape;
      nd::TapeF::Scope scope(tape);
      Tensor logits, loss;
      try {
        logits = model::classifier_forward(params, enc, clf, stack(imgs), h);
        loss = losses::focal_loss(logits, y, cfg.focal_gamma, alpha);
      } catch (const NumericError& e) {
        throw NumericError("finetune: focal loss is not finite at epoch " + std::to_string(epoch) + " (" + e.what() + ")");
      }
      tape.backward(loss);
      opt.step(nd::MissingGrad::kSkip);
      loss_sum += loss.item() * static_cast<double>(batch.size());
      const auto pred = argmax_rows(logits);
      for (std::size_t j = 0; j < y.size(); ++j) correct += pred[j] == y[j];
    }
    rec.train_loss = plan.empty() ? 0.0 : loss_sum / static_cast<double>(plan.size());
    rec.train_acc = plan.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(plan.size());
    const bool last = epoch == total_epochs;
    if (epoch % cfg.train.val_every == 0 || last || epoch == cfg.train.head_epochs) rec.val_acc = validate_now();
    res.curves.push_back(rec);
    say(log, "finetune epoch " + std::to_string(epoch) + "/" + std::to_string(total_epochs) + " phase " +
                 std::to_string(phase) + " loss " + fmt(rec.train_loss) + " train_acc " + fmt(rec.train_acc) +
                 " val_acc " + fmt(rec.val_acc));
    return rec;
  };

  // Phase 1: head only.
  params.set_requires_grad("", true);
  params.set_requires_grad("backbone.", false);
  nd::AdamW head_opt({cfg.train.finetune_lr, 0.9, 0.999, 1e-8, cfg.train.weight_decay});
  const auto head_names = names_with_prefix(params, "backbone.", false);
  const auto backbone_names = names_with_prefix(params, "backbone.", true);
  add_group(head_opt, params, head_names, 1.0);
  double val_acc = -1;
  for (std::size_t e = 1; e <= cfg.train.head_epochs; ++e) val_acc = run_epoch(e, 1, head_opt).val_acc;
  if (cfg.train.head_epochs == 0) val_acc = validate_now();
  res.best = snapshot(nullptr);
  res.best_val_acc = val_acc;
  res.best_epoch = 0;

  // Phase 2: everything, backbone at a reduced rate.
  params.set_requires_grad("", true);
  nd::AdamW full_opt({cfg.train.finetune_lr, 0.9, 0.999, 1e-8, cfg.train.weight_decay});
  add_group(full_opt, params, backbone_names, cfg.train.backbone_lr_scale);
  add_group(full_opt, params, head_names, 1.0);
  for (std::size_t e = cfg.train.head_epochs + 1; e <= total_epochs; ++e) {
    const auto rec = run_epoch(e, 2, full_opt);
    if (rec.val_acc > res.best_val_acc) {
      res.best_val_acc = rec.val_acc;
      res.best_epoch = e;
      res.best = snapshot(nullptr);
    }
  }
  res.best.set_meta("best_epoch", static_cast<double>(res.best_epoch));
  res.best.set_meta("best_val_acc", res.best_val_acc);
  res.final = snapshot(cfg.train.full_epochs > 0 ? &full_opt : &head_opt);
  params.set_requires_grad("", false);
  return res;
}

void write_finetune_curves(std::ostream& os, const std::vector<FinetuneRecord>& curves) {
  os << "epoch,phase,train_loss,train_acc,val_acc\n";
  for (const auto& r : curves) {
    os << r.epoch << ',' << r.phase << ',' << fmt(r.train_loss) << ',' << fmt(r.train_acc) << ','
       << (r.val_acc < 0 ? std::string("NA") : fmt(r.val_acc)) << '\n';
  }
}

std::vector<std::size_t> predict(const Manifest& m, const std::vector<std::size_t>& rows,
                                 const CheckpointBundle& classifier, std::size_t batch_size) {
  FlushDenormals ftz;
  const auto clf = read_classifier_meta(classifier);
  const auto enc = read_encoder_meta(classifier);
  if (rows.empty()) return {};
  const auto s = load_eval_set(m, rows, clf.use_hog);
  return predict_set(classifier.params, enc, clf, s, batch_size);
}

EvalResult evaluate(const Manifest& m, const CheckpointBundle& classifier, const std::optional<CheckpointBundle>& cfnet,
                    const EvalConfig& cfg) {
  const auto clf = read_classifier_meta(classifier);
  if (clf.num_classes != m.num_classes()) throw ConfigError("eval: classifier and manifest class counts differ");
  EvalResult r;
  r.rows = m.indices(cfg.split);
  if (r.rows.empty()) throw ValueError("eval: the " + std::string(split_name(cfg.split)) + " split is empty");
  r.labels = m.labels(r.rows);
  r.preds = predict(m, r.rows, classifier, cfg.batch_size);
  r.confusion = metrics::confusion(r.preds, r.labels, m.num_classes());
  r.report = metrics::report(r.confusion);
  if (cfnet) {
    const auto x1 = load_images(m, r.rows, true, 1);
    const auto x16 = load_images(m, r.rows, false, 1);
    const auto rec = reconstruct(cfnet->params, read_encoder_meta(*cfnet), x1, cfg.batch_size);
    for (std::size_t i = 0; i < r.rows.size(); ++i) {
      r.psnr_recon.push_back(metrics::psnr(rec[i].pixels, x16[i].pixels));
      r.psnr_1bit.push_back(metrics::psnr(x1[i].pixels, x16[i].pixels));
    }
    // round-robin over classes so every class appears in the gallery
    std::vector<std::vector<std::size_t>> by_class(m.num_classes());
    for (std::size_t i = 0; i < r.rows.size(); ++i) by_class[r.labels[i]].push_back(i);
    for (std::size_t k = 0; r.gallery.size() < std::min(cfg.gallery, r.rows.size()); ++k) {
      for (const auto& c : by_class) {
        if (k < c.size() && r.gallery.size() < cfg.gallery) r.gallery.push_back(hconcat({x1[c[k]], rec[c[k]], x16[c[k]]}));
      }
    }
  }
  return r;
}

}  // namespace cfnet::pipeline
