#include "cfnet/cli/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "cfnet/errors.hpp"

namespace cfnet::cli {

namespace {

using K = KeyType;

std::vector<KeyInfo> build_keys() {
  std::vector<KeyInfo> k = {
      {"seed", K::kUInt, "0", "global seed; every random stream derives from it", {}},
      {"workers", K::kUInt, "1", "threads for dataset synthesis and augmentation", {}},

      {"radar.wavelength", K::kReal, "0.055", "carrier wavelength (m)", {}},
      {"radar.chirp_rate", K::kReal, "5e10", "range chirp rate K_r (Hz/s)", {}},
      {"radar.pulse_duration", K::kReal, "3e-05", "pulse duration T_p (s)", {}},
      {"radar.sample_rate", K::kReal, "2e6", "range sampling rate f_s (Hz)", {}},
      {"radar.prf", K::kReal, "0", "pulse repetition frequency (Hz); 0 = sqrt(K_a * N_azimuth)", {}},
      {"radar.velocity", K::kReal, "150", "platform velocity (m/s)", {}},
      {"radar.ref_range", K::kReal, "10000", "scene centre range R_0 (m)", {}},
      {"radar.range_spacing", K::kReal, "0", "scene pixel spacing in range (m); 0 = c / (2 f_s)", {}},
      {"radar.azimuth_spacing", K::kReal, "0", "scene pixel spacing in azimuth (m); 0 = v / prf", {}},
      {"radar.migration", K::kBool, "true", "range cell migration term (false: infinite-velocity limit, zero shift)", {}},

      {"dataset.classes", K::kUInt, "6", "number of target families (2..10)", {}},
      {"dataset.per_class", K::kUInt, "34", "pairs per class (table1: budget for the 50-sample classes)", {}},
      {"dataset.size", K::kUInt, "64", "image side in pixels (multiple of 32)", {}},
      {"dataset.imbalance", K::kChoice, "balanced", "class-size profile", {"balanced", "table1"}},
      {"dataset.gt_source", K::kChoice, "rda", "16-bit ground truth: full-precision RDA image or the rendered scene",
       {"rda", "original"}},
      {"dataset.train_frac", K::kReal, "0.7", "training fraction per class", {}},
      {"dataset.val_frac", K::kReal, "0.15", "validation fraction; test takes the rest", {}},

      {"model.channels", K::kUIntList, "8,16,32,64,128", "encoder channels of the five stages", {}},
      {"model.scales_used", K::kUInt, "5", "deepest scales averaged by the classifier (1..5)", {}},
      {"model.embed", K::kUInt, "128", "scale-processor and fusion width", {}},
      {"model.hog_hidden", K::kUInt, "256", "hidden width of the HOG MLP", {}},

      {"loss.preset", K::kChoice, "full", "pretraining loss mask", {"full", "rec_con_align", "rec_only"}},
      {"loss.lambda_rec", K::kReal, "1", "weight of L_rec", {}},
      {"loss.lambda_con", K::kReal, "0.5", "weight of L_con", {}},
      {"loss.lambda_align", K::kReal, "0.1", "weight of L_align", {}},
      {"loss.lambda_sep", K::kReal, "0.1", "weight of L_sep", {}},
      {"loss.margin", K::kReal, "0.2", "triplet margin m", {}},
      {"loss.normalize_sep", K::kBool, "false", "L2-normalise features before triplet distances", {}},
      {"loss.focal_gamma", K::kReal, "2", "focal loss gamma", {}},
      {"loss.focal_alpha", K::kChoice, "inverse_frequency", "focal loss class weights", {"inverse_frequency", "none"}},

      {"augment.p_rot90", K::kReal, "1", "probability of a random multiple-of-90 rotation", {}},
      {"augment.p_hflip", K::kReal, "0.5", "horizontal flip probability", {}},
      {"augment.p_vflip", K::kReal, "0.5", "vertical flip probability", {}},
      {"augment.p_speckle", K::kReal, "0.3", "multiplicative speckle probability (1-bit only)", {}},
      {"augment.speckle_var_min", K::kReal, "0", "speckle variance lower bound", {}},
      {"augment.speckle_var_max", K::kReal, "0.05", "speckle variance upper bound", {}},
      {"augment.p_gamma", K::kReal, "0.3", "gamma probability (1-bit only)", {}},
      {"augment.gamma_min", K::kReal, "0.7", "gamma lower bound", {}},
      {"augment.gamma_max", K::kReal, "1.4", "gamma upper bound", {}},
      {"augment.p_blur", K::kReal, "0.2", "Gaussian blur probability (1-bit only)", {}},
      {"augment.blur_sigma_min", K::kReal, "0.3", "blur sigma lower bound", {}},
      {"augment.blur_sigma_max", K::kReal, "1", "blur sigma upper bound", {}},
      {"augment.p_brightness", K::kReal, "0.3", "brightness/contrast probability (1-bit only)", {}},
      {"augment.brightness_min", K::kReal, "-0.1", "brightness offset lower bound", {}},
      {"augment.brightness_max", K::kReal, "0.1", "brightness offset upper bound", {}},
      {"augment.contrast_min", K::kReal, "0.8", "contrast factor lower bound", {}},
      {"augment.contrast_max", K::kReal, "1.2", "contrast factor upper bound", {}},
      {"augment.p_erase", K::kReal, "0.3", "random erasing probability (1-bit only)", {}},
      {"augment.erase_area_min", K::kReal, "0.02", "erased area fraction lower bound", {}},
      {"augment.erase_area_max", K::kReal, "0.15", "erased area fraction upper bound", {}},
      {"augment.erase_aspect_min", K::kReal, "0.3", "erased rectangle aspect lower bound", {}},
      {"augment.erase_aspect_max", K::kReal, "3.3", "erased rectangle aspect upper bound", {}},
      {"augment.erase_fill", K::kReal, "0", "value written into erased pixels", {}},
      {"augment.oversample_target", K::kUInt, "800", "samples per class per epoch; 0 = each sample once", {}},
      {"augment.oversample_pretrain", K::kBool, "true", "oversample during pretraining", {}},
      {"augment.oversample_finetune", K::kBool, "true", "oversample during fine-tuning", {}},
      {"augment.allow_undersample", K::kBool, "false", "subsample classes above the target", {}},

      {"train.pretrain_epochs", K::kUInt, "30", "pretraining epochs", {}},
      {"train.head_epochs", K::kUInt, "5", "fine-tuning epochs with a frozen backbone", {}},
      {"train.full_epochs", K::kUInt, "15", "fine-tuning epochs with everything trainable", {}},
      {"train.pretrain_lr", K::kReal, "1e-4", "pretraining learning rate", {}},
      {"train.finetune_lr", K::kReal, "5e-5", "fine-tuning head learning rate", {}},
      {"train.backbone_lr_scale", K::kReal, "0.1", "backbone learning-rate multiplier in the full phase", {}},
      {"train.weight_decay", K::kReal, "0.01", "AdamW decoupled weight decay", {}},
      {"train.pk_classes", K::kUInt, "6", "P: classes per pretraining batch", {}},
      {"train.pk_samples", K::kUInt, "2", "K: samples per class in a pretraining batch", {}},
      {"train.batch_size", K::kUInt, "32", "fine-tuning batch size", {}},
      {"train.val_every", K::kUInt, "1", "epochs between validation passes", {}},
      {"train.teacher_free_prob", K::kReal, "0.5",
       "share of pretraining steps whose student decoder uses self-attention instead of teacher keys/values", {}},

      {"hog.source", K::kChoice, "reconstructed", "image the descriptors are computed from",
       {"reconstructed", "raw1bit", "off"}},
      {"hog.cell", K::kUInt, "8", "cell side in pixels", {}},
      {"hog.bins", K::kUInt, "9", "unsigned orientation bins", {}},
      {"hog.block", K::kUInt, "2", "block side in cells", {}},
      {"hog.block_stride", K::kUInt, "1", "block stride in cells", {}},
      {"hog.clip", K::kReal, "0.2", "L2-Hys clip", {}},
      {"hog.batch_size", K::kUInt, "32", "reconstruction batch size", {}},

      {"eval.split", K::kChoice, "test", "split evaluated", {"train", "val", "test"}},
      {"eval.gallery", K::kUInt, "6", "reconstruction triptychs written", {}},
      {"eval.batch_size", K::kUInt, "64", "inference batch size", {}},
  };
  return k;
}

const KeyInfo& info(const std::string& key) {
  const auto& keys = known_keys();
  auto it = std::find_if(keys.begin(), keys.end(), [&](const KeyInfo& k) { return k.key == key; });
  if (it == keys.end()) throw ConfigError("unknown config key '" + key + "'");
  return *it;
}

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

bool parse_uint(std::string_view s, std::uint64_t& out) {
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && p == end && !s.empty();
}

bool parse_real(std::string_view s, double& out) {
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && p == end && !s.empty() && std::isfinite(out);
}

bool parse_bool(std::string_view s, bool& out) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return out = true, true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return out = false, true;
  return false;
}

std::vector<std::size_t> parse_list(std::string_view s) {
  std::vector<std::size_t> out;
  while (true) {
    const auto comma = s.find(',');
    std::uint64_t v = 0;
    if (!parse_uint(trim(s.substr(0, comma)), v)) throw ConfigError("bad integer list");
    out.push_back(v);
    if (comma == std::string_view::npos) break;
    s.remove_prefix(comma + 1);
  }
  return out;
}

void check_value(const KeyInfo& k, const std::string& value) {
  auto fail = [&](const std::string& what) {
    throw ConfigError("config key '" + k.key + "': '" + value + "' is not " + what);
  };
  switch (k.type) {
    case K::kUInt: {
      std::uint64_t v;
      if (!parse_uint(value, v)) fail("a non-negative integer");
      break;
    }
    case K::kReal: {
      double v;
      if (!parse_real(value, v)) fail("a finite number");
      break;
    }
    case K::kBool: {
      bool v;
      if (!parse_bool(value, v)) fail("a boolean (true/false)");
      break;
    }
    case K::kChoice: {
      if (std::find(k.choices.begin(), k.choices.end(), value) == k.choices.end()) {
        std::string list;
        for (const auto& c : k.choices) list += (list.empty() ? "" : "|") + c;
        fail("one of " + list);
      }
      break;
    }
    case K::kUIntList:
      try {
        parse_list(value);
      } catch (const ConfigError&) {
        fail("a comma-separated list of non-negative integers");
      }
      break;
  }
}

}  // namespace

const std::vector<KeyInfo>& known_keys() {
  static const std::vector<KeyInfo> keys = build_keys();
  return keys;
}

RunConfig::RunConfig() {
  for (const auto& k : known_keys()) values_[k.key] = k.default_value;
}

RunConfig RunConfig::from_file(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw Error("cannot read config file " + file.string());
  std::stringstream ss;
  ss << is.rdbuf();
  RunConfig c;
  c.merge_text(ss.str(), file.string());
  return c;
}

void RunConfig::merge_text(std::string_view text, const std::string& origin) {
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    auto line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    try {
      apply(line);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto& k = info(key);
  check_value(k, value);
  values_[key] = value;
}

void RunConfig::apply(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("expected key=value, got '" + std::string(assignment) + "'");
  }
  set(std::string(trim(assignment.substr(0, eq))), std::string(trim(assignment.substr(eq + 1))));
}

const std::string& RunConfig::get(const std::string& key) const {
  info(key);
  return values_.at(key);
}

std::uint64_t RunConfig::get_uint(const std::string& key) const {
  std::uint64_t v = 0;
  if (!parse_uint(get(key), v)) throw ConfigError("config key '" + key + "' is not an integer");
  return v;
}

double RunConfig::get_real(const std::string& key) const {
  double v = 0;
  if (!parse_real(get(key), v)) throw ConfigError("config key '" + key + "' is not a number");
  return v;
}

bool RunConfig::get_bool(const std::string& key) const {
  bool v = false;
  if (!parse_bool(get(key), v)) throw ConfigError("config key '" + key + "' is not a boolean");
  return v;
}

std::string RunConfig::resolved() const {
  std::string out;
  for (const auto& k : known_keys()) out += k.key + " = " + values_.at(k.key) + "\n";
  return out;
}

void RunConfig::write_resolved(const std::filesystem::path& file) const {
  std::ofstream os(file, std::ios::binary);
  os << resolved();
  if (!os) throw Error("cannot write " + file.string());
}

sar::RadarParams RunConfig::radar() const {
  sar::RadarParams p;
  p.wavelength = get_real("radar.wavelength");
  p.chirp_rate = get_real("radar.chirp_rate");
  p.pulse_duration = get_real("radar.pulse_duration");
  p.sample_rate = get_real("radar.sample_rate");
  p.prf = get_real("radar.prf");
  p.velocity = get_real("radar.velocity");
  p.ref_range = get_real("radar.ref_range");
  p.range_spacing = get_real("radar.range_spacing");
  p.azimuth_spacing = get_real("radar.azimuth_spacing");
  p.migration = get_bool("radar.migration");
  p.n_range = p.n_azimuth = get_uint("dataset.size");
  p.validate();
  return p;
}

pipeline::SynthConfig RunConfig::dataset() const {
  pipeline::SynthConfig c;
  c.num_classes = get_uint("dataset.classes");
  c.per_class = get_uint("dataset.per_class");
  c.size = get_uint("dataset.size");
  c.seed = seed();
  c.imbalance = pipeline::parse_imbalance(get("dataset.imbalance"));
  c.gt_source = pipeline::parse_gt_source(get("dataset.gt_source"));
  c.train_frac = get_real("dataset.train_frac");
  c.val_frac = get_real("dataset.val_frac");
  c.workers = workers();
  c.validate();
  return c;
}

model::EncoderConfig RunConfig::encoder() const {
  model::EncoderConfig e;
  e.channels = parse_list(get("model.channels"));
  e.validate();
  return e;
}

model::ClassifierConfig RunConfig::classifier(std::size_t num_classes) const {
  model::ClassifierConfig c;
  c.num_classes = num_classes;
  c.scales_used = get_uint("model.scales_used");
  c.embed = get_uint("model.embed");
  c.hog_hidden = get_uint("model.hog_hidden");
  c.use_hog = get("hog.source") != "off";
  const std::size_t side = get_uint("dataset.size");
  if (c.use_hog) c.hog_dim = hog().descriptor_length(side, side);
  c.validate();
  return c;
}

losses::LossWeights RunConfig::loss() const {
  losses::LossWeights w;
  w.rec = get_real("loss.lambda_rec");
  w.con = get_real("loss.lambda_con");
  w.align = get_real("loss.lambda_align");
  w.sep = get_real("loss.lambda_sep");
  w.margin = get_real("loss.margin");
  w.normalize_sep = get_bool("loss.normalize_sep");
  w = losses::ablation_weights(get("loss.preset"), w);
  w.validate();
  return w;
}

pipeline::AugmentConfig RunConfig::augment() const {
  pipeline::AugmentConfig a;
  a.p_rot90 = get_real("augment.p_rot90");
  a.p_hflip = get_real("augment.p_hflip");
  a.p_vflip = get_real("augment.p_vflip");
  a.p_speckle = get_real("augment.p_speckle");
  a.speckle_var_min = get_real("augment.speckle_var_min");
  a.speckle_var_max = get_real("augment.speckle_var_max");
  a.p_gamma = get_real("augment.p_gamma");
  a.gamma_min = get_real("augment.gamma_min");
  a.gamma_max = get_real("augment.gamma_max");
  a.p_blur = get_real("augment.p_blur");
  a.blur_sigma_min = get_real("augment.blur_sigma_min");
  a.blur_sigma_max = get_real("augment.blur_sigma_max");
  a.p_brightness = get_real("augment.p_brightness");
  a.brightness_min = get_real("augment.brightness_min");
  a.brightness_max = get_real("augment.brightness_max");
  a.contrast_min = get_real("augment.contrast_min");
  a.contrast_max = get_real("augment.contrast_max");
  a.p_erase = get_real("augment.p_erase");
  a.erase_area_min = get_real("augment.erase_area_min");
  a.erase_area_max = get_real("augment.erase_area_max");
  a.erase_aspect_min = get_real("augment.erase_aspect_min");
  a.erase_aspect_max = get_real("augment.erase_aspect_max");
  a.erase_fill = static_cast<float>(get_real("augment.erase_fill"));
  a.oversample_target = get_uint("augment.oversample_target");
  a.oversample_pretrain = get_bool("augment.oversample_pretrain");
  a.oversample_finetune = get_bool("augment.oversample_finetune");
  a.allow_undersample = get_bool("augment.allow_undersample");
  a.validate();
  return a;
}

pipeline::TrainConfig RunConfig::train() const {
  pipeline::TrainConfig t;
  t.pretrain_epochs = get_uint("train.pretrain_epochs");
  t.head_epochs = get_uint("train.head_epochs");
  t.full_epochs = get_uint("train.full_epochs");
  t.pretrain_lr = get_real("train.pretrain_lr");
  t.finetune_lr = get_real("train.finetune_lr");
  t.backbone_lr_scale = get_real("train.backbone_lr_scale");
  t.weight_decay = get_real("train.weight_decay");
  t.P = get_uint("train.pk_classes");
  t.K = get_uint("train.pk_samples");
  t.batch_size = get_uint("train.batch_size");
  t.val_every = get_uint("train.val_every");
  t.workers = workers();
  t.seed = seed();
  t.validate();
  return t;
}

features::HogConfig RunConfig::hog() const {
  features::HogConfig h;
  h.cell = get_uint("hog.cell");
  h.bins = get_uint("hog.bins");
  h.block = get_uint("hog.block");
  h.block_stride = get_uint("hog.block_stride");
  h.clip = get_real("hog.clip");
  h.validate();
  return h;
}

pipeline::HogStageConfig RunConfig::hog_stage() const {
  pipeline::HogStageConfig s;
  s.source = pipeline::parse_hog_source(get("hog.source"));
  s.hog = hog();
  s.batch_size = get_uint("hog.batch_size");
  if (s.batch_size == 0) throw ConfigError("hog.batch_size must be positive");
  return s;
}

pipeline::PretrainConfig RunConfig::pretrain() const {
  pipeline::PretrainConfig p;
  p.train = train();
  p.augment = augment();
  p.weights = loss();
  p.encoder = encoder();
  p.teacher_free_prob = get_real("train.teacher_free_prob");
  return p;
}

pipeline::FinetuneConfig RunConfig::finetune(std::size_t num_classes) const {
  pipeline::FinetuneConfig f;
  f.train = train();
  f.augment = augment();
  f.encoder = encoder();
  f.classifier = classifier(num_classes);
  f.hog = hog();
  f.focal_gamma = get_real("loss.focal_gamma");
  f.focal_alpha = pipeline::parse_focal_alpha(get("loss.focal_alpha"));
  return f;
}

pipeline::EvalConfig RunConfig::eval() const {
  pipeline::EvalConfig e;
  e.split = pipeline::parse_split(get("eval.split"));
  e.gallery = get_uint("eval.gallery");
  e.batch_size = get_uint("eval.batch_size");
  if (e.batch_size == 0) throw ConfigError("eval.batch_size must be positive");
  return e;
}

}  // namespace cfnet::cli
