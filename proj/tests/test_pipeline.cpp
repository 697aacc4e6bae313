#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include <unistd.h>

#include "cfnet/errors.hpp"
#include "cfnet/features/features.hpp"
#include "cfnet/ndgrad/cft.hpp"
#include "cfnet/pipeline/augment.hpp"
#include "cfnet/pipeline/checkpoint.hpp"
#include "cfnet/pipeline/dataset.hpp"
#include "cfnet/pipeline/rng.hpp"
#include "cfnet/pipeline/sampling.hpp"
#include "cfnet/pipeline/stages.hpp"

using namespace cfnet;
using namespace cfnet::pipeline;

namespace {

fs::path scratch_root() { return fs::temp_directory_path() / ("cfnet_test_pipeline_" + std::to_string(::getpid())); }

struct RemoveScratch {
  ~RemoveScratch() {
    std::error_code ec;
    fs::remove_all(scratch_root(), ec);
  }
} remove_scratch;

fs::path scratch_dir(const std::string& name) {
  auto dir = scratch_root() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

// Small dataset shared by the training tests: 3 classes x 8 pairs at 64x64.
const Manifest& tiny() {
  static const Manifest m = [] {
    SynthConfig c;
    c.num_classes = 3;
    c.per_class = 8;
    c.seed = 5;
    return synth_dataset(c, sar::RadarParams{}, scratch_dir("tiny"));
  }();
  return m;
}

Image random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.f, 1.f);
  Image img(h, w);
  for (auto& v : img.pixels) v = u(rng);
  return img;
}

Image point(std::size_t h, std::size_t w, std::size_t r, std::size_t c) {
  Image img(h, w);
  img.at(r, c) = 1.f;
  return img;
}

std::size_t argmax(const Image& img) {
  return static_cast<std::size_t>(std::max_element(img.pixels.begin(), img.pixels.end()) - img.pixels.begin());
}

bool same_values(const nd::ParamStore& a, const nd::ParamStore& b, const std::string& prefix = "") {
  for (const auto& [name, t] : a.entries()) {
    if (name.rfind(prefix, 0) != 0) continue;
    const auto& u = b.get(name);
    if (!std::equal(t.data().begin(), t.data().end(), u.data().begin(), u.data().end())) return false;
  }
  return true;
}

PretrainConfig small_pretrain(std::size_t epochs) {
  PretrainConfig pc;
  pc.train.pretrain_epochs = epochs;
  pc.train.pretrain_lr = 1e-3;
  pc.train.P = 3;
  pc.train.K = 2;
  pc.train.seed = 7;
  pc.augment.oversample_pretrain = false;
  return pc;
}

std::string checkpoint_bytes(const CheckpointBundle& b) {
  std::ostringstream os;
  write_checkpoint(os, b);
  return os.str();
}

}  // namespace

TEST_CASE("split arithmetic") {
  SynthConfig t1;
  t1.per_class = 50;
  t1.imbalance = Imbalance::kTable1;
  t1.train_frac = 0.7;
  t1.val_frac = 0.0;
  const auto sizes = class_sizes(t1);
  CHECK(sizes == std::vector<std::size_t>{50, 50, 54, 785, 148, 56});
  const auto counts = split_counts(sizes, 0.7, 0.0);
  CHECK(counts.total(Split::kTrain) == 801);
  CHECK(counts.total(Split::kVal) == 0);
  CHECK(counts.total(Split::kTest) == 342);
  const auto plan = plan_dataset(t1);
  CHECK(plan.rows.size() == 1143);
  CHECK(plan.indices(Split::kTrain).size() == 801);
  CHECK(plan.indices(Split::kTest).size() == 342);

  SynthConfig bal;
  bal.per_class = 10;
  const auto m = plan_dataset(bal);
  CHECK(m.rows.size() == 60);
  CHECK(m.indices(Split::kTrain).size() == 42);
  CHECK(m.indices(Split::kVal).size() == 9);
  CHECK(m.indices(Split::kTest).size() == 9);
  for (std::size_t k = 0; k < 6; ++k) CHECK(m.class_counts(Split::kTrain)[k] == 7);

  SynthConfig bad;
  bad.num_classes = 11;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad.num_classes = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("synthetic dataset is deterministic") {
  SynthConfig c;
  c.num_classes = 2;
  c.per_class = 3;
  c.seed = 21;
  const auto a = scratch_dir("det_a"), b = scratch_dir("det_b");
  const auto ma = synth_dataset(c, sar::RadarParams{}, a);
  synth_dataset(c, sar::RadarParams{}, b);
  CHECK(slurp(a / "manifest.csv") == slurp(b / "manifest.csv"));
  for (const auto& row : ma.rows) {
    CHECK(slurp(a / row.path_1bit) == slurp(b / row.path_1bit));
    CHECK(slurp(a / row.path_16bit) == slurp(b / row.path_16bit));
  }
  const auto back = read_manifest(a / "manifest.csv");
  CHECK(back.rows.size() == 6);
  CHECK(back.classes == ma.classes);
  const auto img = load_image(back.resolve(back.rows[0].path_16bit));
  CHECK(img.height == 64);
  CHECK(*std::max_element(img.pixels.begin(), img.pixels.end()) == 1.0f);

  c.gt_source = GtSource::kOriginal;
  const auto o = scratch_dir("det_original");
  const auto mo = synth_dataset(c, sar::RadarParams{}, o);
  for (const auto& row : mo.rows) {
    CHECK(slurp(o / row.path_1bit) == slurp(a / row.path_1bit));
    const auto gt = load_image(o / row.path_16bit);
    const auto target = load_image(o / "images" / (row.id + "_target.cft"));
    const float peak = *std::max_element(target.pixels.begin(), target.pixels.end());
    REQUIRE(peak > 0);
    for (std::size_t i = 0; i < gt.pixels.size(); ++i) CHECK(gt.pixels[i] == target.pixels[i] / peak);
  }
  CHECK(parse_gt_source("rda") == GtSource::kRda);
  CHECK_THROWS_AS(parse_gt_source("both"), ConfigError);
}

TEST_CASE("augmentation") {
  std::mt19937_64 rng(3);
  const auto x = random_image(16, 24, 1);

  SUBCASE("identity") {
    const auto out = augment({x, x, std::nullopt}, AugmentConfig::identity(), rng);
    CHECK(out.x1bit.pixels == x.pixels);
    CHECK(out.x16bit.pixels == x.pixels);
  }
  SUBCASE("rotations and flips") {
    CHECK(rotate90(rotate90(x, 2), 2).pixels == x.pixels);
    auto r = x;
    for (int i = 0; i < 4; ++i) r = rotate90(r, 1);
    CHECK(r.pixels == x.pixels);
    const auto q = rotate90(x, 1);
    CHECK(q.height == 24);
    CHECK(q.width == 16);
    CHECK(flip_horizontal(flip_horizontal(x)).pixels == x.pixels);
    CHECK(flip_vertical(flip_vertical(x)).pixels == x.pixels);
  }
  SUBCASE("erase count") {
    for (double f : {0.02, 0.08, 0.15}) {
      for (double aspect : {0.3, 1.0, 3.3}) {
        Image img(64, 64);
        std::fill(img.pixels.begin(), img.pixels.end(), 1.f);
        const auto n = erase_rect(img, f, aspect, 0.f, rng);
        const auto zeros = static_cast<std::size_t>(std::count(img.pixels.begin(), img.pixels.end(), 0.f));
        CHECK(zeros == n);
        CHECK(std::abs(double(n) - f * 64 * 64) <= 64);
      }
    }
  }
  SUBCASE("pairs stay registered") {
    auto cfg = AugmentConfig{};
    cfg.p_erase = 0;
    for (int t = 0; t < 40; ++t) {
      const auto p = point(32, 32, 5, 11);
      const auto out = augment({p, p, p}, cfg, rng);
      CHECK(argmax(out.x16bit) == argmax(*out.aux));
      CHECK(argmax(out.x1bit) == argmax(out.x16bit));
    }
    cfg = AugmentConfig{};
    cfg.p_erase = 1.0;
    cfg.erase_fill = 0.5f;
    for (int t = 0; t < 20; ++t) {
      const auto out = augment({x, x, std::nullopt}, cfg, rng);
      for (float v : out.x1bit.pixels) CHECK((v >= 0.f && v <= 1.f));
      CHECK(out.x16bit.pixels != out.x1bit.pixels);
    }
  }
  SUBCASE("same stream, same result") {
    auto r1 = stream({9, tag(StreamTag::kAugment), 1, 4});
    auto r2 = stream({9, tag(StreamTag::kAugment), 1, 4});
    const auto a = augment({x, x, std::nullopt}, AugmentConfig{}, r1);
    const auto b = augment({x, x, std::nullopt}, AugmentConfig{}, r2);
    CHECK(a.x1bit.pixels == b.x1bit.pixels);
    CHECK(a.x16bit.pixels == b.x16bit.pixels);
  }
}

TEST_CASE("oversampling") {
  std::vector<std::size_t> idx, lab;
  const std::size_t sizes[6] = {35, 50, 54, 300, 148, 56};
  for (std::size_t k = 0; k < 6; ++k)
    for (std::size_t i = 0; i < sizes[k]; ++i) {
      idx.push_back(idx.size());
      lab.push_back(k);
    }
  const auto plan = oversample_plan(idx, lab, 6, 800, 1);
  CHECK(plan.size() == 4800);
  std::map<std::size_t, std::size_t> seen;
  std::vector<std::size_t> per_class(6);
  for (auto i : plan) {
    ++seen[i];
    ++per_class[lab[i]];
  }
  for (auto c : per_class) CHECK(c == 800);
  for (std::size_t i = 0; i < 35; ++i) CHECK((seen[i] == 22 || seen[i] == 23));
  CHECK(plan != oversample_plan(idx, lab, 6, 800, 2));
  CHECK(plan == oversample_plan(idx, lab, 6, 800, 1));

  std::vector<std::size_t> bidx(12), blab(12);
  for (std::size_t i = 0; i < 12; ++i) {
    bidx[i] = i;
    blab[i] = i % 3;
  }
  auto once = oversample_plan(bidx, blab, 3, 4, 3);
  std::sort(once.begin(), once.end());
  CHECK(once == bidx);

  CHECK_THROWS_AS(oversample_plan(bidx, blab, 4, 4, 3), ValueError);
  CHECK_THROWS_AS(oversample_plan(bidx, blab, 3, 3, 3), ValueError);
  CHECK(oversample_plan(bidx, blab, 3, 3, 3, true).size() == 9);
}

TEST_CASE("pk batches") {
  std::vector<std::size_t> labels{0, 0, 0, 0, 1, 1, 1, 1};
  std::vector<std::size_t> plan{0, 1, 2, 3, 4, 5, 6, 7};
  const auto batches = pk_batches(plan, labels, 2, 2, 1);
  CHECK(batches.size() == 2);
  for (const auto& b : batches) {
    CHECK(b.size() == 4);
    std::map<std::size_t, int> n;
    for (auto i : b) ++n[labels[i]];
    CHECK(n.size() == 2);
    for (auto [k, c] : n) CHECK(c == 2);
  }

  std::vector<std::size_t> idx, lab;
  for (std::size_t k = 0; k < 6; ++k)
    for (std::size_t i = 0; i < 10 + 7 * k; ++i) {
      idx.push_back(idx.size());
      lab.push_back(k);
    }
  const auto os = oversample_plan(idx, lab, 6, 48, 2);
  const auto pk = pk_batches(os, lab, 6, 2, 2);
  std::size_t covered = 0;
  for (const auto& b : pk) {
    covered += b.size();
    std::map<std::size_t, int> n;
    for (auto i : b) ++n[lab[i]];
    CHECK(n.size() == 6);
  }
  CHECK(double(covered) >= 0.95 * double(os.size()));

  std::vector<std::size_t> one(6, 0), p6{0, 1, 2, 3, 4, 5};
  CHECK_THROWS_AS(pk_batches(p6, one, 2, 2, 1), ValueError);
  CHECK_THROWS_AS(pk_batches(plan, labels, 1, 2, 1), ValueError);

  const auto chunks = chunk_batches(plan, 3);
  CHECK(chunks.size() == 3);
  CHECK(chunks.back().size() == 2);
}

TEST_CASE("checkpoint format") {
  CheckpointBundle b;
  b.params = init_pretrain_params({}, 3);
  b.set_meta("kind", kKindCFNet);
  b.set_meta("seed", 3);
  nd::AdamW opt({1e-3, 0.9, 0.999, 1e-8, 0.01});
  std::vector<nd::Tensor> ts;
  std::vector<std::string> names;
  for (auto& [n, t] : b.params.entries()) {
    t.set_requires_grad(true);
    names.push_back(n);
    ts.push_back(t);
  }
  opt.add_group(names, ts, 1.0);
  for (auto& t : ts) std::fill(t.mutable_grad().begin(), t.mutable_grad().end(), 0.25f);
  opt.step();
  b.optimizer = OptimizerState::capture(opt);

  const auto bytes = checkpoint_bytes(b);
  std::istringstream is(bytes);
  const auto back = read_checkpoint(is);
  CHECK(checkpoint_bytes(back) == bytes);
  CHECK(back.require_meta("seed") == 3.0);
  REQUIRE(back.optimizer);
  CHECK(back.optimizer->steps == 1);
  CHECK(same_values(b.params, back.params));

  const auto path = scratch_dir("ckpt") / "a.cfck";
  checkpoint_save(b, path);
  CHECK(slurp(path) == bytes);
  CHECK(checkpoint_bytes(checkpoint_load(path)) == bytes);

  auto corrupt = bytes;
  corrupt[0] = 'X';
  std::istringstream c1(corrupt);
  CHECK_THROWS_AS(read_checkpoint(c1), FormatError);
  auto version = bytes;
  version[4] = 2;
  std::istringstream c2(version);
  CHECK_THROWS_AS(read_checkpoint(c2), VersionError);
  std::istringstream c3(bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS_AS(read_checkpoint(c3), FormatError);
  std::istringstream c4(bytes + "x");
  CHECK_THROWS_AS(read_checkpoint(c4), FormatError);
  CHECK_THROWS_AS(b.require_meta("missing"), FormatError);
}

TEST_CASE("pretrain") {
  const auto& m = tiny();
  std::vector<Image> x16;
  for (auto i : m.indices(Split::kTrain)) x16.push_back(load_image(m.resolve(m.rows[i].path_16bit)));
  const auto init = init_pretrain_params({}, 7, mean_intensity(x16));

  SUBCASE("zero epochs returns the initialisation") {
    const auto r = pretrain(m, small_pretrain(0));
    CHECK(r.curves.empty());
    CHECK(same_values(r.final.params, init));
    CHECK(same_values(r.best.params, init));
    CHECK(r.final.require_meta("kind") == kKindCFNet);
  }
  SUBCASE("zero-weighted terms are logged but do not move parameters") {
    auto pc = small_pretrain(2);
    pc.weights = {1, 0, 0, 0, 0.2};
    const auto a = pretrain(m, pc);
    pc.weights.margin = 0.7;
    const auto b = pretrain(m, pc);
    REQUIRE(a.curves.size() == 2);
    for (const auto& r : a.curves) {
      CHECK(r.l_con > 0);
      CHECK(r.l_align > 0);
      CHECK(r.l_sep > 0);
      CHECK(r.l_total == doctest::Approx(r.l_rec).epsilon(1e-6));
    }
    CHECK(a.curves[0].l_rec == b.curves[0].l_rec);
    CHECK(a.curves[1].l_rec == b.curves[1].l_rec);
    CHECK(a.curves[0].l_sep != b.curves[0].l_sep);
    CHECK(same_values(a.final.params, b.final.params));
    CHECK(same_values(a.final.params, init, "teacher.dec."));
    CHECK_FALSE(same_values(a.final.params, init, "student.dec."));
  }
  SUBCASE("reruns are bit-identical") {
    const auto a = pretrain(m, small_pretrain(1));
    const auto b = pretrain(m, small_pretrain(1));
    CHECK(checkpoint_bytes(a.final) == checkpoint_bytes(b.final));
    std::ostringstream ca, cb;
    write_pretrain_curves(ca, a.curves);
    write_pretrain_curves(cb, b.curves);
    CHECK(ca.str() == cb.str());
    CHECK(ca.str().rfind("epoch,l_rec,l_con,l_align,l_sep,l_total\n", 0) == 0);
  }
  SUBCASE("infeasible PK settings are rejected") {
    auto pc = small_pretrain(1);
    pc.train.P = 4;
    CHECK_THROWS_AS(pretrain(m, pc), ValueError);
  }
}

TEST_CASE("hog stage") {
  const auto& m = tiny();
  HogStageConfig hc;

  hc.source = HogSource::kOff;
  const auto off = extract_hog_stage(m, std::nullopt, hc, scratch_dir("hog_off"));
  CHECK(off.rows.size() == m.rows.size());
  CHECK_FALSE(off.has_hog());
  for (std::size_t i = 0; i < m.rows.size(); ++i) CHECK(off.rows[i].id == m.rows[i].id);

  hc.source = HogSource::kRaw1bit;
  const auto dir = scratch_dir("hog_raw");
  const auto raw = extract_hog_stage(m, std::nullopt, hc, dir);
  CHECK(raw.has_hog());
  CHECK(fs::exists(dir / "manifest.csv"));
  for (const auto& row : raw.rows) {
    const auto x = load_image(raw.resolve(row.path_1bit));
    const auto d = nd::load_cft(raw.resolve(row.path_hog));
    const auto ref = features::hog_extract(x.pixels, x.height, x.width, hc.hog);
    CHECK(d.size() == 1764);
    CHECK(std::equal(ref.begin(), ref.end(), d.data().begin(), d.data().end()));
  }
  const auto reread = read_manifest(dir / "manifest.csv");
  CHECK(reread.has_hog());
  CHECK(fs::equivalent(reread.resolve(reread.rows[0].path_1bit), m.resolve(m.rows[0].path_1bit)));

  hc.source = HogSource::kReconstructed;
  CHECK_THROWS(extract_hog_stage(m, std::nullopt, hc, scratch_dir("hog_rec")));
  const auto ck = pretrain(m, small_pretrain(0)).final;
  const auto rec = extract_hog_stage(m, ck, hc, scratch_dir("hog_rec"));
  CHECK(rec.has_hog());
  CHECK(parse_hog_source("raw1bit") == HogSource::kRaw1bit);
  CHECK_THROWS_AS(parse_hog_source("hog"), ConfigError);
}

TEST_CASE("finetune") {
  const auto& m = tiny();
  HogStageConfig hc;
  hc.source = HogSource::kRaw1bit;
  const auto hm = extract_hog_stage(m, std::nullopt, hc, scratch_dir("ft_hog"));
  const auto pre = pretrain(m, small_pretrain(0)).final;

  FinetuneConfig fc;
  fc.classifier.num_classes = 3;
  fc.train.seed = 4;
  fc.train.finetune_lr = 1e-3;
  fc.train.batch_size = 8;
  fc.augment.oversample_target = 8;

  SUBCASE("head-only phase keeps the backbone frozen") {
    fc.train.head_epochs = 2;
    fc.train.full_epochs = 0;
    const auto r = finetune(hm, pre, fc);
    for (std::size_t i = 0; i < 5; ++i) {
      const auto s = "stage" + std::to_string(i);
      for (const char* part : {".w", ".b"}) {
        const auto& a = r.final.params.get("backbone." + s + part);
        const auto& b = pre.params.get("student.enc." + s + part);
        CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin(), b.data().end()));
      }
    }
    CHECK(r.curves.size() == 2);
    CHECK(r.best_epoch == 0);
    CHECK(same_values(r.best.params, r.final.params));
  }
  SUBCASE("full phase moves the backbone") {
    fc.train.head_epochs = 1;
    fc.train.full_epochs = 1;
    const auto r = finetune(hm, pre, fc);
    CHECK(r.curves.size() == 2);
    CHECK(r.curves[1].phase == 2);
    const auto& a = r.final.params.get("backbone.stage0.w");
    const auto& b = pre.params.get("student.enc.stage0.w");
    CHECK_FALSE(std::equal(a.data().begin(), a.data().end(), b.data().begin(), b.data().end()));
    std::ostringstream os;
    write_finetune_curves(os, r.curves);
    CHECK(os.str().rfind("epoch,phase,train_loss,train_acc,val_acc\n", 0) == 0);
    const auto preds = predict(hm, hm.indices(Split::kTest), r.best);
    CHECK(preds.size() == hm.indices(Split::kTest).size());
    for (auto p : preds) CHECK(p < 3);
  }
  SUBCASE("configuration errors") {
    fc.classifier.num_classes = 4;
    CHECK_THROWS_AS(finetune(hm, pre, fc), ConfigError);
    fc.classifier.num_classes = 3;
    CHECK_THROWS_AS(finetune(m, pre, fc), ValueError);
    fc.classifier.hog_dim = 100;
    CHECK_THROWS_AS(finetune(hm, pre, fc), ShapeError);
  }
}

TEST_CASE("evaluate") {
  const auto& m = tiny();
  HogStageConfig hc;
  hc.source = HogSource::kRaw1bit;
  const auto hm = extract_hog_stage(m, std::nullopt, hc, scratch_dir("ev_hog"));
  const auto pre = pretrain(m, small_pretrain(0)).final;
  FinetuneConfig fc;
  fc.classifier.num_classes = 3;
  fc.train.head_epochs = 1;
  fc.train.full_epochs = 0;
  fc.augment.oversample_target = 8;
  const auto clf = finetune(hm, pre, fc).best;
  EvalConfig ec;
  ec.gallery = 2;
  const auto r = evaluate(hm, clf, pre, ec);
  CHECK(r.rows.size() == hm.indices(Split::kTest).size());
  CHECK(r.confusion.total() == r.rows.size());
  CHECK(r.psnr_recon.size() == r.rows.size());
  CHECK(r.gallery.size() == 2);
  CHECK(r.gallery[0].width == 3 * 64 + 4);
  const auto no_recon = evaluate(hm, clf, std::nullopt, ec);
  CHECK(no_recon.psnr_recon.empty());
  CHECK(no_recon.preds == r.preds);
}
