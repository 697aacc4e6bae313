#include "cfnet/pipeline/dataset.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <numbers>
#include <thread>

#include "cfnet/pipeline/rng.hpp"

namespace cfnet::pipeline {

namespace {

std::size_t round_half_up(double x) { return static_cast<std::size_t>(std::floor(x + 0.5 + 1e-9)); }

struct Canvas {
  sar::ReflectivityMap map;
  double cx, cy, cos_t, sin_t, unit;

  void plot(double u, double v, double w) {
    // local (u, v) -> rotated, scaled, translated pixel
    const double x = cx + unit * (u * cos_t - v * sin_t);
    const double y = cy + unit * (u * sin_t + v * cos_t);
    const long xi = std::lround(x), yi = std::lround(y);
    if (xi < 0 || yi < 0 || xi >= static_cast<long>(map.width) || yi >= static_cast<long>(map.height)) return;
    float& px = map.at(static_cast<std::size_t>(yi), static_cast<std::size_t>(xi));
    px = std::max(px, static_cast<float>(w));
  }

  void segment(double u0, double v0, double u1, double v1, double w) {
    const double len = std::hypot(u1 - u0, v1 - v0) * unit;
    const auto steps = static_cast<std::size_t>(std::ceil(2.0 * len)) + 1;
    for (std::size_t s = 0; s <= steps; ++s) {
      const double t = static_cast<double>(s) / static_cast<double>(steps);
      plot(u0 + t * (u1 - u0), v0 + t * (v1 - v0), w);
    }
  }

  void disk(double u0, double v0, double r, double w) {
    const double step = 0.5 / unit;
    for (double u = -r; u <= r; u += step)
      for (double v = -r; v <= r; v += step)
        if (u * u + v * v <= r * r) plot(u0 + u, v0 + v, w);
  }

  void circle(double r, double w) {
    const auto steps = static_cast<std::size_t>(std::ceil(4.0 * std::numbers::pi * r * unit)) + 8;
    for (std::size_t s = 0; s < steps; ++s) {
      const double a = 2.0 * std::numbers::pi * static_cast<double>(s) / static_cast<double>(steps);
      plot(r * std::cos(a), r * std::sin(a), w);
    }
  }
};

}  // namespace

Imbalance parse_imbalance(std::string_view s) {
  if (s == "balanced") return Imbalance::kBalanced;
  if (s == "table1") return Imbalance::kTable1;
  throw ConfigError("unknown imbalance profile '" + std::string(s) + "' (expected balanced|table1)");
}

GtSource parse_gt_source(std::string_view s) {
  if (s == "rda") return GtSource::kRda;
  if (s == "original") return GtSource::kOriginal;
  throw ConfigError("unknown ground-truth source '" + std::string(s) + "' (expected rda|original)");
}

void SynthConfig::validate() const {
  if (num_classes < 2 || num_classes > family_names().size()) {
    throw ConfigError("dataset: classes must be in [2, " + std::to_string(family_names().size()) + "], got " +
                      std::to_string(num_classes));
  }
  if (imbalance == Imbalance::kTable1 && num_classes != 6) {
    throw ConfigError("dataset: the table1 imbalance profile is defined for 6 classes");
  }
  if (per_class == 0) throw ConfigError("dataset: per_class must be positive");
  if (size == 0 || size % 32 != 0) throw ConfigError("dataset: size must be a positive multiple of 32");
  if (!(train_frac > 0 && val_frac >= 0 && train_frac + val_frac <= 1.0 + 1e-12)) {
    throw ConfigError("dataset: split fractions must satisfy train > 0, val >= 0, train + val <= 1");
  }
}

std::vector<std::size_t> class_sizes(const SynthConfig& cfg) {
  cfg.validate();
  std::vector<std::size_t> n(cfg.num_classes, cfg.per_class);
  if (cfg.imbalance == Imbalance::kTable1) {
    for (std::size_t k = 0; k < 6; ++k) {
      n[k] = std::max<std::size_t>(1, round_half_up(static_cast<double>(kTable1Counts[k]) *
                                                    static_cast<double>(cfg.per_class) / 50.0));
    }
  }
  return n;
}

std::size_t SplitCounts::total(Split s) const {
  const auto& v = s == Split::kTrain ? train : s == Split::kVal ? val : test;
  std::size_t t = 0;
  for (auto x : v) t += x;
  return t;
}

SplitCounts split_counts(const std::vector<std::size_t>& sizes, double train_frac, double val_frac) {
  const std::size_t c = sizes.size();
  SplitCounts out{std::vector<std::size_t>(c), std::vector<std::size_t>(c, 0), std::vector<std::size_t>(c)};
  std::size_t total = 0;
  for (std::size_t k = 0; k < c; ++k) {
    out.train[k] = std::min(sizes[k], round_half_up(train_frac * static_cast<double>(sizes[k])));
    total += sizes[k];
  }
  std::size_t want = round_half_up(val_frac * static_cast<double>(total));
  std::vector<double> rem(c);
  for (std::size_t k = 0; k < c; ++k) {
    const double q = val_frac * static_cast<double>(sizes[k]);
    out.val[k] = std::min(sizes[k] - out.train[k], static_cast<std::size_t>(std::floor(q + 1e-9)));
    rem[k] = q - static_cast<double>(out.val[k]);
    want -= std::min(want, out.val[k]);
  }
  std::vector<std::size_t> order(c);
  for (std::size_t k = 0; k < c; ++k) order[k] = k;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b] + 1e-12; });
  for (std::size_t k : order) {
    if (want == 0) break;
    if (out.train[k] + out.val[k] < sizes[k]) {
      ++out.val[k];
      --want;
    }
  }
  for (std::size_t k = 0; k < c; ++k) out.test[k] = sizes[k] - out.train[k] - out.val[k];
  return out;
}

const std::vector<std::string>& family_names() {
  static const std::vector<std::string> names{"bar",   "l_shape",  "twin_blob", "ring",     "cross",
                                              "wedge", "t_shape",  "triangle",  "dot_grid", "plate"};
  return names;
}

sar::ReflectivityMap render_target(std::size_t family, std::size_t size, std::mt19937_64& rng) {
  if (family >= family_names().size()) throw ValueError("render_target: unknown family " + std::to_string(family));
  const double s = static_cast<double>(size);
  const double theta = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  Canvas c{sar::ReflectivityMap(size, size), s / 2 + uniform(rng, -s / 10, s / 10), s / 2 + uniform(rng, -s / 10, s / 10),
           std::cos(theta), std::sin(theta), 0.35 * s * uniform(rng, 0.8, 1.2)};
  auto w = [&] { return uniform(rng, 0.5, 1.0); };
  switch (family) {
    case 0:
      c.segment(-0.6, 0, 0.6, 0, w());
      break;
    case 1: {
      const double a = w();
      c.segment(-0.4, -0.3, 0.4, -0.3, a);
      c.segment(-0.4, -0.3, -0.4, 0.4, w());
      break;
    }
    case 2:
      c.disk(-0.4, 0, 0.12, w());
      c.disk(0.4, 0, 0.12, w());
      break;
    case 3:
      c.circle(0.45, w());
      break;
    case 4:
      c.segment(-0.5, 0, 0.5, 0, w());
      c.segment(0, -0.5, 0, 0.5, w());
      break;
    case 5:
      c.segment(-0.5, 0, 0.5, 0.35, w());
      c.segment(-0.5, 0, 0.5, -0.35, w());
      break;
    case 6:
      c.segment(-0.5, -0.4, 0.5, -0.4, w());
      c.segment(0, -0.4, 0, 0.5, w());
      break;
    case 7: {
      double pu[3], pv[3];
      for (int i = 0; i < 3; ++i) {
        const double a = 2.0 * std::numbers::pi * i / 3.0;
        pu[i] = 0.5 * std::cos(a);
        pv[i] = 0.5 * std::sin(a);
      }
      for (int i = 0; i < 3; ++i) c.segment(pu[i], pv[i], pu[(i + 1) % 3], pv[(i + 1) % 3], w());
      break;
    }
    case 8:
      for (int i = -1; i <= 1; ++i)
        for (int j = -1; j <= 1; ++j) c.disk(0.35 * i, 0.35 * j, 0.03, w());
      break;
    case 9: {
      const double a = w();
      for (double v = -0.175; v <= 0.175; v += 0.5 / c.unit) c.segment(-0.4, v, 0.4, v, a);
      break;
    }
  }
  return c.map;
}

Manifest plan_dataset(const SynthConfig& cfg) {
  const auto sizes = class_sizes(cfg);
  const auto counts = split_counts(sizes, cfg.train_frac, cfg.val_frac);
  Manifest m;
  m.classes.assign(family_names().begin(), family_names().begin() + static_cast<long>(cfg.num_classes));
  for (std::size_t k = 0; k < cfg.num_classes; ++k) {
    std::vector<Split> tags;
    tags.insert(tags.end(), counts.train[k], Split::kTrain);
    tags.insert(tags.end(), counts.val[k], Split::kVal);
    tags.insert(tags.end(), counts.test[k], Split::kTest);
    auto rng = stream({cfg.seed, tag(StreamTag::kSplit), k});
    shuffle(tags.begin(), tags.end(), rng);
    for (std::size_t i = 0; i < sizes[k]; ++i) {
      char id[32];
      std::snprintf(id, sizeof id, "c%zu_%04zu", k, i);
      SamplePair r;
      r.id = id;
      r.path_1bit = fs::path("images") / (r.id + "_1bit.cft");
      r.path_16bit = fs::path("images") / (r.id + "_16bit.cft");
      r.label = k;
      r.split = tags[i];
      m.rows.push_back(std::move(r));
    }
  }
  return m;
}

Manifest synth_dataset(const SynthConfig& cfg, const sar::RadarParams& params, const fs::path& out_dir) {
  Manifest m = plan_dataset(cfg);
  m.root = out_dir;
  sar::RadarParams p = params;
  p.n_range = p.n_azimuth = cfg.size;
  p.validate();
  fs::create_directories(out_dir / "images");

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto work = [&] {
    for (std::size_t i = next++; i < m.rows.size(); i = next++) {
      try {
        const auto& r = m.rows[i];
        const std::size_t k = r.label;
        const std::size_t idx = static_cast<std::size_t>(std::stoul(r.id.substr(r.id.find('_') + 1)));
        auto rng = stream({cfg.seed, tag(StreamTag::kTarget), k, idx});
        const auto target = render_target(k, cfg.size, rng);
        const auto pair = sar::generate_pair(target, p);
        save_image(out_dir / r.path_1bit, pair.img_1bit);
        if (cfg.gt_source == GtSource::kRda) {
          save_image(out_dir / r.path_16bit, pair.img_16bit);
        } else {
          Image gt = target;
          const float peak = *std::max_element(gt.pixels.begin(), gt.pixels.end());
          if (peak > 0) {
            for (auto& v : gt.pixels) v /= peak;
          }
          save_image(out_dir / r.path_16bit, gt);
        }
        save_image(out_dir / "images" / (r.id + "_target.cft"), target);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
        next = m.rows.size();
      }
    }
  };
  const std::size_t n_workers = std::max<std::size_t>(1, std::min(cfg.workers, m.rows.size()));
  if (n_workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_workers; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  write_manifest(m, out_dir / "manifest.csv");
  return m;
}

}  // namespace cfnet::pipeline
