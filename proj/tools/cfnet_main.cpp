#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "CLI11.hpp"
#include "cfnet/cli/config.hpp"
#include "cfnet/pipeline/dataset.hpp"
#include "cfnet/pipeline/stages.hpp"

namespace fs = std::filesystem;
using namespace cfnet;
using namespace cfnet::pipeline;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Flags shared by the config-driven subcommands. Precedence: built-in
// defaults < --config file < --set < dedicated flags.
struct Common {
  std::string config_file;
  std::vector<std::string> sets;
  std::string out;
  struct Bound {
    std::string key;
    std::string value;
    CLI::Option* opt = nullptr;
  };
  std::vector<std::unique_ptr<Bound>> bound;

  void add(CLI::App* app, bool needs_out = true) {
    app->add_option("--config", config_file, "key = value config file")->check(CLI::ExistingFile);
    app->add_option("--set", sets, "override one config key (key=value); repeatable");
    auto* o = app->add_option("--out", out, "output directory");
    if (needs_out) o->required();
    bind(app, "--seed", "seed");
    bind(app, "--workers", "workers");
  }

  void bind(CLI::App* app, const std::string& flag, const std::string& key) {
    auto b = std::make_unique<Bound>();
    b->key = key;
    std::string help = "sets " + key;
    for (const auto& k : cli::known_keys()) {
      if (k.key == key) help = k.help + " [" + key + ", default " + k.default_value + "]";
    }
    b->opt = app->add_option(flag, b->value, help);
    bound.push_back(std::move(b));
  }

  cli::RunConfig config() const {
    cli::RunConfig c = config_file.empty() ? cli::RunConfig() : cli::RunConfig::from_file(config_file);
    for (const auto& s : sets) c.apply(s);
    for (const auto& b : bound) {
      if (b->opt->count() > 0) c.set(b->key, b->value);
    }
    return c;
  }

  fs::path out_dir(const cli::RunConfig& c) const {
    fs::create_directories(out);
    c.write_resolved(fs::path(out) / "config.resolved");
    return out;
  }
};

void log_line(const std::string& s) { std::cerr << s << '\n'; }

void require_file(const fs::path& p, const std::string& what, const std::string& stage) {
  if (!fs::exists(p)) throw Error(what + " " + p.string() + " not found; run `cfnet " + stage + "` first");
}

Manifest load_manifest(const fs::path& p) {
  require_file(p, "manifest", "dataset synth");
  return read_manifest(p);
}

CheckpointBundle load_ckpt(const fs::path& p, const std::string& stage) {
  require_file(p, "checkpoint", stage);
  return checkpoint_load(p);
}

template <typename F>
void write_file(const fs::path& p, F&& body) {
  std::ofstream os(p, std::ios::binary);
  body(os);
  if (!os) throw Error("cannot write " + p.string());
}

void write_curves_pretrain(const fs::path& p, const std::vector<PretrainRecord>& c) {
  write_file(p, [&](std::ostream& os) { write_pretrain_curves(os, c); });
}

std::string zero_pad(std::size_t i, std::size_t width) {
  std::string s = std::to_string(i);
  return std::string(s.size() < width ? width - s.size() : 0, '0') + s;
}

// id -> predicted label from a CSV with an "id" column and a "pred" column.
std::unordered_map<std::string, std::size_t> read_predictions(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw UsageError("cannot open predictions file " + p.string());
  std::string line;
  if (!std::getline(is, line)) throw FormatError("predictions file is empty");
  auto split = [](const std::string& l) {
    std::vector<std::string> f;
    std::stringstream ss(l);
    std::string x;
    while (std::getline(ss, x, ',')) {
      if (!x.empty() && x.back() == '\r') x.pop_back();
      f.push_back(x);
    }
    return f;
  };
  const auto header = split(line);
  std::size_t id_col = header.size(), pred_col = header.size();
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "id") id_col = i;
    if (header[i] == "pred") pred_col = i;
  }
  if (id_col == header.size() || pred_col == header.size()) {
    throw FormatError("predictions file needs 'id' and 'pred' columns");
  }
  std::unordered_map<std::string, std::size_t> out;
  while (std::getline(is, line)) {
    if (line.empty() || line == "\r") continue;
    const auto f = split(line);
    if (f.size() <= std::max(id_col, pred_col)) throw FormatError("short row in predictions file: " + line);
    std::size_t v = 0;
    try {
      std::size_t used = 0;
      v = std::stoul(f[pred_col], &used);
      if (used != f[pred_col].size()) throw std::invalid_argument("");
    } catch (const std::exception&) {
      throw FormatError("bad prediction '" + f[pred_col] + "'");
    }
    out[f[id_col]] = v;
  }
  return out;
}

void emit_report(const metrics::ConfusionMatrix& cm, const std::vector<std::string>& names,
                 const std::string& out) {
  const auto rep = metrics::report(cm);
  std::cout << metrics::format_report(rep, names);
  if (out.empty()) return;
  fs::create_directories(out);
  write_file(fs::path(out) / "metrics.csv", [&](std::ostream& os) { metrics::write_report_csv(os, rep, names); });
  write_file(fs::path(out) / "confusion.csv", [&](std::ostream& os) { metrics::write_confusion_csv(os, cm); });
  write_file(fs::path(out) / "report.txt", [&](std::ostream& os) { os << metrics::format_report(rep, names); });
}

model::ClassifierConfig classifier_for(const cli::RunConfig& c, const Manifest& m) {
  auto clf = c.classifier(m.num_classes());
  if (clf.use_hog && !m.rows.empty()) {
    const auto img = load_image(m.resolve(m.rows.front().path_1bit));
    clf.hog_dim = c.hog().descriptor_length(img.height, img.width);
  }
  return clf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CF-Net: 1-bit SAR reconstruction pretraining and classification"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "show help for every subcommand");

  // config
  Common cfg_c;
  auto* cfg_cmd = app.add_subcommand("config", "print every config key with its effective value and help");
  cfg_c.add(cfg_cmd, false);

  // dataset synth / preview
  auto* ds = app.add_subcommand("dataset", "synthesize or preview paired 1-bit/16-bit datasets");
  ds->require_subcommand(1);
  Common synth_c;
  auto* synth = ds->add_subcommand("synth", "simulate echoes, quantize, focus and write a manifest");
  synth_c.add(synth);
  synth_c.bind(synth, "--classes", "dataset.classes");
  synth_c.bind(synth, "--per-class", "dataset.per_class");
  synth_c.bind(synth, "--size", "dataset.size");
  synth_c.bind(synth, "--imbalance", "dataset.imbalance");

  std::string prev_manifest, prev_out;
  std::size_t prev_limit = 0;
  auto* preview = ds->add_subcommand("preview", "write PGM previews (1-bit | 16-bit) of manifest rows");
  preview->add_option("--manifest", prev_manifest, "manifest.csv")->required();
  preview->add_option("--out", prev_out, "output directory")->required();
  preview->add_option("--limit", prev_limit, "write at most N rows (0 = all)");

  // pretrain
  Common pre_c;
  std::string pre_manifest;
  auto* pre = app.add_subcommand("pretrain", "dual-branch self-supervised pretraining on the train split");
  pre_c.add(pre);
  pre->add_option("--manifest", pre_manifest, "dataset manifest.csv")->required();
  pre_c.bind(pre, "--epochs", "train.pretrain_epochs");
  pre_c.bind(pre, "--lr", "train.pretrain_lr");
  pre_c.bind(pre, "--preset", "loss.preset");

  // hog
  Common hog_c;
  std::string hog_manifest, hog_ckpt;
  auto* hog = app.add_subcommand("hog", "extract HOG descriptors for every row");
  hog_c.add(hog);
  hog->add_option("--manifest", hog_manifest, "dataset manifest.csv")->required();
  hog->add_option("--ckpt", hog_ckpt, "pretrain checkpoint (required for source=reconstructed)");
  hog_c.bind(hog, "--source", "hog.source");

  // finetune
  Common ft_c;
  std::string ft_manifest, ft_init = "scratch";
  auto* ft = app.add_subcommand("finetune", "two-phase supervised fine-tuning of the classifier");
  ft_c.add(ft);
  ft->add_option("--manifest", ft_manifest, "manifest.csv (from the hog stage unless hog.source=off)")->required();
  ft->add_option("--init", ft_init, "'scratch' or a pretrain checkpoint path")->capture_default_str();
  ft_c.bind(ft, "--head-epochs", "train.head_epochs");
  ft_c.bind(ft, "--full-epochs", "train.full_epochs");
  ft_c.bind(ft, "--lr", "train.finetune_lr");
  ft_c.bind(ft, "--scales", "model.scales_used");
  ft_c.bind(ft, "--hog-source", "hog.source");

  // eval
  Common ev_c;
  std::string ev_manifest, ev_model, ev_cfnet, ev_matrix, ev_preds;
  auto* ev = app.add_subcommand("eval", "evaluate a classifier; write metrics, confusion matrix and gallery");
  ev_c.add(ev, false);
  ev->add_option("--manifest", ev_manifest, "manifest.csv");
  ev->add_option("--model", ev_model, "classifier checkpoint from finetune");
  ev->add_option("--cfnet", ev_cfnet, "pretrain checkpoint; enables PSNR and the gallery");
  ev->add_option("--matrix-only", ev_matrix, "report metrics of a stored confusion matrix CSV and exit");
  ev->add_option("--predictions", ev_preds, "score a stored predictions CSV (id,pred columns) against the manifest");
  ev_c.bind(ev, "--split", "eval.split");
  ev_c.bind(ev, "--gallery", "eval.gallery");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*cfg_cmd) {
      const auto c = cfg_c.config();
      for (const auto& k : cli::known_keys()) {
        std::cout << "# " << k.help;
        if (!k.choices.empty()) {
          std::cout << " (";
          for (std::size_t i = 0; i < k.choices.size(); ++i) std::cout << (i ? "|" : "") << k.choices[i];
          std::cout << ")";
        }
        std::cout << "; default " << k.default_value << "\n" << k.key << " = " << c.get(k.key) << "\n";
      }
      if (!cfg_c.out.empty()) cfg_c.out_dir(c);
    } else if (*synth) {
      const auto c = synth_c.config();
      const auto dir = synth_c.out_dir(c);
      const auto m = synth_dataset(c.dataset(), c.radar(), dir);
      std::cerr << "wrote " << m.rows.size() << " pairs to " << (dir / "manifest.csv").string() << "\n";
    } else if (*preview) {
      const auto m = load_manifest(prev_manifest);
      fs::create_directories(prev_out);
      const std::size_t n = prev_limit == 0 ? m.rows.size() : std::min(prev_limit, m.rows.size());
      for (std::size_t i = 0; i < n; ++i) {
        const auto& r = m.rows[i];
        write_pgm(fs::path(prev_out) / (r.id + ".pgm"),
                  hconcat({load_image(m.resolve(r.path_1bit)), load_image(m.resolve(r.path_16bit))}));
      }
    } else if (*pre) {
      const auto c = pre_c.config();
      const auto m = load_manifest(pre_manifest);
      const auto pc = c.pretrain();
      const auto dir = pre_c.out_dir(c);
      const auto r = pretrain(m, pc, log_line);
      checkpoint_save(r.best, dir / "ckpt_best.cfck");
      checkpoint_save(r.final, dir / "ckpt_final.cfck");
      write_curves_pretrain(dir / "pretrain_curves.csv", r.curves);
    } else if (*hog) {
      const auto c = hog_c.config();
      const auto m = load_manifest(hog_manifest);
      const auto hc = c.hog_stage();
      std::optional<CheckpointBundle> ck;
      if (hc.source == HogSource::kReconstructed) {
        if (hog_ckpt.empty()) throw UsageError("hog.source=reconstructed needs --ckpt from `cfnet pretrain`");
        ck = load_ckpt(hog_ckpt, "pretrain");
      }
      const auto dir = hog_c.out_dir(c);
      extract_hog_stage(m, ck, hc, dir);
    } else if (*ft) {
      const auto c = ft_c.config();
      const auto m = load_manifest(ft_manifest);
      auto fc = c.finetune(m.num_classes());
      fc.classifier = classifier_for(c, m);
      if (fc.classifier.use_hog && !m.has_hog()) {
        throw UsageError("manifest " + ft_manifest + " has no HOG descriptors; run `cfnet hog` first or set hog.source=off");
      }
      std::optional<CheckpointBundle> init;
      if (ft_init != "scratch") init = load_ckpt(ft_init, "pretrain");
      const auto dir = ft_c.out_dir(c);
      const auto r = finetune(m, init, fc, log_line);
      checkpoint_save(r.best, dir / "clf_best.cfck");
      checkpoint_save(r.final, dir / "clf_final.cfck");
      write_file(dir / "finetune_curves.csv", [&](std::ostream& os) { write_finetune_curves(os, r.curves); });
      write_file(dir / "finetune_summary.csv", [&](std::ostream& os) {
        os << "init,best_val_acc,best_epoch\n"
           << (init ? "pretrained" : "scratch") << ',' << metrics::format_value(r.best_val_acc) << ',' << r.best_epoch
           << '\n';
      });
      std::cout << "best_val_acc " << metrics::format_value(r.best_val_acc) << " at epoch " << r.best_epoch << "\n";
    } else if (*ev) {
      if (!ev_matrix.empty()) {
        emit_report(metrics::load_confusion_csv(ev_matrix), {}, ev_c.out);
        return 0;
      }
      if (ev_manifest.empty()) throw UsageError("eval needs --manifest (or --matrix-only FILE)");
      const auto c = ev_c.config();
      const auto m = load_manifest(ev_manifest);
      const auto ec = c.eval();
      if (!ev_preds.empty()) {
        const auto preds = read_predictions(ev_preds);
        const auto rows = m.indices(ec.split);
        if (rows.empty()) throw ValueError("eval: the " + std::string(split_name(ec.split)) + " split is empty");
        std::vector<std::size_t> p, l;
        for (const auto i : rows) {
          const auto it = preds.find(m.rows[i].id);
          if (it == preds.end()) throw FormatError("predictions file has no row for id " + m.rows[i].id);
          if (it->second >= m.num_classes()) throw FormatError("prediction out of range for id " + m.rows[i].id);
          p.push_back(it->second);
          l.push_back(m.rows[i].label);
        }
        if (!ev_c.out.empty()) ev_c.out_dir(c);
        emit_report(metrics::confusion(p, l, m.num_classes()), m.classes, ev_c.out);
        return 0;
      }
      if (ev_model.empty()) throw UsageError("eval needs --model (or --predictions FILE / --matrix-only FILE)");
      if (ev_c.out.empty()) throw UsageError("eval needs --out");
      const auto model = load_ckpt(ev_model, "finetune");
      std::optional<CheckpointBundle> cf;
      if (!ev_cfnet.empty()) cf = load_ckpt(ev_cfnet, "pretrain");
      const auto r = evaluate(m, model, cf, ec);
      const auto dir = ev_c.out_dir(c);
      emit_report(r.confusion, m.classes, ev_c.out);
      write_file(dir / "predictions.csv", [&](std::ostream& os) {
        os << "id,label,pred\n";
        for (std::size_t i = 0; i < r.rows.size(); ++i) os << m.rows[r.rows[i]].id << ',' << r.labels[i] << ',' << r.preds[i] << '\n';
      });
      if (cf) {
        write_file(dir / "psnr.csv", [&](std::ostream& os) {
          os << "id,psnr_recon,psnr_1bit\n";
          for (std::size_t i = 0; i < r.rows.size(); ++i) {
            os << m.rows[r.rows[i]].id << ',' << metrics::format_value(r.psnr_recon[i]) << ','
               << metrics::format_value(r.psnr_1bit[i]) << '\n';
          }
          os << "mean," << metrics::format_value(mean(r.psnr_recon)) << ',' << metrics::format_value(mean(r.psnr_1bit))
             << '\n';
        });
        std::cout << "mean PSNR reconstructed " << metrics::format_value(mean(r.psnr_recon)) << " dB, 1-bit "
                  << metrics::format_value(mean(r.psnr_1bit)) << " dB\n";
        fs::create_directories(dir / "gallery");
        for (std::size_t i = 0; i < r.gallery.size(); ++i) {
          write_pgm(dir / "gallery" / ("triptych_" + zero_pad(i, 2) + ".pgm"), r.gallery[i]);
        }
      }
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
