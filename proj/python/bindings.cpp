#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <fstream>
#include <sstream>

#include "cfnet/cli/config.hpp"
#include "cfnet/features/features.hpp"
#include "cfnet/metrics/metrics.hpp"
#include "cfnet/pipeline/dataset.hpp"
#include "cfnet/pipeline/stages.hpp"
#include "cfnet/sarsim/sarsim.hpp"

namespace py = pybind11;
using namespace cfnet;
using namespace cfnet::pipeline;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using ComplexArray = py::array_t<std::complex<float>, py::array::c_style | py::array::forcecast>;

Image to_image(const FloatArray& a) {
  if (a.ndim() != 2) throw py::value_error("expected a 2-D array");
  Image img(a.shape(0), a.shape(1));
  std::copy(a.data(), a.data() + a.size(), img.pixels.begin());
  return img;
}

py::array_t<float> from_image(const Image& img) {
  py::array_t<float> out({img.height, img.width});
  std::copy(img.pixels.begin(), img.pixels.end(), out.mutable_data());
  return out;
}

sar::ComplexMatrix to_matrix(const ComplexArray& a) {
  if (a.ndim() != 2) throw py::value_error("expected a 2-D complex array");
  sar::ComplexMatrix m(a.shape(0), a.shape(1));
  std::copy(a.data(), a.data() + a.size(), m.values().begin());
  return m;
}

py::array_t<std::complex<float>> from_matrix(const sar::ComplexMatrix& m) {
  py::array_t<std::complex<float>> out({m.n_range(), m.n_azimuth()});
  std::copy(m.values().begin(), m.values().end(), out.mutable_data());
  return out;
}

py::dict report_dict(const metrics::MetricReport& r) {
  py::list per;
  for (const auto& c : r.per_class) {
    py::dict d;
    d["precision"] = c.precision;
    d["recall"] = c.recall;
    d["f1"] = c.f1;
    d["support"] = c.support;
    per.append(d);
  }
  py::dict d;
  d["accuracy"] = r.accuracy;
  d["macro_precision"] = r.macro_precision;
  d["macro_recall"] = r.macro_recall;
  d["macro_f1"] = r.macro_f1;
  d["total"] = r.total;
  d["per_class"] = per;
  return d;
}

metrics::ConfusionMatrix to_confusion(const py::array_t<long long, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2 || a.shape(0) != a.shape(1)) throw py::value_error("expected a square 2-D matrix");
  metrics::ConfusionMatrix m(a.shape(0));
  for (py::ssize_t i = 0; i < a.shape(0); ++i)
    for (py::ssize_t j = 0; j < a.shape(1); ++j) {
      const auto v = a.at(i, j);
      if (v < 0) throw py::value_error("negative count");
      m.at(i, j) = static_cast<std::size_t>(v);
    }
  return m;
}

std::string curves_text(const std::vector<PretrainRecord>& c) {
  std::ostringstream os;
  write_pretrain_curves(os, c);
  return os.str();
}

}  // namespace

PYBIND11_MODULE(_cfnet, m) {
  m.doc() = "CF-Net 1-bit SAR reconstruction and classification";

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ValueError>(m, "ValueError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_RuntimeError);

  py::class_<sar::RadarParams>(m, "RadarParams")
      .def(py::init<>())
      .def_readwrite("wavelength", &sar::RadarParams::wavelength)
      .def_readwrite("chirp_rate", &sar::RadarParams::chirp_rate)
      .def_readwrite("pulse_duration", &sar::RadarParams::pulse_duration)
      .def_readwrite("sample_rate", &sar::RadarParams::sample_rate)
      .def_readwrite("prf", &sar::RadarParams::prf)
      .def_readwrite("velocity", &sar::RadarParams::velocity)
      .def_readwrite("ref_range", &sar::RadarParams::ref_range)
      .def_readwrite("range_spacing", &sar::RadarParams::range_spacing)
      .def_readwrite("azimuth_spacing", &sar::RadarParams::azimuth_spacing)
      .def_readwrite("n_range", &sar::RadarParams::n_range)
      .def_readwrite("n_azimuth", &sar::RadarParams::n_azimuth)
      .def_readwrite("migration", &sar::RadarParams::migration)
      .def("validate", &sar::RadarParams::validate);

  m.def("quantize_1bit", [](const ComplexArray& echo) { return from_matrix(sar::quantize_1bit(to_matrix(echo))); },
        py::arg("echo"));
  m.def("simulate_echo",
        [](const FloatArray& target, const sar::RadarParams& p) {
          return from_matrix(sar::simulate_echo(to_image(target), p));
        },
        py::arg("target"), py::arg("params") = sar::RadarParams{});
  m.def("rda",
        [](const ComplexArray& echo, const sar::RadarParams& p) { return from_matrix(sar::rda(to_matrix(echo), p)); },
        py::arg("echo"), py::arg("params") = sar::RadarParams{});
  m.def("generate_pair",
        [](const FloatArray& target, const sar::RadarParams& p) {
          const auto pair = sar::generate_pair(to_image(target), p);
          return py::make_tuple(from_image(pair.img_16bit), from_image(pair.img_1bit));
        },
        py::arg("target"), py::arg("params") = sar::RadarParams{},
        "(image_16bit, image_1bit) focused from full-precision and sign-quantized echoes");

  m.def("hog",
        [](const FloatArray& image, std::size_t cell, std::size_t bins, std::size_t block, std::size_t block_stride,
           double clip) {
          const auto img = to_image(image);
          features::HogConfig c;
          c.cell = cell;
          c.bins = bins;
          c.block = block;
          c.block_stride = block_stride;
          c.clip = clip;
          c.validate();
          const auto v = features::hog_extract(img.pixels, img.height, img.width, c);
          return py::array_t<float>(v.size(), v.data());
        },
        py::arg("image"), py::arg("cell") = 8, py::arg("bins") = 9, py::arg("block") = 2, py::arg("block_stride") = 1,
        py::arg("clip") = 0.2);
  m.def("har_aggregate",
        [](const FloatArray& cube) {
          if (cube.ndim() != 4) throw py::value_error("expected a [C, T, H, W] array");
          features::RadarCube c(cube.shape(0), cube.shape(1), cube.shape(2), cube.shape(3));
          std::copy(cube.data(), cube.data() + cube.size(), c.values.begin());
          const auto v = features::har_aggregate(c);
          py::array_t<float> out({c.height, c.width});
          std::copy(v.begin(), v.end(), out.mutable_data());
          return out;
        },
        py::arg("cube"));

  m.def("psnr",
        [](const FloatArray& a, const FloatArray& b, double peak) {
          if (a.size() != b.size()) throw py::value_error("arrays differ in size");
          return metrics::psnr({a.data(), static_cast<std::size_t>(a.size())},
                               {b.data(), static_cast<std::size_t>(b.size())}, peak);
        },
        py::arg("a"), py::arg("b"), py::arg("peak") = 1.0);
  m.def("report_from_confusion", [](const py::array_t<long long, py::array::c_style | py::array::forcecast>& cm) {
    return report_dict(metrics::report(to_confusion(cm)));
  });
  m.def("report_from_predictions",
        [](const std::vector<std::size_t>& preds, const std::vector<std::size_t>& labels, std::size_t classes) {
          return report_dict(metrics::report(metrics::confusion(preds, labels, classes)));
        },
        py::arg("preds"), py::arg("labels"), py::arg("classes"));
  m.def("load_confusion_csv", [](const std::filesystem::path& p) {
    const auto cm = metrics::load_confusion_csv(p);
    py::array_t<long long> out({cm.classes(), cm.classes()});
    for (std::size_t i = 0; i < cm.classes(); ++i)
      for (std::size_t j = 0; j < cm.classes(); ++j) out.mutable_at(i, j) = static_cast<long long>(cm.at(i, j));
    return out;
  });

  py::class_<cli::RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def_static("from_file", &cli::RunConfig::from_file, py::arg("path"))
      .def("set", &cli::RunConfig::set, py::arg("key"), py::arg("value"))
      .def("apply", [](cli::RunConfig& c, const std::string& s) { c.apply(s); }, py::arg("assignment"))
      .def("merge_text", [](cli::RunConfig& c, const std::string& t) { c.merge_text(t, "<python>"); })
      .def("get", &cli::RunConfig::get, py::arg("key"))
      .def("resolved", &cli::RunConfig::resolved)
      .def("__getitem__", &cli::RunConfig::get)
      .def("__setitem__", [](cli::RunConfig& c, const std::string& k, py::object v) {
        c.set(k, py::isinstance<py::bool_>(v) ? (v.cast<bool>() ? "true" : "false") : std::string(py::str(v)));
      });
  m.def("config_keys", [] {
    py::list out;
    for (const auto& k : cli::known_keys()) out.append(py::make_tuple(k.key, k.default_value, k.help));
    return out;
  });

  m.def("synth_dataset",
        [](const cli::RunConfig& c, const std::filesystem::path& out) {
          return synth_dataset(c.dataset(), c.radar(), out).rows.size();
        },
        py::arg("config"), py::arg("out_dir"), "writes out_dir/manifest.csv and the image files; returns the row count");
  m.def("read_manifest",
        [](const std::filesystem::path& p) {
          const auto man = read_manifest(p);
          py::list rows;
          for (const auto& r : man.rows) {
            py::dict d;
            d["id"] = r.id;
            d["path_1bit"] = man.resolve(r.path_1bit);
            d["path_16bit"] = man.resolve(r.path_16bit);
            d["label"] = r.label;
            d["split"] = std::string(split_name(r.split));
            d["path_hog"] = r.path_hog.empty() ? std::filesystem::path() : man.resolve(r.path_hog);
            rows.append(d);
          }
          return py::make_tuple(man.classes, rows);
        },
        py::arg("path"), "(class_names, rows)");
  m.def("load_image", [](const std::filesystem::path& p) { return from_image(load_image(p)); });

  m.def("pretrain",
        [](const std::filesystem::path& manifest, const cli::RunConfig& c, const std::filesystem::path& out) {
          const auto man = read_manifest(manifest);
          const auto cfg = c.pretrain();
          PretrainResult r;
          {
            py::gil_scoped_release release;
            r = pretrain(man, cfg);
          }
          std::filesystem::create_directories(out);
          c.write_resolved(out / "config.resolved");
          checkpoint_save(r.best, out / "ckpt_best.cfck");
          checkpoint_save(r.final, out / "ckpt_final.cfck");
          std::ofstream(out / "pretrain_curves.csv", std::ios::binary) << curves_text(r.curves);
          py::list curves;
          for (const auto& e : r.curves) {
            py::dict d;
            d["epoch"] = e.epoch;
            d["l_rec"] = e.l_rec;
            d["l_con"] = e.l_con;
            d["l_align"] = e.l_align;
            d["l_sep"] = e.l_sep;
            d["l_total"] = e.l_total;
            curves.append(d);
          }
          return curves;
        },
        py::arg("manifest"), py::arg("config"), py::arg("out_dir"),
        "runs pretraining, writes ckpt_best/ckpt_final/pretrain_curves.csv, returns the per-epoch losses");
  m.def("reconstruct",
        [](const std::filesystem::path& ckpt, const FloatArray& images) {
          if (images.ndim() != 3) throw py::value_error("expected an [N, H, W] array");
          const auto b = checkpoint_load(ckpt);
          const std::size_t n = images.shape(0), h = images.shape(1), w = images.shape(2);
          std::vector<Image> x(n, Image(h, w));
          for (std::size_t i = 0; i < n; ++i) std::copy_n(images.data() + i * h * w, h * w, x[i].pixels.begin());
          std::vector<Image> rec;
          {
            py::gil_scoped_release release;
            rec = reconstruct(b.params, read_encoder_meta(b), x);
          }
          py::array_t<float> out({n, h, w});
          for (std::size_t i = 0; i < n; ++i) std::copy(rec[i].pixels.begin(), rec[i].pixels.end(), out.mutable_data() + i * h * w);
          return out;
        },
        py::arg("checkpoint"), py::arg("images_1bit"));
}
