#include "iwivig/cli.hpp"
#include "iwivig/dataset.hpp"
#include "iwivig/errors.hpp"
#include "iwivig/explanations.hpp"
#include "iwivig/metrics.hpp"
#include "iwivig/trainer.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <filesystem>
#include <memory>
#include <sstream>

namespace py = pybind11;
using namespace iwivig;

namespace {

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json from_py(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

// H x W x C float array in [0, 1] -> Image, resized and normalized like the loader.
Image image_from_array(py::array_t<double, py::array::c_style | py::array::forcecast> a, int input_side) {
  if (a.ndim() != 3) throw ConfigError("image array must be H x W x C");
  const auto h = static_cast<int>(a.shape(0));
  const auto w = static_cast<int>(a.shape(1));
  const auto c = static_cast<int>(a.shape(2));
  Image img(h, w, c);
  const double* src = a.data();
  std::copy(src, src + static_cast<std::ptrdiff_t>(h) * w * c, img.data.data());
  return minmax_normalize(resize(img, input_side, input_side));
}

py::array_t<double> image_to_array(const Image& img) {
  py::array_t<double> out({img.height, img.width, img.channels()});
  std::copy(img.data.data(), img.data.data() + img.data.size(), out.mutable_data());
  return out;
}

class PyModel {
 public:
  explicit PyModel(const std::string& checkpoint)
      : ckpt_(load_checkpoint(checkpoint)), model_(model_from_checkpoint(ckpt_)) {}

  int input_side() const { return ckpt_.model.input_side; }
  py::object config() const { return to_py({{"model", ckpt_.model}, {"train", ckpt_.train}}); }

  py::object explain_image(const Image& image, const std::string& image_id, double percentile) const {
    Explanation e = predict_with_explanation(*model_, image, image_id).second;
    if (percentile < 100.0) e = top_percentile_subgraph(e, percentile);
    return to_py(explanation_to_json(e));
  }

  py::object explain(const std::string& image_path, double percentile) const {
    const Image img = load_image(image_path, input_side());
    return explain_image(img, std::filesystem::path(image_path).filename().string(), percentile);
  }

  py::object explain_array(py::array_t<double> a, const std::string& image_id, double percentile) const {
    return explain_image(image_from_array(a, input_side()), image_id, percentile);
  }

  py::object evaluate_split(const std::string& manifest, const std::string& split) const {
    return to_py(evaluate(*model_, load_folder_dataset(manifest, split, input_side())).to_json());
  }

  py::object metrics(const std::string& manifest, const std::string& split, bool attributions, int max_images,
                     int ig_steps, int infidelity_samples, double percentile, std::uint64_t seed) const {
    MetricsOptions opt;
    opt.attributions = attributions;
    opt.max_attribution_images = max_images;
    opt.ig_steps = ig_steps;
    opt.infidelity_samples = infidelity_samples;
    opt.percentile = percentile;
    opt.seed = seed;
    return to_py(compute_metrics(*model_, load_folder_dataset(manifest, split, input_side()), opt).to_json());
  }

 private:
  Checkpoint ckpt_;
  std::unique_ptr<Model> model_;
};

py::tuple run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"iwivig"};
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  int code = 0;
  {
    py::gil_scoped_release release;
    code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  }
  return py::make_tuple(code, out.str(), err.str());
}

}  // namespace

PYBIND11_MODULE(_iwivig, m) {
  m.doc() = "Self-interpretable window vision GNN";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_IOError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def("cli", &run_cli, py::arg("args"), "Runs the command-line interface; returns (exit_code, stdout, stderr).");

  m.def(
      "generate_planted_dataset",
      [](int n, const std::string& out_dir, int input_side, std::uint64_t seed, int window_side) {
        const DatasetManifest manifest = generate_planted_dataset(n, input_side, seed, out_dir, window_side);
        py::dict counts;
        for (const auto& s : manifest.splits) counts[py::str(s.name)] = s.records.size();
        return counts;
      },
      py::arg("n"), py::arg("out_dir"), py::arg("input_side") = 128, py::arg("seed") = 0, py::arg("window_side") = 4);

  m.def(
      "knn_edges",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> features, int k) {
        if (features.ndim() != 2) throw ConfigError("features must be a 2-D array");
        Matrix f(features.shape(0), features.shape(1));
        std::copy(features.data(), features.data() + features.size(), f.data());
        const EdgeList e = knn_edges(f, k);
        return py::make_tuple(e.src, e.dst);
      },
      py::arg("features"), py::arg("k"), "Directed (src, dst) lists; each node receives edges from its k nearest neighbours.");

  m.def(
      "info_loss",
      [](const std::vector<double>& p, double r, const std::string& reduction) {
        if (reduction != "mean" && reduction != "sum") throw ConfigError("reduction must be 'mean' or 'sum'");
        return info_loss(p, r, reduction == "mean" ? LossReduction::Mean : LossReduction::Sum);
      },
      py::arg("p"), py::arg("r"), py::arg("reduction") = "mean");

  m.def(
      "pq_sparsity", [](const std::vector<double>& w, double p, double q) { return pq_sparsity(w, p, q); },
      py::arg("w"), py::arg("p") = 1.0, py::arg("q") = 2.0);

  m.def("random_inclusion_probability", &random_inclusion_probability, py::arg("total"), py::arg("kept"),
        py::arg("marked"));

  m.def(
      "top_percentile_subgraph",
      [](const py::object& explanation, double percentile) {
        return to_py(explanation_to_json(top_percentile_subgraph(explanation_from_json(from_py(explanation)),
                                                                 percentile)));
      },
      py::arg("explanation"), py::arg("percentile"));

  m.def(
      "render_overlay",
      [](py::array_t<double> image, const py::object& explanation) {
        const auto a = image.cast<py::array_t<double, py::array::c_style | py::array::forcecast>>();
        if (a.ndim() != 3) throw ConfigError("image array must be H x W x C");
        Image img(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2)));
        std::copy(a.data(), a.data() + a.size(), img.data.data());
        return image_to_array(render_overlay_image(img, explanation_from_json(from_py(explanation))));
      },
      py::arg("image"), py::arg("explanation"));

  m.def(
      "load_image", [](const std::string& path, int input_side) { return image_to_array(load_image(path, input_side)); },
      py::arg("path"), py::arg("input_side") = 128);

  py::class_<PyModel>(m, "Model")
      .def(py::init<const std::string&>(), py::arg("checkpoint"))
      .def_property_readonly("input_side", &PyModel::input_side)
      .def_property_readonly("config", &PyModel::config)
      .def("explain", &PyModel::explain, py::arg("image_path"), py::arg("percentile") = 5.0)
      .def("explain_array", &PyModel::explain_array, py::arg("image"), py::arg("image_id") = "array",
           py::arg("percentile") = 5.0)
      .def("evaluate", &PyModel::evaluate_split, py::arg("manifest"), py::arg("split") = "test")
      .def("metrics", &PyModel::metrics, py::arg("manifest"), py::arg("split") = "test", py::arg("attributions") = true,
           py::arg("max_attribution_images") = -1, py::arg("ig_steps") = 32, py::arg("infidelity_samples") = 16,
           py::arg("percentile") = 5.0, py::arg("seed") = 0);
}
