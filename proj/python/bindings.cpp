// Copyright 2026 The dplot-lab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Python bindings for the core operations. Images cross the boundary as
// float32 arrays of shape (N, 3, 16, 16); structured results come back as
// JSON text that the package wrapper decodes.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dplot/adapt.hpp"
#include "dplot/checkpoint.hpp"
#include "dplot/data.hpp"
#include "dplot/harness.hpp"
#include "dplot/losses.hpp"
#include "dplot/selection.hpp"

namespace py = pybind11;
using namespace dplot;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using IntArray = py::array_t<int, py::array::c_style | py::array::forcecast>;

template <class T, class A>
Tensor<T> to_tensor(const A& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  Tensor<T> t(shape);
  std::memcpy(t.ptr(), a.data(), t.size() * sizeof(T));
  return t;
}

template <class T>
py::array_t<T> to_array(const Tensor<T>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<T> a(shape);
  std::memcpy(a.mutable_data(), t.ptr(), t.size() * sizeof(T));
  return a;
}

py::array_t<int> to_array(const std::vector<int>& v) {
  py::array_t<int> a(static_cast<py::ssize_t>(v.size()));
  std::memcpy(a.mutable_data(), v.data(), v.size() * sizeof(int));
  return a;
}

ImageBatch to_batch(const FloatArray& images, const IntArray& labels) {
  ImageBatch b{to_tensor<float>(images), {}};
  b.labels.assign(labels.data(), labels.data() + labels.size());
  if (b.labels.size() != b.size()) throw ShapeError("images and labels disagree in length");
  return b;
}

RunConfig config_from(const std::string& path, const std::map<std::string, std::string>& overrides) {
  ConfigFile file = ConfigFile::load(path);
  for (const auto& [k, v] : overrides) file.set(k, v);
  return RunConfig::from_file(file);
}

class Model {
 public:
  explicit Model(BlockNet<float> net) : net_(std::move(net)) {}
  static Model fresh(std::size_t classes, std::uint64_t seed) {
    Rng rng(seed);
    return Model(BlockNet<float>::build(desk_arch(classes), rng));
  }
  static Model load(const std::string& path) { return Model(load_checkpoint<float>(path)); }
  void save(const std::string& path) const { save_checkpoint(net_, path); }

  py::tuple infer(const FloatArray& images, const std::string& mode) {
    ForwardOptions opts;
    if (mode == "batch") {
      opts = ForwardOptions::batch(false);
    } else if (mode != "running") {
      throw ConfigError("mode must be 'running' or 'batch'");
    }
    const auto out = net_.infer(to_tensor<float>(images), opts);
    return py::make_tuple(to_array(out.features), to_array(out.logits));
  }

  std::size_t num_blocks() const { return net_.num_blocks(); }
  std::size_t num_classes() const { return net_.num_classes(); }
  std::size_t param_count() const { return net_.scalar_param_count(); }
  BlockNet<float>& net() { return net_; }

 private:
  BlockNet<float> net_;
};

class Adapter {
 public:
  Adapter(const Model& source, const std::string& method, std::vector<std::size_t> selected,
          double lr_entropy, double lr_consistency, double alpha, bool ensemble, std::uint64_t seed) {
    AdaptConfig cfg;
    cfg.selected_blocks = std::move(selected);
    cfg.lr_entropy = lr_entropy;
    cfg.lr_consistency = lr_consistency;
    cfg.alpha = alpha;
    cfg.ensemble = ensemble;
    Model copy = source;
    state_.emplace(AdaptState<float>::create(copy.net(), parse_method(method), cfg, seed));
  }

  py::dict step(const FloatArray& images) {
    const StepOutput out = adapt_step(*state_, to_tensor<float>(images));
    py::dict d;
    d["predictions"] = to_array(out.predictions);
    d["logits"] = to_array(out.logits);
    d["mean_entropy"] = out.mean_entropy;
    d["agreement"] = out.agreement;
    d["entropy_loss"] = out.entropy_loss;
    d["consistency_loss"] = out.consistency_loss;
    return d;
  }

  Model student() const { return Model(state_->student); }
  Model teacher() const { return Model(state_->teacher); }
  std::int64_t steps() const { return state_->step; }

 private:
  std::optional<AdaptState<float>> state_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Test-time adaptation lab core";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);

  m.def("gen_shapegrid", [](std::size_t n, std::size_t classes, std::uint64_t seed) {
    Rng rng(seed);
    const ImageBatch b = gen_shapegrid(n, classes, rng);
    return py::make_tuple(to_array(b.images), to_array(b.labels));
  }, py::arg("n"), py::arg("classes") = 4, py::arg("seed") = 0);

  m.def("corrupt", [](const FloatArray& images, const std::string& kind, int severity,
                      std::uint64_t seed) {
    Rng rng(seed);
    return to_array(corrupt(to_tensor<float>(images), {parse_corruption(kind), severity}, rng));
  }, py::arg("images"), py::arg("kind"), py::arg("severity"), py::arg("seed") = 0);

  m.def("flip_h", [](const FloatArray& images) { return to_array(flip_h(to_tensor<float>(images))); });

  m.def("corruptions", [] {
    std::vector<std::string> names;
    for (auto k : all_corruptions()) names.push_back(to_string(k));
    return names;
  });

  m.def("entropy_loss", [](const DoubleArray& p) { return entropy_loss(to_tensor<double>(p)); });
  m.def("sce_loss", [](const DoubleArray& a, const DoubleArray& b) {
    return sce_loss(to_tensor<double>(a), to_tensor<double>(b));
  });

  m.def("minmax_scale", [](const std::vector<double>& s) {
    const auto r = minmax_scale(s);
    return py::make_tuple(r.values, r.degenerate);
  });
  m.def("threshold_blocks", [](const std::vector<double>& scaled, double gamma) {
    return threshold_blocks(scaled, gamma);
  }, py::arg("scaled"), py::arg("gamma"));

  py::class_<Model>(m, "Model")
      .def(py::init(&Model::fresh), py::arg("classes") = 4, py::arg("seed") = 7)
      .def_static("load", &Model::load, py::arg("path"))
      .def("save", &Model::save, py::arg("path"))
      .def("infer", &Model::infer, py::arg("images"), py::arg("mode") = "running")
      .def_property_readonly("num_blocks", &Model::num_blocks)
      .def_property_readonly("num_classes", &Model::num_classes)
      .def_property_readonly("param_count", &Model::param_count);

  m.def("_select_blocks", [](Model& model, const FloatArray& images, const IntArray& labels,
                             double gamma, std::uint64_t seed, std::size_t epochs,
                             std::size_t batch_size, double lr) {
    SelectionConfig cfg;
    cfg.epochs = epochs;
    cfg.batch_size = batch_size;
    cfg.lr = lr;
    return select_blocks(model.net(), to_batch(images, labels), gamma, Perturbation{}, cfg, seed)
        .to_json()
        .dump();
  });

  py::class_<Adapter>(m, "Adapter")
      .def(py::init<const Model&, const std::string&, std::vector<std::size_t>, double, double,
                    double, bool, std::uint64_t>(),
           py::arg("model"), py::arg("method") = "dplot",
           py::arg("selected_blocks") = std::vector<std::size_t>{}, py::arg("lr_entropy") = 1e-3,
           py::arg("lr_consistency") = 1e-4, py::arg("alpha") = 0.999, py::arg("ensemble") = true,
           py::arg("seed") = 0)
      .def("step", &Adapter::step, py::arg("images"))
      .def("student", &Adapter::student)
      .def("teacher", &Adapter::teacher)
      .def_property_readonly("steps", &Adapter::steps);

  m.def("_pretrain", [](const std::string& path, const std::map<std::string, std::string>& ov) {
    const RunConfig cfg = config_from(path, ov);
    const Datasets data = make_datasets(cfg.data, cfg.data_dir);
    PretrainResult r;
    const BlockNet<float> model = build_and_pretrain<float>(cfg, data, &r);
    save_checkpoint(model, cfg.checkpoint_path);
    return r.val_error;
  });

  m.def("_run", [](const std::string& kind, const std::string& path,
                   const std::map<std::string, std::string>& ov) {
    const RunConfig cfg = config_from(path, ov);
    const Datasets data = make_datasets(cfg.data, cfg.data_dir);
    const BlockNet<float> model = load_checkpoint<float>(cfg.checkpoint_path);
    Report report;
    if (kind == "bench") {
      report = run_benchmark(model, cfg, data);
    } else if (kind == "ablate") {
      report = run_ablation(model, cfg, data);
    } else if (kind == "single-sample") {
      report = run_single_sample(model, cfg, data);
    } else {
      throw ConfigError("unknown run kind '" + kind + "'");
    }
    return report.to_json().dump();
  });
}
