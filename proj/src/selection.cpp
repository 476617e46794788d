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

#include "dplot/selection.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "dplot/adam.hpp"
#include "dplot/error.hpp"
#include "dplot/losses.hpp"
#include "dplot/ops.hpp"

namespace dplot {
using nlohmann::json;

namespace {

template <class T>
Tensor<T> from_float(const Tensor<float>& t) {
  if constexpr (std::is_same_v<T, float>) {
    return t;
  } else {
    return t.template cast<T>();
  }
}

std::vector<std::size_t> range_indices(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx(end - begin);
  for (std::size_t i = begin; i < end; ++i) idx[i - begin] = i;
  return idx;
}

std::string perturbation_name(PerturbationKind k) {
  switch (k) {
    case PerturbationKind::gaussian: return "gaussian";
    case PerturbationKind::brightness: return "brightness";
    case PerturbationKind::contrast: return "contrast";
  }
  return "unknown";
}

}  // namespace

PrototypeSet prototypes_from_features(const Tensor<double>& features,
                                      const std::vector<int>& labels, std::size_t classes) {
  if (features.rank() != 2 || features.dim(0) != labels.size()) {
    throw ShapeError("prototypes: features " + shape_str(features.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t d = features.dim(1);
  std::vector<double> sum(classes * d, 0.0), comp(classes * d, 0.0);
  PrototypeSet p{Tensor<double>({classes, d}), std::vector<std::size_t>(classes, 0)};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw ShapeError("prototypes: label " + std::to_string(labels[i]) + " out of range");
    }
    const auto c = static_cast<std::size_t>(labels[i]);
    ++p.counts[c];
    for (std::size_t j = 0; j < d; ++j) {
      // Kahan summation.
      const double y = features.ptr()[i * d + j] - comp[c * d + j];
      const double t = sum[c * d + j] + y;
      comp[c * d + j] = (t - sum[c * d + j]) - y;
      sum[c * d + j] = t;
    }
  }
  for (std::size_t c = 0; c < classes; ++c) {
    if (p.counts[c] == 0) {
      throw ConfigError("prototypes: class " + std::to_string(c) + " has no sample");
    }
    for (std::size_t j = 0; j < d; ++j) {
      p.means[c * d + j] = sum[c * d + j] / static_cast<double>(p.counts[c]);
    }
  }
  return p;
}

template <class T>
PrototypeSet compute_prototypes(BlockNet<T>& model, const ImageBatch& data,
                                std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("prototype batch_size must be positive");
  const std::size_t d = model.feature_dim();
  Tensor<double> features({data.size(), d});
  for (std::size_t s = 0; s < data.size(); s += batch_size) {
    const std::size_t e = std::min(data.size(), s + batch_size);
    const ImageBatch b = gather(data, range_indices(s, e));
    const Tensor<T> f = model.infer(from_float<T>(b.images), ForwardOptions::running()).features;
    for (std::size_t i = 0; i < f.size(); ++i) features[s * d + i] = static_cast<double>(f[i]);
  }
  return prototypes_from_features(features, data.labels, model.num_classes());
}

double prototype_similarity(const PrototypeSet& a, const PrototypeSet& b) {
  if (a.means.shape() != b.means.shape() || a.means.rank() != 2) {
    throw ShapeError("prototype_similarity: shapes " + shape_str(a.means.shape()) + " and " +
                     shape_str(b.means.shape()) + " differ");
  }
  const std::size_t c = a.means.dim(0), d = a.means.dim(1);
  double total = 0.0;
  for (std::size_t k = 0; k < c; ++k) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double x = a.means[k * d + j], y = b.means[k * d + j];
      dot += x * y;
      na += x * x;
      nb += y * y;
    }
    if (na == 0.0 || nb == 0.0) {
      throw NumericError("prototype_similarity: class " + std::to_string(k) +
                         " has a zero-norm prototype");
    }
    total += std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
  }
  return total / static_cast<double>(c);
}

ScaledSimilarities minmax_scale(std::span<const double> s) {
  if (s.empty()) throw ConfigError("minmax_scale needs at least one value");
  const auto [lo, hi] = std::minmax_element(s.begin(), s.end());
  ScaledSimilarities out;
  out.values.resize(s.size());
  if (*hi == *lo) {
    std::fill(out.values.begin(), out.values.end(), 1.0);
    out.degenerate = true;
    out.warning = "all similarities equal; scaled values set to 1.0";
    return out;
  }
  const double range = *hi - *lo;
  for (std::size_t i = 0; i < s.size(); ++i) out.values[i] = (s[i] - *lo) / range;
  return out;
}

std::vector<std::size_t> threshold_blocks(std::span<const double> scaled, double gamma) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < scaled.size(); ++i) {
    if (scaled[i] > gamma) out.push_back(i + 1);
  }
  return out;
}

json Perturbation::to_json() const {
  json j = {{"kind", perturbation_name(kind)}};
  if (kind == PerturbationKind::gaussian) {
    j["mean"] = mean;
    j["variance"] = variance;
  } else {
    j["factor"] = factor;
  }
  return j;
}

Perturbation Perturbation::from_json(const json& j) {
  Perturbation p;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "gaussian") {
    p.kind = PerturbationKind::gaussian;
    p.mean = j.value("mean", 0.0);
    p.variance = j.value("variance", 0.5);
  } else if (kind == "brightness" || kind == "contrast") {
    p.kind = kind == "brightness" ? PerturbationKind::brightness : PerturbationKind::contrast;
    p.factor = j.value("factor", 2.0);
  } else {
    throw ConfigError("unknown perturbation '" + kind + "'");
  }
  return p;
}

std::string Perturbation::describe() const {
  std::ostringstream os;
  if (kind == PerturbationKind::gaussian) {
    os << "gaussian(mean=" << mean << ",variance=" << variance << ")";
  } else {
    os << perturbation_name(kind) << "(x" << factor << ")";
  }
  return os.str();
}

Tensor<float> apply_perturbation(const Tensor<float>& images, const Perturbation& p, Rng& rng) {
  if (images.rank() != 4) throw ShapeError("apply_perturbation expects N x C x H x W");
  Tensor<float> out = images;
  auto d = out.data();
  switch (p.kind) {
    case PerturbationKind::gaussian: {
      if (p.variance < 0.0) throw ConfigError("perturbation variance must be >= 0");
      const double sd = std::sqrt(p.variance);
      for (auto& v : d) v = std::clamp(static_cast<float>(v + rng.normal(p.mean, sd)), 0.0f, 1.0f);
      break;
    }
    case PerturbationKind::brightness:
      for (auto& v : d) v = std::clamp(static_cast<float>(v * p.factor), 0.0f, 1.0f);
      break;
    case PerturbationKind::contrast: {
      const std::size_t per = images.size() / images.dim(0);
      for (std::size_t n = 0; n < images.dim(0); ++n) {
        float* img = out.ptr() + n * per;
        double total = 0.0;
        for (std::size_t k = 0; k < per; ++k) total += img[k];
        const double mean = total / static_cast<double>(per);
        for (std::size_t k = 0; k < per; ++k) {
          img[k] = std::clamp(static_cast<float>((img[k] - mean) * p.factor + mean), 0.0f, 1.0f);
        }
      }
      break;
    }
  }
  return out;
}

template <class T>
double block_sensitivity(BlockNet<T>& model, const PrototypeSet& clean_prototypes,
                         const ImageBatch& clean, const ImageBatch& perturbed,
                         std::size_t block, const SelectionConfig& config) {
  if (block < 1 || block > model.num_blocks()) {
    throw std::out_of_range("block " + std::to_string(block) + " outside 1.." +
                            std::to_string(model.num_blocks()));
  }
  if (config.batch_size < 2) throw ConfigError("selection batch_size must be at least 2");
  const ParamImage<T> saved = model.snapshot();
  const std::vector<ParamId> trainable = model.block_params(block);
  AdamState<T> opt({config.lr}, trainable, model.params());
  try {
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
      for (std::size_t s = 0; s + 2 <= perturbed.size(); s += config.batch_size) {
        const std::size_t e = std::min(perturbed.size(), s + config.batch_size);
        const ImageBatch b = gather(perturbed, range_indices(s, e));
        Tape<T> tape;
        auto fv = model.forward(tape, from_float<T>(b.images), ForwardOptions::batch(false),
                                trainable);
        const Var<T> loss = entropy_loss(softmax(fv.logits));
        opt.apply(model.params(), tape.backward(loss));
      }
    }
    const double s = prototype_similarity(clean_prototypes, compute_prototypes(model, clean));
    model.restore(saved);
    return s;
  } catch (...) {
    model.restore(saved);
    throw;
  }
}

json SelectionReport::to_json() const {
  json blocks = json::array();
  for (std::size_t i = 0; i < raw.size(); ++i) {
    blocks.push_back({{"block", i + 1}, {"raw", raw[i]}, {"scaled", scaled[i]}});
  }
  json j = {{"gamma", gamma},
            {"selected", selected},
            {"blocks", blocks},
            {"perturbation", perturbation.to_json()},
            {"epochs", config.epochs},
            {"batch_size", config.batch_size},
            {"lr", config.lr},
            {"seed", seed}};
  if (!warning.empty()) j["warning"] = warning;
  return j;
}

SelectionReport SelectionReport::from_json(const json& j) {
  SelectionReport r;
  try {
    r.gamma = j.at("gamma").get<double>();
    r.selected = j.at("selected").get<std::vector<std::size_t>>();
    for (const auto& b : j.at("blocks")) {
      r.raw.push_back(b.at("raw").get<double>());
      r.scaled.push_back(b.at("scaled").get<double>());
    }
    r.perturbation = Perturbation::from_json(j.at("perturbation"));
    r.config.epochs = j.value("epochs", std::size_t{1});
    r.config.batch_size = j.value("batch_size", std::size_t{64});
    r.config.lr = j.value("lr", 1e-3);
    r.seed = j.value("seed", std::uint64_t{0});
    r.warning = j.value("warning", std::string());
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed selection report: ") + e.what());
  }
  return r;
}

void save_selection(const SelectionReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  out << report.to_json().dump(2) << "\n";
  if (!out) throw FormatError("cannot write " + path);
}

SelectionReport load_selection(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read selection report " + path);
  try {
    return SelectionReport::from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("unparseable selection report: ") + e.what());
  }
}

template <class T>
SelectionReport select_blocks(BlockNet<T>& model, const ImageBatch& source, double gamma,
                              const Perturbation& perturbation, const SelectionConfig& config,
                              std::uint64_t seed) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
  SelectionReport r;
  r.gamma = gamma;
  r.perturbation = perturbation;
  r.config = config;
  r.seed = seed;
  const PrototypeSet clean = compute_prototypes(model, source);
  Rng rng(seed);
  const ImageBatch perturbed{apply_perturbation(source.images, perturbation, rng), source.labels};
  for (std::size_t b = 1; b <= model.num_blocks(); ++b) {
    r.raw.push_back(block_sensitivity(model, clean, source, perturbed, b, config));
  }
  ScaledSimilarities scaled = minmax_scale(r.raw);
  r.scaled = std::move(scaled.values);
  r.warning = scaled.warning;
  r.selected = threshold_blocks(r.scaled, gamma);
  return r;
}

template PrototypeSet compute_prototypes(BlockNet<float>&, const ImageBatch&, std::size_t);
template PrototypeSet compute_prototypes(BlockNet<double>&, const ImageBatch&, std::size_t);
template double block_sensitivity(BlockNet<float>&, const PrototypeSet&, const ImageBatch&,
                                  const ImageBatch&, std::size_t, const SelectionConfig&);
template double block_sensitivity(BlockNet<double>&, const PrototypeSet&, const ImageBatch&,
                                  const ImageBatch&, std::size_t, const SelectionConfig&);
template SelectionReport select_blocks(BlockNet<float>&, const ImageBatch&, double,
                                       const Perturbation&, const SelectionConfig&,
                                       std::uint64_t);
template SelectionReport select_blocks(BlockNet<double>&, const ImageBatch&, double,
                                       const Perturbation&, const SelectionConfig&,
                                       std::uint64_t);

}  // namespace dplot
