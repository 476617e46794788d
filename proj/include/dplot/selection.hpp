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

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dplot/data.hpp"
#include "dplot/model.hpp"
#include "dplot/rng.hpp"
#include "dplot/tensor.hpp"

namespace dplot {

// Class-mean feature vectors (C x d) and the number of images behind each.
struct PrototypeSet {
  Tensor<double> means;
  std::vector<std::size_t> counts;

  std::size_t num_classes() const { return counts.size(); }
};

// Compensated per-class means of features[N x d]. Throws ConfigError when a
// class in [0, classes) has no sample.
PrototypeSet prototypes_from_features(const Tensor<double>& features,
                                      const std::vector<int>& labels, std::size_t classes);

// Features from running-stats forwards in chunks of batch_size.
template <class T>
PrototypeSet compute_prototypes(BlockNet<T>& model, const ImageBatch& data,
                                std::size_t batch_size = 64);

// Mean over classes of the cosine similarity of matching prototypes. Throws
// NumericError for a zero-norm prototype.
double prototype_similarity(const PrototypeSet& a, const PrototypeSet& b);

struct ScaledSimilarities {
  std::vector<double> values;
  bool degenerate = false;  // max == min; every value is then 1.0
  std::string warning;
};

ScaledSimilarities minmax_scale(std::span<const double> s);

// 1-based indices i with scaled[i] > gamma.
std::vector<std::size_t> threshold_blocks(std::span<const double> scaled, double gamma);

enum class PerturbationKind { gaussian, brightness, contrast };

// Perturbation applied to the source set before the per-block entropy
// minimisation. gaussian adds N(mean, variance); brightness and contrast
// multiply pixels (contrast about the per-image mean) by `factor`. Results
// are clamped to [0, 1].
struct Perturbation {
  PerturbationKind kind = PerturbationKind::gaussian;
  double mean = 0.0;
  double variance = 0.5;
  double factor = 2.0;

  nlohmann::json to_json() const;
  static Perturbation from_json(const nlohmann::json& j);
  std::string describe() const;
};

Tensor<float> apply_perturbation(const Tensor<float>& images, const Perturbation& p, Rng& rng);

struct SelectionConfig {
  std::size_t epochs = 1;  // passes over the perturbed set per block
  std::size_t batch_size = 64;
  double lr = 1e-3;
};

// Entropy-minimises only `block`'s parameters on `perturbed` (batch-stats
// forwards, running statistics untouched), recomputes prototypes on the
// clean set, returns their similarity to `clean_prototypes` and restores
// the model bitwise. Throws std::out_of_range for a bad block index.
template <class T>
double block_sensitivity(BlockNet<T>& model, const PrototypeSet& clean_prototypes,
                         const ImageBatch& clean, const ImageBatch& perturbed,
                         std::size_t block, const SelectionConfig& config);

struct SelectionReport {
  std::vector<double> raw;
  std::vector<double> scaled;
  double gamma = 0.75;
  std::vector<std::size_t> selected;
  Perturbation perturbation;
  SelectionConfig config;
  std::uint64_t seed = 0;
  std::string warning;

  nlohmann::json to_json() const;
  static SelectionReport from_json(const nlohmann::json& j);
};

void save_selection(const SelectionReport& report, const std::string& path);
SelectionReport load_selection(const std::string& path);

// Block selection before deployment. `seed` drives the perturbation noise.
template <class T>
SelectionReport select_blocks(BlockNet<T>& model, const ImageBatch& source, double gamma,
                              const Perturbation& perturbation,
                              const SelectionConfig& config = {}, std::uint64_t seed = 0);

}  // namespace dplot
