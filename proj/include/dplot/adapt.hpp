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
#include <optional>
#include <string>
#include <vector>

#include "dplot/adam.hpp"
#include "dplot/model.hpp"
#include "dplot/rng.hpp"
#include "dplot/tensor.hpp"

namespace dplot {

enum class Method { source, bn1, tent, tent_selected, dplot };

std::string to_string(Method m);
Method parse_method(const std::string& name);

// How the teacher target is formed. `paired` averages the teacher on x and
// flip_h(x); the other menus average `menu_views` views, the first two being
// x and flip_h(x) and the rest random augmentations of them.
enum class PseudoLabelMenu { paired, noise_blur, color_jitter, all };

std::string to_string(PseudoLabelMenu m);
PseudoLabelMenu parse_menu(const std::string& name);

// Which parameters the entropy step updates.
enum class EntropyScope { none, selected_blocks, bn_affine, bn_affine_selected };

struct AdaptConfig {
  double lr_entropy = 1e-3;
  double lr_consistency = 1e-4;
  double alpha = 0.999;  // EMA decay of the teacher
  std::vector<std::size_t> selected_blocks;
  bool ensemble = true;
  // Predict from a fresh forward after the updates (default) or reuse the
  // forwards computed before them.
  bool post_update_prediction = true;

  // Recipe switches; the defaults form the full method. Ablations turn them
  // off one at a time.
  EntropyScope entropy_scope = EntropyScope::selected_blocks;
  bool entropy_on_pair = true;  // entropy over concat(x, flip_h(x)) or x only
  bool consistency = true;
  bool teacher = true;

  PseudoLabelMenu menu = PseudoLabelMenu::paired;
  std::size_t menu_views = 8;

  // Throws ConfigError naming the offending field.
  void validate(Method method) const;
};

struct StepOutput {
  Tensor<double> logits;  // N x C, the logits the prediction is taken from
  std::vector<int> predictions;
  double mean_entropy = 0.0;      // of softmax(logits)
  double agreement = 0.0;         // fraction of predictions matching argmax of the target
  double entropy_loss = 0.0;      // value of the entropy objective before the step
  double consistency_loss = 0.0;  // value of the consistency objective before the step
};

template <class T>
struct PseudoLabel {
  Tensor<T> target;       // N x C, average of the teacher's view softmaxes
  Tensor<T> logits_x;     // teacher logits on x
  Tensor<T> logits_flip;  // teacher logits on flip_h(x)
};

template <class T>
struct AdaptState {
  BlockNet<T> student;
  BlockNet<T> teacher;
  AdaptConfig config;
  Method method = Method::dplot;
  AdamState<T> entropy_opt;      // parameters chosen by config.entropy_scope
  AdamState<T> consistency_opt;  // all student parameters
  std::int64_t step = 0;
  Rng rng{0};  // augmentation draws of the multi-view menus

  // Student and teacher both start as copies of `source`.
  static AdaptState create(const BlockNet<T>& source, Method method, const AdaptConfig& config,
                           std::uint64_t seed = 0);
};

// Teacher target for x. The teacher runs in batch-stats mode without
// touching its running statistics and nothing is recorded.
template <class T>
PseudoLabel<T> paired_pseudo_label(BlockNet<T>& teacher, const Tensor<T>& x);

// Multi-view variant; `paired` falls back to paired_pseudo_label.
template <class T>
PseudoLabel<T> menu_pseudo_label(BlockNet<T>& teacher, const Tensor<T>& x,
                                 PseudoLabelMenu menu, std::size_t views, Rng& rng);

// One Adam step (lr_entropy) on the mean prediction entropy of the student,
// over concat(x, x_flip) or x alone, restricted to the entropy-scope
// parameters. The forward blends batch statistics into the running
// statistics. Returns the loss value and the student logits of the forward.
template <class T>
std::pair<double, Tensor<T>> entropy_min_step(AdaptState<T>& state, const Tensor<T>& x,
                                              const std::optional<Tensor<T>>& x_flip);

// One Adam step (lr_consistency) on sce(student(x), target) +
// sce(student(x_flip), target) over every student parameter.
template <class T>
double consistency_step(AdaptState<T>& state, const Tensor<T>& x, const Tensor<T>& x_flip,
                        const Tensor<T>& target, bool update_running = false);

// Pseudo-label, entropy step, consistency step, EMA, then predict; each stage
// honours the recipe switches of state.config.
template <class T>
StepOutput dplot_step(AdaptState<T>& state, const Tensor<T>& x);

// Entropy minimisation of BN affine parameters (all layers, or the layers of
// the selected blocks for Method::tent_selected) on x alone; predictions come
// from the same forward.
template <class T>
StepOutput tent_step(AdaptState<T>& state, const Tensor<T>& x);

// Predicts with batch statistics of x; no state changes. Needs N >= 2.
template <class T>
StepOutput bn1_step(AdaptState<T>& state, const Tensor<T>& x);

// Predicts with the stored running statistics.
template <class T>
StepOutput source_step(AdaptState<T>& state, const Tensor<T>& x);

// Dispatches on state.method.
template <class T>
StepOutput adapt_step(AdaptState<T>& state, const Tensor<T>& x);

// n_batches rounds of consistency_step + ema_update on clean source batches.
template <class T>
void warmup(AdaptState<T>& state, const std::vector<Tensor<T>>& source_batches,
            std::size_t n_batches);

}  // namespace dplot
