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

#include "dplot/adapt.hpp"

#include <algorithm>
#include <cmath>

#include "dplot/data.hpp"
#include "dplot/error.hpp"
#include "dplot/losses.hpp"
#include "dplot/ops.hpp"

namespace dplot {
namespace {

template <class T>
Tensor<float> as_float(const Tensor<T>& t) {
  if constexpr (std::is_same_v<T, float>) {
    return t;
  } else {
    return t.template cast<float>();
  }
}

template <class T>
Tensor<T> from_float(const Tensor<float>& t) {
  if constexpr (std::is_same_v<T, float>) {
    return t;
  } else {
    return t.template cast<T>();
  }
}

template <class T>
std::vector<ParamId> entropy_params(const BlockNet<T>& model, Method method,
                                    const AdaptConfig& cfg) {
  const std::span<const std::size_t> sel(cfg.selected_blocks);
  switch (method) {
    case Method::tent: return model.bn_affine_params();
    case Method::tent_selected: return model.bn_affine_params(sel);
    case Method::dplot: break;
    default: return {};
  }
  switch (cfg.entropy_scope) {
    case EntropyScope::none: return {};
    case EntropyScope::selected_blocks: return model.blocks_params(sel);
    case EntropyScope::bn_affine: return model.bn_affine_params();
    case EntropyScope::bn_affine_selected: return model.bn_affine_params(sel);
  }
  return {};
}

template <class T>
StepOutput make_output(const Tensor<T>& logits, const Tensor<T>* target) {
  StepOutput out;
  out.logits = logits.template cast<double>();
  out.predictions = argmax_rows(out.logits);
  const auto h = row_entropies(softmax_rows(out.logits));
  double s = 0.0;
  for (double v : h) s += v;
  out.mean_entropy = h.empty() ? 0.0 : s / static_cast<double>(h.size());
  if (target != nullptr) {
    const auto t = argmax_rows(*target);
    std::size_t agree = 0;
    for (std::size_t i = 0; i < t.size(); ++i) agree += t[i] == out.predictions[i];
    out.agreement = t.empty() ? 0.0 : static_cast<double>(agree) / static_cast<double>(t.size());
  }
  return out;
}

template <class T>
Tensor<T> add_tensors(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = a;
  auto d = out.data();
  auto s = b.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
  return out;
}

// Batch statistics need two samples; a lone sample falls back to the
// stored running statistics.
template <class T>
ForwardOptions eval_options(const Tensor<T>& x) {
  return x.dim(0) >= 2 ? ForwardOptions::batch(false) : ForwardOptions::running();
}

Tensor<float> color_jitter(const Tensor<float>& x, Rng& rng) {
  Tensor<float> out = x;
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  for (std::size_t i = 0; i < n; ++i) {
    float* img = out.ptr() + i * c * plane;
    const auto shift = static_cast<float>(rng.uniform(-0.1, 0.1));
    const auto contrast = static_cast<float>(rng.uniform(0.8, 1.2));
    double total = 0.0;
    for (std::size_t k = 0; k < c * plane; ++k) total += img[k];
    const auto mean = static_cast<float>(total / static_cast<double>(c * plane));
    for (std::size_t ch = 0; ch < c; ++ch) {
      const auto gain = static_cast<float>(rng.uniform(0.9, 1.1));
      for (std::size_t k = 0; k < plane; ++k) {
        float& v = img[ch * plane + k];
        v = std::clamp(((v - mean) * contrast + mean) * gain + shift, 0.0f, 1.0f);
      }
    }
  }
  return out;
}

Tensor<float> noise_blur(const Tensor<float>& x, Rng& rng) {
  const int sev = 1 + static_cast<int>(rng.below(2));
  Tensor<float> out = corrupt(x, {CorruptionKind::gaussian_noise, sev}, rng);
  if (rng.uniform() < 0.5) out = corrupt(out, {CorruptionKind::blur, 1}, rng);
  return out;
}

}  // namespace

std::string to_string(Method m) {
  switch (m) {
    case Method::source: return "source";
    case Method::bn1: return "bn1";
    case Method::tent: return "tent";
    case Method::tent_selected: return "tent+selection";
    case Method::dplot: return "dplot";
  }
  return "unknown";
}

Method parse_method(const std::string& name) {
  for (Method m : {Method::source, Method::bn1, Method::tent, Method::tent_selected,
                   Method::dplot}) {
    if (to_string(m) == name) return m;
  }
  if (name == "tent_selected" || name == "tent-selection") return Method::tent_selected;
  throw ConfigError("unknown method '" + name + "'");
}

std::string to_string(PseudoLabelMenu m) {
  switch (m) {
    case PseudoLabelMenu::paired: return "paired";
    case PseudoLabelMenu::noise_blur: return "noise_blur";
    case PseudoLabelMenu::color_jitter: return "color_jitter";
    case PseudoLabelMenu::all: return "all";
  }
  return "unknown";
}

PseudoLabelMenu parse_menu(const std::string& name) {
  for (PseudoLabelMenu m : {PseudoLabelMenu::paired, PseudoLabelMenu::noise_blur,
                            PseudoLabelMenu::color_jitter, PseudoLabelMenu::all}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("unknown pseudo-label menu '" + name + "'");
}

void AdaptConfig::validate(Method method) const {
  if (!(lr_entropy >= 0.0) || !std::isfinite(lr_entropy)) {
    throw ConfigError("lr_entropy must be a finite value >= 0");
  }
  if (!(lr_consistency >= 0.0) || !std::isfinite(lr_consistency)) {
    throw ConfigError("lr_consistency must be a finite value >= 0");
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  if (menu_views < 2) throw ConfigError("menu_views must be at least 2");
  const bool needs_selection =
      method == Method::tent_selected ||
      (method == Method::dplot && (entropy_scope == EntropyScope::selected_blocks ||
                                   entropy_scope == EntropyScope::bn_affine_selected));
  if (needs_selection && selected_blocks.empty()) {
    throw ConfigError("selected_blocks must be non-empty for method " + to_string(method));
  }
}

template <class T>
AdaptState<T> AdaptState<T>::create(const BlockNet<T>& source, Method method,
                                    const AdaptConfig& config, std::uint64_t seed) {
  config.validate(method);
  for (std::size_t b : config.selected_blocks) {
    if (b < 1 || b > source.num_blocks()) {
      throw ConfigError("selected block " + std::to_string(b) + " outside 1.." +
                        std::to_string(source.num_blocks()));
    }
  }
  if ((method == Method::tent || method == Method::tent_selected) && !source.has_batchnorm()) {
    throw ConfigError("method " + to_string(method) + " needs a model with batch norm");
  }
  AdaptState s{source, source, config, method, {}, {}, 0, Rng(seed)};
  s.entropy_opt = AdamState<T>({config.lr_entropy}, entropy_params(source, method, config),
                               s.student.params());
  s.consistency_opt =
      AdamState<T>({config.lr_consistency}, source.all_params(), s.student.params());
  return s;
}

template <class T>
PseudoLabel<T> paired_pseudo_label(BlockNet<T>& teacher, const Tensor<T>& x) {
  const auto opts = eval_options(x);
  PseudoLabel<T> pl;
  pl.logits_x = teacher.infer(x, opts).logits;
  pl.logits_flip = teacher.infer(flip_h(x), opts).logits;
  pl.target = add_tensors(softmax_rows(pl.logits_x), softmax_rows(pl.logits_flip));
  for (auto& v : pl.target.data()) v *= T(0.5);
  return pl;
}

template <class T>
PseudoLabel<T> menu_pseudo_label(BlockNet<T>& teacher, const Tensor<T>& x, PseudoLabelMenu menu,
                                 std::size_t views, Rng& rng) {
  if (menu == PseudoLabelMenu::paired) return paired_pseudo_label(teacher, x);
  PseudoLabel<T> pl = paired_pseudo_label(teacher, x);
  Tensor<T> sum = add_tensors(softmax_rows(pl.logits_x), softmax_rows(pl.logits_flip));
  const Tensor<float> xf = as_float(x);
  const Tensor<float> xff = flip_h(xf);
  for (std::size_t v = 2; v < views; ++v) {
    const Tensor<float>& base = (v % 2 == 0) ? xf : xff;
    PseudoLabelMenu kind = menu;
    if (kind == PseudoLabelMenu::all) {
      kind = rng.uniform() < 0.5 ? PseudoLabelMenu::noise_blur : PseudoLabelMenu::color_jitter;
    }
    const Tensor<float> view =
        kind == PseudoLabelMenu::noise_blur ? noise_blur(base, rng) : color_jitter(base, rng);
    sum = add_tensors(sum, softmax_rows(teacher.infer(from_float<T>(view), eval_options(x)).logits));
  }
  const T inv = T(1) / static_cast<T>(views);
  for (auto& v : sum.data()) v *= inv;
  pl.target = std::move(sum);
  return pl;
}

template <class T>
std::pair<double, Tensor<T>> entropy_min_step(AdaptState<T>& state, const Tensor<T>& x,
                                              const std::optional<Tensor<T>>& x_flip) {
  const Tensor<T> input = x_flip ? concat_rows(x, *x_flip) : x;
  const std::vector<ParamId>& trainable = state.entropy_opt.params();
  Tape<T> tape;
  auto fv = state.student.forward(tape, input, ForwardOptions::batch(true), trainable);
  const Var<T> loss = entropy_loss(softmax(fv.logits));
  const double value = static_cast<double>(loss.value().item());
  Tensor<T> logits = fv.logits.value();
  if (!trainable.empty()) {
    const Gradients<T> grads = tape.backward(loss);
    state.entropy_opt.apply(state.student.params(), grads);
  }
  return {value, std::move(logits)};
}

template <class T>
double consistency_step(AdaptState<T>& state, const Tensor<T>& x, const Tensor<T>& x_flip,
                        const Tensor<T>& target, bool update_running) {
  const std::size_t n = x.dim(0);
  Tape<T> tape;
  auto fv = state.student.forward(tape, concat_rows(x, x_flip),
                                  ForwardOptions::batch(update_running),
                                  state.consistency_opt.params());
  const Var<T> probs = softmax(fv.logits);
  const Var<T> loss =
      paired_consistency_loss(slice_rows(probs, 0, n), slice_rows(probs, n, 2 * n), target);
  const double value = static_cast<double>(loss.value().item());
  const Gradients<T> grads = tape.backward(loss);
  state.consistency_opt.apply(state.student.params(), grads);
  return value;
}

template <class T>
StepOutput dplot_step(AdaptState<T>& state, const Tensor<T>& x) {
  const AdaptConfig& cfg = state.config;
  const std::size_t n = x.dim(0);
  if (n == 0) throw ShapeError("dplot_step: empty batch");
  BlockNet<T>& labeler = cfg.teacher ? state.teacher : state.student;
  const Tensor<T> x_flip = flip_h(x);
  const bool use_teacher_logits = cfg.teacher && cfg.ensemble;

  // (1) pseudo-labels from the teacher as it was before this step.
  std::optional<PseudoLabel<T>> pl;
  if (cfg.consistency) {
    Rng rng = state.rng.fork(static_cast<std::uint64_t>(state.step));
    pl = menu_pseudo_label(labeler, x, cfg.menu, cfg.menu_views, rng);
  }
  std::optional<Tensor<T>> pre_student, pre_teacher;
  if (!cfg.post_update_prediction) {
    if (use_teacher_logits) {
      pre_teacher = pl ? pl->logits_x : state.teacher.infer(x, eval_options(x)).logits;
    }
    if (cfg.entropy_scope == EntropyScope::none) {
      pre_student = state.student.infer(x, eval_options(x)).logits;
    }
  }

  StepOutput out;
  bool stats_updated = false;
  // (2) entropy minimisation on the entropy-scope parameters.
  if (cfg.entropy_scope != EntropyScope::none) {
    auto [loss, logits] = entropy_min_step(
        state, x, cfg.entropy_on_pair ? std::optional<Tensor<T>>(x_flip) : std::nullopt);
    out.entropy_loss = loss;
    stats_updated = true;
    if (!cfg.post_update_prediction) pre_student = slice_rows(logits, 0, n);
  }
  // (3) paired-view consistency on every parameter.
  if (cfg.consistency) {
    out.consistency_loss = consistency_step(state, x, x_flip, pl->target, !stats_updated);
  }
  // (4) teacher EMA.
  if (cfg.teacher) ema_update(state.teacher, state.student, cfg.alpha);

  Tensor<T> logits;
  if (cfg.post_update_prediction) {
    logits = state.student.infer(x, eval_options(x)).logits;
    if (use_teacher_logits) {
      logits = add_tensors(logits, state.teacher.infer(x, eval_options(x)).logits);
    }
  } else {
    logits = *pre_student;
    if (use_teacher_logits) logits = add_tensors(logits, *pre_teacher);
  }
  StepOutput pred = make_output(logits, pl ? &pl->target : nullptr);
  pred.entropy_loss = out.entropy_loss;
  pred.consistency_loss = out.consistency_loss;
  ++state.step;
  return pred;
}

template <class T>
StepOutput tent_step(AdaptState<T>& state, const Tensor<T>& x) {
  Tape<T> tape;
  auto fv = state.student.forward(tape, x, ForwardOptions::batch(true), state.entropy_opt.params());
  const Var<T> loss = entropy_loss(softmax(fv.logits));
  StepOutput out = make_output(fv.logits.value(), static_cast<const Tensor<T>*>(nullptr));
  out.entropy_loss = static_cast<double>(loss.value().item());
  const Gradients<T> grads = tape.backward(loss);
  state.entropy_opt.apply(state.student.params(), grads);
  ++state.step;
  return out;
}

template <class T>
StepOutput bn1_step(AdaptState<T>& state, const Tensor<T>& x) {
  if (x.rank() < 1 || x.dim(0) < 2) throw ShapeError("bn1_step needs a batch of at least 2");
  StepOutput out = make_output(state.student.infer(x, ForwardOptions::batch(false)).logits,
                               static_cast<const Tensor<T>*>(nullptr));
  ++state.step;
  return out;
}

template <class T>
StepOutput source_step(AdaptState<T>& state, const Tensor<T>& x) {
  StepOutput out = make_output(state.student.infer(x, ForwardOptions::running()).logits,
                               static_cast<const Tensor<T>*>(nullptr));
  ++state.step;
  return out;
}

template <class T>
StepOutput adapt_step(AdaptState<T>& state, const Tensor<T>& x) {
  switch (state.method) {
    case Method::source: return source_step(state, x);
    case Method::bn1: return bn1_step(state, x);
    case Method::tent:
    case Method::tent_selected: return tent_step(state, x);
    case Method::dplot: return dplot_step(state, x);
  }
  throw ConfigError("unknown method");
}

template <class T>
void warmup(AdaptState<T>& state, const std::vector<Tensor<T>>& source_batches,
            std::size_t n_batches) {
  if (n_batches == 0) return;
  if (source_batches.empty()) throw ConfigError("warmup needs source batches");
  for (std::size_t i = 0; i < n_batches; ++i) {
    const Tensor<T>& x = source_batches[i % source_batches.size()];
    const PseudoLabel<T> pl = paired_pseudo_label(state.teacher, x);
    consistency_step(state, x, flip_h(x), pl.target, true);
    ema_update(state.teacher, state.student, state.config.alpha);
  }
}

#define DPLOT_INSTANTIATE_ADAPT(T)                                                              \
  template struct AdaptState<T>;                                                                \
  template PseudoLabel<T> paired_pseudo_label(BlockNet<T>&, const Tensor<T>&);                  \
  template PseudoLabel<T> menu_pseudo_label(BlockNet<T>&, const Tensor<T>&, PseudoLabelMenu,    \
                                            std::size_t, Rng&);                                 \
  template std::pair<double, Tensor<T>> entropy_min_step(AdaptState<T>&, const Tensor<T>&,      \
                                                         const std::optional<Tensor<T>>&);      \
  template double consistency_step(AdaptState<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                   const Tensor<T>&, bool);                                     \
  template StepOutput dplot_step(AdaptState<T>&, const Tensor<T>&);                             \
  template StepOutput tent_step(AdaptState<T>&, const Tensor<T>&);                              \
  template StepOutput bn1_step(AdaptState<T>&, const Tensor<T>&);                               \
  template StepOutput source_step(AdaptState<T>&, const Tensor<T>&);                            \
  template StepOutput adapt_step(AdaptState<T>&, const Tensor<T>&);                             \
  template void warmup(AdaptState<T>&, const std::vector<Tensor<T>>&, std::size_t);

DPLOT_INSTANTIATE_ADAPT(float)
DPLOT_INSTANTIATE_ADAPT(double)

}  // namespace dplot
