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

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "dplot/autodiff.hpp"
#include "dplot/tensor.hpp"

namespace dplot {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam moments for a fixed subset of a model's parameters.
template <class T>
class AdamState {
 public:
  AdamState() = default;
  AdamState(AdamConfig config, std::vector<ParamId> params,
            std::span<const Tensor<T>> all_params)
      : config_(config), params_(std::move(params)) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (ParamId id : params_) {
      if (id >= all_params.size()) {
        throw ShapeError("AdamState: parameter id " + std::to_string(id) +
                         " out of range");
      }
      m_.emplace_back(all_params[id].shape());
      v_.emplace_back(all_params[id].shape());
    }
  }

  const AdamConfig& config() const { return config_; }
  AdamConfig& config() { return config_; }
  const std::vector<ParamId>& params() const { return params_; }
  std::int64_t step() const { return step_; }
  const Tensor<T>& first_moment(std::size_t slot) const { return m_.at(slot); }
  const Tensor<T>& second_moment(std::size_t slot) const { return v_.at(slot); }

  // One bias-corrected Adam update of every addressed parameter. A parameter
  // with no entry in `grads` is updated with a zero gradient.
  void apply(std::span<Tensor<T>> all_params, const Gradients<T>& grads) {
    ++step_;
    const double t = static_cast<double>(step_);
    const double bc1 = 1.0 - std::pow(config_.beta1, t);
    const double bc2 = 1.0 - std::pow(config_.beta2, t);
    const T b1 = static_cast<T>(config_.beta1);
    const T b2 = static_cast<T>(config_.beta2);
    const T lr = static_cast<T>(config_.lr);
    const T eps = static_cast<T>(config_.eps);
    const T inv_bc1 = static_cast<T>(1.0 / bc1);
    const T inv_bc2 = static_cast<T>(1.0 / bc2);
    for (std::size_t slot = 0; slot < params_.size(); ++slot) {
      Tensor<T>& p = all_params[params_[slot]];
      const Tensor<T>* g = grads.find(params_[slot]);
      if (g && g->shape() != p.shape()) {
        throw ShapeError("adam: gradient shape " + shape_str(g->shape()) +
                         " does not match parameter " + shape_str(p.shape()));
      }
      if (m_[slot].shape() != p.shape()) {
        throw ShapeError("adam: moment shape does not match parameter " +
                         shape_str(p.shape()));
      }
      T* pm = m_[slot].ptr();
      T* pv = v_[slot].ptr();
      T* pp = p.ptr();
      for (std::size_t i = 0; i < p.size(); ++i) {
        const T gi = g ? (*g)[i] : T(0);
        pm[i] = b1 * pm[i] + (T(1) - b1) * gi;
        pv[i] = b2 * pv[i] + (T(1) - b2) * gi * gi;
        const T mhat = pm[i] * inv_bc1;
        const T vhat = pv[i] * inv_bc2;
        pp[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
      require_finite(p, "adam update");
    }
  }

 private:
  AdamConfig config_;
  std::vector<ParamId> params_;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
  std::int64_t step_ = 0;
};

template <class T>
void adam_step(AdamState<T>& state, std::span<Tensor<T>> params,
               const Gradients<T>& grads) {
  state.apply(params, grads);
}

}  // namespace dplot
