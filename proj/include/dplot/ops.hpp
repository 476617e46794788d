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
#include <optional>

#include "dplot/autodiff.hpp"
#include "dplot/tensor.hpp"

namespace dplot {

// Lower clamp applied before every logarithm in entropy / cross-entropy.
inline constexpr double kLogClampEps = 1e-12;
inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

enum class BnMode { batch_stats, running_stats };

struct BatchNormOptions {
  BnMode mode = BnMode::batch_stats;
  // Batch-stats mode only: blend the batch statistics into the running
  // statistics as running = (1 - momentum) * running + momentum * batch.
  // momentum = 1 replaces them outright.
  bool update_running = true;
  double momentum = kBatchNormMomentum;
  double eps = kBatchNormEps;
};

// Per-channel running mean and (biased) variance of one BN layer.
template <class T>
struct RunningStats {
  Tensor<T> mean;
  Tensor<T> var;

  static RunningStats identity(std::size_t channels) {
    return {Tensor<T>({channels}, T(0)), Tensor<T>({channels}, T(1))};
  }
};

// a[m x k] * b[k x n]
template <class T>
Var<T> matmul(Var<T> a, Var<T> b);

// x[n x in] * w[out x in]^T + bias[out]
template <class T>
Var<T> linear(Var<T> x, Var<T> w, std::optional<Var<T>> bias);

// Cross-correlation of x[N x C x H x W] with w[F x C x k x k]; k odd.
template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, Conv2dOptions opts);

// Normalizes x[N x C x ...] per channel, then applies gamma/beta. In
// batch-stats mode requires N >= 2 and, when opts.update_running, writes into
// `running`. Variance is the biased (1/M) estimator in both modes.
template <class T>
Var<T> batchnorm(Var<T> x, Var<T> gamma, Var<T> beta, RunningStats<T>& running,
                 const BatchNormOptions& opts);

// x[N x C x ...] + bias[C] broadcast over every position of channel c.
template <class T>
Var<T> channel_bias(Var<T> x, Var<T> bias);

template <class T>
Var<T> add(Var<T> a, Var<T> b);

template <class T>
Var<T> mul(Var<T> a, Var<T> b);

template <class T>
Var<T> scale(Var<T> a, double s);

template <class T>
Var<T> relu(Var<T> x);

// [N x C x H x W] -> [N x C]
template <class T>
Var<T> global_avg_pool(Var<T> x);

// Row-wise softmax over the last axis of a 2-D tensor.
template <class T>
Var<T> softmax(Var<T> x);

// ln(max(x, kLogClampEps)); gradient is zero where the clamp is active.
template <class T>
Var<T> log_clamped(Var<T> x);

template <class T>
Var<T> sum(Var<T> x);

template <class T>
Var<T> mean(Var<T> x);

// Concatenates along axis 0.
template <class T>
Var<T> concat_rows(Var<T> a, Var<T> b);

// Rows [begin, end) along axis 0.
template <class T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t end);

// Plain-tensor helpers shared by the model and the losses.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& logits);

template <class T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b);

template <class T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end);

template <class T>
std::vector<int> argmax_rows(const Tensor<T>& x);

}  // namespace dplot
