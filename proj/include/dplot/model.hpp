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
#include <span>
#include <string>
#include <vector>

#include "dplot/autodiff.hpp"
#include "dplot/ops.hpp"
#include "dplot/rng.hpp"
#include "dplot/tensor.hpp"

namespace dplot {

enum class BlockKind { stem, residual_conv, residual_dense, classifier };

std::string to_string(BlockKind kind);
BlockKind parse_block_kind(const std::string& name);

// One entry of an architecture description. A stem is folded into the block
// that follows it and never forms a block of its own.
struct BlockSpec {
  BlockKind kind = BlockKind::residual_conv;
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t stride = 1;
  bool batchnorm = true;

  friend bool operator==(const BlockSpec&, const BlockSpec&) = default;
};

struct ArchSpec {
  // Input image geometry (channels x height x width). For dense-only
  // networks the input is the flattened vector of this size.
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  std::vector<BlockSpec> blocks;

  std::size_t num_classes() const;
  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

// Stem (3->16) folded into block 1, six residual conv blocks of widths
// 16,16,32,32,64,64 with stride 2 at blocks 3 and 5, global average pool
// and a linear classifier.
ArchSpec desk_arch(std::size_t classes = 4);

enum class ParamRole { conv_weight, bn_gamma, bn_beta, dense_weight, bias };

struct ParamInfo {
  std::string name;
  Shape shape;
  std::size_t block = 0;  // 1..L for extractor blocks, L + 1 for the classifier
  ParamRole role = ParamRole::conv_weight;
};

struct BnLayerInfo {
  std::string name;
  std::size_t channels = 0;
  std::size_t block = 0;
  ParamId gamma = 0;
  ParamId beta = 0;
};

// Copy of everything a forward pass depends on: trainable parameters and BN
// running statistics. Optimizer state is not part of it.
template <class T>
struct ParamImage {
  ArchSpec arch;
  std::vector<Tensor<T>> params;
  std::vector<RunningStats<T>> stats;
};

struct ForwardOptions {
  BnMode bn_mode = BnMode::running_stats;
  // Batch-stats mode only; see BatchNormOptions.
  bool update_running = false;
  double momentum = kBatchNormMomentum;

  static ForwardOptions running() { return {}; }
  static ForwardOptions batch(bool update = false) {
    return {BnMode::batch_stats, update, kBatchNormMomentum};
  }
};

template <class T>
struct ForwardVars {
  Var<T> features;
  Var<T> logits;
};

template <class T>
struct ForwardOutputs {
  Tensor<T> features;
  Tensor<T> logits;
};

// A feature extractor of L blocks followed by a linear classifier.
template <class T>
class BlockNet {
 public:
  // He-normal conv/dense weights, uniform(+-1/sqrt(fan_in)) classifier
  // weights, zero biases, BN affine (1, 0) and running stats (0, 1).
  // Throws ConfigError for inconsistent specs.
  static BlockNet build(const ArchSpec& arch, Rng& rng);

  const ArchSpec& arch() const { return arch_; }
  std::size_t num_blocks() const { return num_blocks_; }
  std::size_t classifier_block() const { return num_blocks_ + 1; }
  std::size_t num_classes() const { return arch_.num_classes(); }
  std::size_t feature_dim() const { return feature_dim_; }
  Shape input_shape(std::size_t batch) const;

  std::span<Tensor<T>> params() { return params_; }
  std::span<const Tensor<T>> params() const { return params_; }
  const std::vector<ParamInfo>& param_info() const { return info_; }
  std::vector<RunningStats<T>>& bn_stats() { return stats_; }
  const std::vector<RunningStats<T>>& bn_stats() const { return stats_; }
  const std::vector<BnLayerInfo>& bn_layers() const { return bn_layers_; }
  bool has_batchnorm() const { return !bn_layers_.empty(); }

  std::size_t scalar_param_count() const;
  std::vector<ParamId> all_params() const;
  // Parameters of one block (1..L) or of the classifier (L + 1).
  std::vector<ParamId> block_params(std::size_t block) const;
  std::vector<ParamId> blocks_params(std::span<const std::size_t> blocks) const;
  // BN gamma/beta of every layer, or only of layers inside `blocks`.
  std::vector<ParamId> bn_affine_params() const;
  std::vector<ParamId> bn_affine_params(std::span<const std::size_t> blocks) const;

  // Records a forward pass of x[N x C x H x W] on `tape`. Parameters listed
  // in `trainable` become gradient leaves; all others enter as constants.
  ForwardVars<T> forward(Tape<T>& tape, const Tensor<T>& x,
                         const ForwardOptions& opts,
                         std::span<const ParamId> trainable = {});

  // Forward without recording.
  ForwardOutputs<T> infer(const Tensor<T>& x, const ForwardOptions& opts);

  ParamImage<T> snapshot() const;
  void restore(const ParamImage<T>& image);

 private:
  struct Layer {
    bool conv = true;
    ParamId weight = 0;
    std::optional<ParamId> bias;
    std::optional<std::size_t> bn;  // index into stats_ / bn_layers_
    std::size_t stride = 1;
    std::size_t padding = 0;
  };
  struct Block {
    BlockKind kind = BlockKind::residual_conv;
    std::size_t index = 0;
    std::vector<Layer> stem;
    std::vector<Layer> main;
    std::optional<Layer> shortcut;
  };

  ParamId add_param(const std::string& name, Shape shape, std::size_t block,
                    ParamRole role);
  Layer make_layer(const std::string& prefix, bool conv, std::size_t in,
                   std::size_t out, std::size_t kernel, std::size_t stride,
                   bool batchnorm, std::size_t block, Rng& rng);
  Var<T> apply(const Layer& layer, Var<T> x, const ForwardOptions& opts,
               const std::vector<Var<T>>& pvars);

  ArchSpec arch_;
  std::size_t num_blocks_ = 0;
  std::size_t feature_dim_ = 0;
  std::vector<Tensor<T>> params_;
  std::vector<ParamInfo> info_;
  std::vector<RunningStats<T>> stats_;
  std::vector<BnLayerInfo> bn_layers_;
  std::vector<Block> plan_;
};

// Teacher <- alpha * teacher + (1 - alpha) * student for every parameter and
// every BN running statistic. alpha must lie in [0, 1].
template <class T>
void ema_update(BlockNet<T>& teacher, const BlockNet<T>& student, double alpha);

// Replaces every BN layer's running statistics with the per-channel batch
// statistics of `batch` seen in one batch-stats forward. Needs N >= 2.
template <class T>
void recalibrate_bn(BlockNet<T>& model, const Tensor<T>& batch);

}  // namespace dplot
