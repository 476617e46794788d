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

#include "dplot/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace dplot {

std::string to_string(BlockKind kind) {
  switch (kind) {
    case BlockKind::stem: return "stem";
    case BlockKind::residual_conv: return "residual_conv";
    case BlockKind::residual_dense: return "residual_dense";
    case BlockKind::classifier: return "classifier";
  }
  return "unknown";
}

BlockKind parse_block_kind(const std::string& name) {
  if (name == "stem") return BlockKind::stem;
  if (name == "residual_conv" || name == "residual-conv") return BlockKind::residual_conv;
  if (name == "residual_dense" || name == "residual-dense") return BlockKind::residual_dense;
  if (name == "classifier") return BlockKind::classifier;
  throw ConfigError("unknown block kind '" + name + "'");
}

std::size_t ArchSpec::num_classes() const {
  if (blocks.empty() || blocks.back().kind != BlockKind::classifier) return 0;
  return blocks.back().out;
}

ArchSpec desk_arch(std::size_t classes) {
  ArchSpec a;
  a.blocks = {
      {BlockKind::stem, 3, 16, 1, true},
      {BlockKind::residual_conv, 16, 16, 1, true},
      {BlockKind::residual_conv, 16, 16, 1, true},
      {BlockKind::residual_conv, 16, 32, 2, true},
      {BlockKind::residual_conv, 32, 32, 1, true},
      {BlockKind::residual_conv, 32, 64, 2, true},
      {BlockKind::residual_conv, 64, 64, 1, true},
      {BlockKind::classifier, 64, classes, 1, false},
  };
  return a;
}

template <class T>
ParamId BlockNet<T>::add_param(const std::string& name, Shape shape,
                               std::size_t block, ParamRole role) {
  info_.push_back(ParamInfo{name, shape, block, role});
  params_.emplace_back(std::move(shape));
  return params_.size() - 1;
}

template <class T>
typename BlockNet<T>::Layer BlockNet<T>::make_layer(
    const std::string& prefix, bool conv, std::size_t in, std::size_t out,
    std::size_t kernel, std::size_t stride, bool batchnorm, std::size_t block,
    Rng& rng) {
  Layer l;
  l.conv = conv;
  l.stride = stride;
  l.padding = kernel / 2;
  const Shape wshape = conv ? Shape{out, in, kernel, kernel} : Shape{out, in};
  l.weight = add_param(prefix + ".weight", wshape, block,
                       conv ? ParamRole::conv_weight : ParamRole::dense_weight);
  const double std = std::sqrt(2.0 / static_cast<double>(in * kernel * kernel));
  for (auto& v : params_[l.weight].data()) v = static_cast<T>(rng.normal(0.0, std));
  if (batchnorm) {
    BnLayerInfo bn;
    bn.name = prefix + ".bn";
    bn.channels = out;
    bn.block = block;
    bn.gamma = add_param(bn.name + ".gamma", {out}, block, ParamRole::bn_gamma);
    bn.beta = add_param(bn.name + ".beta", {out}, block, ParamRole::bn_beta);
    params_[bn.gamma].fill(T(1));
    bn_layers_.push_back(bn);
    stats_.push_back(RunningStats<T>::identity(out));
    l.bn = bn_layers_.size() - 1;
  } else {
    l.bias = add_param(prefix + ".bias", {out}, block, ParamRole::bias);
  }
  return l;
}

template <class T>
BlockNet<T> BlockNet<T>::build(const ArchSpec& arch, Rng& rng) {
  BlockNet net;
  net.arch_ = arch;
  if (arch.blocks.empty() || arch.blocks.back().kind != BlockKind::classifier) {
    throw ConfigError("architecture must end with a classifier block");
  }
  if (arch.channels == 0 || arch.height == 0 || arch.width == 0) {
    throw ConfigError("architecture input dimensions must be positive");
  }
  const bool spatial_input = arch.blocks.front().kind == BlockKind::stem ||
                             arch.blocks.front().kind == BlockKind::residual_conv;
  bool spatial = spatial_input;
  std::size_t ch = spatial ? arch.channels : arch.channels * arch.height * arch.width;
  std::size_t h = arch.height, w = arch.width;
  std::vector<Layer> pending_stem;
  std::size_t index = 0;

  for (std::size_t bi = 0; bi < arch.blocks.size(); ++bi) {
    const BlockSpec& spec = arch.blocks[bi];
    const std::string pos = "block spec " + std::to_string(bi);
    if (spec.kind != BlockKind::classifier && spec.out == 0) {
      throw ConfigError(pos + ": output width must be positive");
    }
    if (spec.stride == 0) throw ConfigError(pos + ": stride must be >= 1");
    if (spec.kind == BlockKind::classifier && bi + 1 != arch.blocks.size()) {
      throw ConfigError(pos + ": classifier must be the last block");
    }
    switch (spec.kind) {
      case BlockKind::stem: {
        if (!spatial || !pending_stem.empty() || bi + 1 >= arch.blocks.size() ||
            arch.blocks[bi + 1].kind != BlockKind::residual_conv) {
          throw ConfigError(pos + ": a stem must precede a residual_conv block");
        }
        if (spec.in != ch) {
          throw ConfigError(pos + ": stem expects " + std::to_string(spec.in) +
                            " channels but receives " + std::to_string(ch));
        }
        const std::string prefix = "block" + std::to_string(index + 1) + ".stem";
        pending_stem.push_back(net.make_layer(prefix, true, spec.in, spec.out, 3,
                                              spec.stride, spec.batchnorm,
                                              index + 1, rng));
        ch = spec.out;
        h = (h - 1) / spec.stride + 1;
        w = (w - 1) / spec.stride + 1;
        break;
      }
      case BlockKind::residual_conv:
      case BlockKind::residual_dense: {
        const bool conv = spec.kind == BlockKind::residual_conv;
        if (conv && !spatial) {
          throw ConfigError(pos + ": residual_conv cannot follow a dense block");
        }
        if (!conv && spatial) {
          spatial = false;  // global average pool before the first dense block
        }
        if (spec.in != ch) {
          throw ConfigError(pos + ": block expects " + std::to_string(spec.in) +
                            " inputs but receives " + std::to_string(ch));
        }
        if (!conv && spec.stride != 1) {
          throw ConfigError(pos + ": residual_dense blocks have no stride");
        }
        ++index;
        Block b;
        b.kind = spec.kind;
        b.index = index;
        b.stem = std::move(pending_stem);
        pending_stem.clear();
        const std::string prefix = "block" + std::to_string(index);
        const std::size_t k = conv ? 3 : 1;
        const std::string unit = conv ? ".conv" : ".dense";
        b.main.push_back(net.make_layer(prefix + unit + "1", conv, spec.in, spec.out,
                                        k, spec.stride, spec.batchnorm, index, rng));
        b.main.push_back(net.make_layer(prefix + unit + "2", conv, spec.out, spec.out,
                                        k, 1, spec.batchnorm, index, rng));
        if (spec.in != spec.out || spec.stride != 1) {
          b.shortcut = net.make_layer(prefix + ".shortcut", conv, spec.in, spec.out,
                                      1, spec.stride, spec.batchnorm, index, rng);
        }
        if (conv) {
          h = (h - 1) / spec.stride + 1;
          w = (w - 1) / spec.stride + 1;
        }
        ch = spec.out;
        net.plan_.push_back(std::move(b));
        break;
      }
      case BlockKind::classifier: {
        if (index == 0) {
          throw ConfigError("architecture needs at least one feature block");
        }
        if (spec.in != ch) {
          throw ConfigError(pos + ": classifier expects " + std::to_string(spec.in) +
                            " features but receives " + std::to_string(ch));
        }
        if (spec.out < 2) throw ConfigError(pos + ": classifier needs >= 2 classes");
        Block b;
        b.kind = BlockKind::classifier;
        b.index = index + 1;
        Layer l;
        l.conv = false;
        l.weight = net.add_param("classifier.weight", {spec.out, spec.in}, index + 1,
                                 ParamRole::dense_weight);
        l.bias = net.add_param("classifier.bias", {spec.out}, index + 1,
                               ParamRole::bias);
        const double bound = 1.0 / std::sqrt(static_cast<double>(spec.in));
        for (auto& v : net.params_[l.weight].data())
          v = static_cast<T>(rng.uniform(-bound, bound));
        b.main.push_back(l);
        net.plan_.push_back(std::move(b));
        net.feature_dim_ = ch;
        break;
      }
    }
  }
  net.num_blocks_ = index;
  return net;
}

template <class T>
Shape BlockNet<T>::input_shape(std::size_t batch) const {
  return {batch, arch_.channels, arch_.height, arch_.width};
}

template <class T>
std::size_t BlockNet<T>::scalar_param_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

template <class T>
std::vector<ParamId> BlockNet<T>::all_params() const {
  std::vector<ParamId> ids(params_.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  return ids;
}

template <class T>
std::vector<ParamId> BlockNet<T>::block_params(std::size_t block) const {
  if (block == 0 || block > classifier_block()) {
    throw std::out_of_range("block index " + std::to_string(block) +
                            " out of range 1.." + std::to_string(classifier_block()));
  }
  std::vector<ParamId> ids;
  for (std::size_t i = 0; i < info_.size(); ++i)
    if (info_[i].block == block) ids.push_back(i);
  return ids;
}

template <class T>
std::vector<ParamId> BlockNet<T>::blocks_params(std::span<const std::size_t> blocks) const {
  std::vector<ParamId> ids;
  for (std::size_t b : blocks) {
    auto part = block_params(b);
    ids.insert(ids.end(), part.begin(), part.end());
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

template <class T>
std::vector<ParamId> BlockNet<T>::bn_affine_params() const {
  std::vector<ParamId> ids;
  for (const auto& bn : bn_layers_) {
    ids.push_back(bn.gamma);
    ids.push_back(bn.beta);
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

template <class T>
std::vector<ParamId> BlockNet<T>::bn_affine_params(std::span<const std::size_t> blocks) const {
  for (std::size_t b : blocks) {
    if (b == 0 || b > num_blocks_) {
      throw std::out_of_range("block index " + std::to_string(b) + " out of range");
    }
  }
  std::set<std::size_t> wanted(blocks.begin(), blocks.end());
  std::vector<ParamId> ids;
  for (const auto& bn : bn_layers_) {
    if (!wanted.count(bn.block)) continue;
    ids.push_back(bn.gamma);
    ids.push_back(bn.beta);
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

template <class T>
Var<T> BlockNet<T>::apply(const Layer& layer, Var<T> x, const ForwardOptions& opts,
                          const std::vector<Var<T>>& pvars) {
  Var<T> y;
  if (layer.conv) {
    y = conv2d(x, pvars[layer.weight], Conv2dOptions{layer.stride, layer.padding});
    if (layer.bias) y = channel_bias(y, pvars[*layer.bias]);
  } else {
    std::optional<Var<T>> b;
    if (layer.bias) b = pvars[*layer.bias];
    y = linear(x, pvars[layer.weight], b);
  }
  if (layer.bn) {
    const auto& bn = bn_layers_[*layer.bn];
    BatchNormOptions bo;
    bo.mode = opts.bn_mode;
    bo.update_running = opts.update_running;
    bo.momentum = opts.momentum;
    y = batchnorm(y, pvars[bn.gamma], pvars[bn.beta], stats_[*layer.bn], bo);
  }
  return y;
}

template <class T>
ForwardVars<T> BlockNet<T>::forward(Tape<T>& tape, const Tensor<T>& x,
                                    const ForwardOptions& opts,
                                    std::span<const ParamId> trainable) {
  const std::size_t per_sample = arch_.channels * arch_.height * arch_.width;
  if (x.rank() < 2 || x.dim(0) == 0 || x.size() / x.dim(0) != per_sample ||
      (x.rank() == 4 && x.shape() != input_shape(x.dim(0)))) {
    throw ShapeError("forward: input " + shape_str(x.shape()) +
                     " does not match model input " + shape_str(input_shape(1)));
  }
  const std::size_t n = x.dim(0);
  bool spatial = plan_.front().kind == BlockKind::residual_conv;

  std::vector<bool> wants(params_.size(), false);
  for (ParamId id : trainable) {
    if (id >= params_.size()) {
      throw std::out_of_range("trainable parameter id " + std::to_string(id));
    }
    wants[id] = true;
  }
  std::vector<Var<T>> pvars;
  pvars.reserve(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i)
    pvars.push_back(tape.parameter(i, params_[i], wants[i]));

  Var<T> h = tape.constant(spatial ? x.reshaped(input_shape(n))
                                   : x.reshaped({n, per_sample}));
  ForwardVars<T> out;
  for (const Block& b : plan_) {
    if (b.kind == BlockKind::classifier) {
      if (spatial) h = global_avg_pool(h);
      out.features = h;
      out.logits = apply(b.main.front(), h, opts, pvars);
      break;
    }
    if (b.kind == BlockKind::residual_dense && spatial) {
      h = global_avg_pool(h);
      spatial = false;
    }
    for (const Layer& l : b.stem) h = relu(apply(l, h, opts, pvars));
    Var<T> r = relu(apply(b.main[0], h, opts, pvars));
    r = apply(b.main[1], r, opts, pvars);
    Var<T> s = b.shortcut ? apply(*b.shortcut, h, opts, pvars) : h;
    h = relu(add(r, s));
  }
  return out;
}

template <class T>
ForwardOutputs<T> BlockNet<T>::infer(const Tensor<T>& x, const ForwardOptions& opts) {
  Tape<T> tape(false);
  auto v = forward(tape, x, opts);
  return {v.features.value(), v.logits.value()};
}

template <class T>
ParamImage<T> BlockNet<T>::snapshot() const {
  return ParamImage<T>{arch_, params_, stats_};
}

template <class T>
void BlockNet<T>::restore(const ParamImage<T>& image) {
  if (!(image.arch == arch_) || image.params.size() != params_.size() ||
      image.stats.size() != stats_.size()) {
    throw ConfigError("restore: parameter image comes from a different architecture");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (image.params[i].shape() != params_[i].shape()) {
      throw ConfigError("restore: shape mismatch for " + info_[i].name);
    }
  }
  params_ = image.params;
  stats_ = image.stats;
}

namespace {

template <class T>
void ema_blend(Tensor<T>& teacher, const Tensor<T>& student, double alpha) {
  const double beta = 1.0 - alpha;
  T* t = teacher.ptr();
  const T* s = student.ptr();
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    const double v = alpha * t[i] + beta * s[i];
    // Rounding can overshoot by an ulp; keep the convex combination inside
    // its endpoints.
    const T lo = std::min(t[i], s[i]), hi = std::max(t[i], s[i]);
    t[i] = std::clamp(static_cast<T>(v), lo, hi);
  }
}

}  // namespace

template <class T>
void ema_update(BlockNet<T>& teacher, const BlockNet<T>& student, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("ema_update: alpha must lie in [0, 1], got " +
                                std::to_string(alpha));
  }
  if (!(teacher.arch() == student.arch())) {
    throw ConfigError("ema_update: teacher and student architectures differ");
  }
  auto tp = teacher.params();
  auto sp = student.params();
  for (std::size_t i = 0; i < tp.size(); ++i) ema_blend(tp[i], sp[i], alpha);
  auto& ts = teacher.bn_stats();
  const auto& ss = student.bn_stats();
  for (std::size_t i = 0; i < ts.size(); ++i) {
    ema_blend(ts[i].mean, ss[i].mean, alpha);
    ema_blend(ts[i].var, ss[i].var, alpha);
  }
}

template <class T>
void recalibrate_bn(BlockNet<T>& model, const Tensor<T>& batch) {
  if (batch.rank() == 0 || batch.dim(0) < 2) {
    throw ShapeError("recalibrate_bn: batch needs at least 2 samples");
  }
  ForwardOptions opts = ForwardOptions::batch(true);
  opts.momentum = 1.0;
  model.infer(batch, opts);
}

template class BlockNet<float>;
template class BlockNet<double>;
template void ema_update(BlockNet<float>&, const BlockNet<float>&, double);
template void ema_update(BlockNet<double>&, const BlockNet<double>&, double);
template void recalibrate_bn(BlockNet<float>&, const Tensor<float>&);
template void recalibrate_bn(BlockNet<double>&, const Tensor<double>&);

}  // namespace dplot
