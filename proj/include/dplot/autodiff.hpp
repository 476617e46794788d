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
#include <deque>
#include <functional>
#include <initializer_list>
#include <map>
#include <optional>
#include <stdexcept>
#include <string_view>

#include "dplot/tensor.hpp"

namespace dplot {

// Index of a trainable parameter inside its owning model.
using ParamId = std::size_t;

template <class T>
class Tape;

// Handle to a value recorded on a tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape->requires_grad(id); }
};

// Gradients keyed by parameter id. Parameters that never reached the loss
// are absent; get_or_zero() reports them as zeros.
template <class T>
class Gradients {
 public:
  bool contains(ParamId id) const { return grads_.count(id) != 0; }

  const Tensor<T>* find(ParamId id) const {
    auto it = grads_.find(id);
    return it == grads_.end() ? nullptr : &it->second;
  }

  Tensor<T> get_or_zero(ParamId id, const Shape& shape) const {
    if (const auto* g = find(id)) return *g;
    return Tensor<T>(shape);
  }

  void accumulate(ParamId id, const Tensor<T>& g) {
    auto [it, inserted] = grads_.try_emplace(id, g);
    if (!inserted) {
      auto dst = it->second.data();
      auto src = g.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
  }

  std::size_t size() const { return grads_.size(); }
  auto begin() const { return grads_.begin(); }
  auto end() const { return grads_.end(); }

 private:
  std::map<ParamId, Tensor<T>> grads_;
};

// Reverse-mode tape. Nodes are appended in execution order, so walking the
// node list backwards is a valid reverse topological order. A tape supports
// exactly one backward() call.
//
// With recording disabled the tape still holds forward values but keeps no
// backward closures; every node then reports requires_grad() == false.
template <class T>
class Tape {
 public:
  // Receives the gradient flowing into this node's output.
  using BackwardFn = std::function<void(Tape&, const Tensor<T>&)>;

  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

  Var<T> constant(Tensor<T> value) {
    nodes_.push_back(Node{std::move(value), {}, false, std::nullopt, nullptr});
    return Var<T>{this, nodes_.size() - 1};
  }

  Var<T> parameter(ParamId pid, Tensor<T> value, bool requires_grad = true) {
    const bool rg = recording_ && requires_grad;
    nodes_.push_back(Node{std::move(value), {}, rg,
                          rg ? std::optional<ParamId>(pid) : std::nullopt,
                          nullptr});
    return Var<T>{this, nodes_.size() - 1};
  }

  // Appends the result of a primitive. `backward` is kept only when the tape
  // records and at least one input requires a gradient. The value is checked
  // for NaN/Inf and `op` names the primitive in the error.
  Var<T> record(std::string_view op, Tensor<T> value,
                std::initializer_list<Var<T>> inputs, BackwardFn backward) {
    if (!value.all_finite()) {
      throw NumericError("non-finite value produced by " + std::string(op));
    }
    bool rg = false;
    if (recording_) {
      for (const auto& v : inputs) rg = rg || requires_grad(v.id);
    }
    nodes_.push_back(Node{std::move(value), {}, rg, std::nullopt,
                          rg ? std::move(backward) : nullptr});
    return Var<T>{this, nodes_.size() - 1};
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool requires_grad(Var<T> v) const { return requires_grad(v.id); }

  void accumulate(std::size_t id, Tensor<T> g) {
    Node& n = nodes_.at(id);
    if (!n.requires_grad) return;
    if (g.shape() != n.value.shape()) {
      throw ShapeError("gradient shape " + shape_str(g.shape()) +
                       " does not match value shape " +
                       shape_str(n.value.shape()));
    }
    if (!n.has_grad) {
      n.grad = std::move(g);
      n.has_grad = true;
      return;
    }
    auto dst = n.grad.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  // Runs the reverse pass from a scalar loss and returns d(loss)/d(param)
  // for every recorded parameter that requires a gradient.
  Gradients<T> backward(Var<T> loss) {
    if (consumed_) throw std::logic_error("tape already consumed by backward()");
    if (loss.tape != this) throw std::logic_error("loss was recorded on another tape");
    if (loss.value().size() != 1) {
      throw ShapeError("backward() needs a scalar loss, got shape " +
                       shape_str(loss.shape()));
    }
    consumed_ = true;
    Gradients<T> out;
    if (!requires_grad(loss.id)) return out;
    nodes_[loss.id].grad = Tensor<T>(loss.shape(), T(1));
    nodes_[loss.id].has_grad = true;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.has_grad) continue;
      if (n.param) {
        out.accumulate(*n.param, n.grad);
      } else if (n.backward) {
        n.backward(*this, n.grad);
        n.backward = nullptr;
      }
      n.grad = Tensor<T>();
      n.has_grad = false;
    }
    return out;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad;
    std::optional<ParamId> param;
    BackwardFn backward;
    bool has_grad = false;
  };

  bool recording_;
  bool consumed_ = false;
  // deque: push_back keeps references to existing node values valid.
  std::deque<Node> nodes_;
};

}  // namespace dplot
