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

#include "dplot/losses.hpp"

#include <cmath>
#include <string>

#include "dplot/error.hpp"
#include "dplot/ops.hpp"

namespace dplot {
namespace {

template <class T>
void check_pair(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.rank() != 2 || a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " must be equal N x C");
  }
}

}  // namespace

template <class T>
void check_simplex(const Tensor<T>& probs, const char* what) {
  if (probs.rank() != 2) {
    throw ShapeError(std::string(what) + ": expected N x C probabilities, got " +
                     shape_str(probs.shape()));
  }
  const std::size_t n = probs.dim(0), c = probs.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double p = probs.ptr()[i * c + j];
      if (p < -kSimplexTolerance) {
        throw NumericError(std::string(what) + ": negative probability in row " +
                           std::to_string(i));
      }
      s += p;
    }
    if (std::abs(s - 1.0) > kSimplexTolerance) {
      throw NumericError(std::string(what) + ": row " + std::to_string(i) + " sums to " +
                         std::to_string(s));
    }
  }
}

template <class T>
Var<T> entropy_loss(Var<T> probs) {
  check_simplex(probs.value(), "entropy_loss");
  const double n = static_cast<double>(probs.value().dim(0));
  return scale(sum(mul(probs, log_clamped(probs))), -1.0 / n);
}

template <class T>
std::vector<double> row_entropies(const Tensor<T>& probs) {
  const std::size_t n = probs.dim(0), c = probs.dim(1);
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double h = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double p = probs.ptr()[i * c + j];
      h -= p * std::log(std::max(p, kLogClampEps));
    }
    out[i] = h;
  }
  return out;
}

template <class T>
double entropy_loss(const Tensor<T>& probs) {
  check_simplex(probs, "entropy_loss");
  const auto h = row_entropies(probs);
  double s = 0.0;
  for (double v : h) s += v;
  return s / static_cast<double>(h.size());
}

template <class T>
Var<T> cross_entropy(Var<T> a, Var<T> b) {
  check_pair(a.value(), b.value(), "cross_entropy");
  const double n = static_cast<double>(a.value().dim(0));
  return scale(sum(mul(a, log_clamped(b))), -1.0 / n);
}

template <class T>
Var<T> sce_loss(Var<T> a, Var<T> b) {
  check_simplex(a.value(), "sce_loss");
  check_simplex(b.value(), "sce_loss");
  return scale(add(cross_entropy(a, b), cross_entropy(b, a)), 0.5);
}

template <class T>
double sce_loss(const Tensor<T>& a, const Tensor<T>& b) {
  Tape<T> tape(false);
  return static_cast<double>(sce_loss(tape.constant(a), tape.constant(b)).value().item());
}

template <class T>
Var<T> paired_consistency_loss(Var<T> student_x, Var<T> student_flip, const Tensor<T>& target) {
  Tape<T>& tape = *student_x.tape;
  const Var<T> t = tape.constant(target);
  return add(sce_loss(student_x, t), sce_loss(student_flip, t));
}

template <class T>
Var<T> labeled_cross_entropy(Var<T> logits, const std::vector<int>& labels) {
  const Tensor<T>& z = logits.value();
  if (z.rank() != 2 || z.dim(0) != labels.size()) {
    throw ShapeError("labeled_cross_entropy: logits " + shape_str(z.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t c = z.dim(1);
  Tensor<T> onehot({z.dim(0), c});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw ShapeError("label " + std::to_string(labels[i]) + " out of range");
    }
    onehot[i * c + static_cast<std::size_t>(labels[i])] = T(1);
  }
  return cross_entropy(logits.tape->constant(std::move(onehot)), softmax(logits));
}

#define DPLOT_INSTANTIATE_LOSSES(T)                                              \
  template void check_simplex(const Tensor<T>&, const char*);                    \
  template Var<T> entropy_loss(Var<T>);                                          \
  template double entropy_loss(const Tensor<T>&);                                \
  template std::vector<double> row_entropies(const Tensor<T>&);                  \
  template Var<T> cross_entropy(Var<T>, Var<T>);                                 \
  template Var<T> sce_loss(Var<T>, Var<T>);                                      \
  template double sce_loss(const Tensor<T>&, const Tensor<T>&);                  \
  template Var<T> paired_consistency_loss(Var<T>, Var<T>, const Tensor<T>&);     \
  template Var<T> labeled_cross_entropy(Var<T>, const std::vector<int>&);

DPLOT_INSTANTIATE_LOSSES(float)
DPLOT_INSTANTIATE_LOSSES(double)

}  // namespace dplot
