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

#include <vector>

#include "dplot/autodiff.hpp"
#include "dplot/tensor.hpp"

namespace dplot {

// Tolerance on row sums when a loss checks that its input is a
// probability simplex.
inline constexpr double kSimplexTolerance = 1e-4;

// Throws NumericError when a row of probs[N x C] has a negative entry or
// does not sum to 1 within kSimplexTolerance.
template <class T>
void check_simplex(const Tensor<T>& probs, const char* what);

// Mean over rows of -sum_c p_c ln p_c (log clamped).
template <class T>
Var<T> entropy_loss(Var<T> probs);
template <class T>
double entropy_loss(const Tensor<T>& probs);

// Per-row entropies of probs[N x C].
template <class T>
std::vector<double> row_entropies(const Tensor<T>& probs);

// Mean over rows of -sum_c a_c ln b_c (log clamped).
template <class T>
Var<T> cross_entropy(Var<T> a, Var<T> b);

// 0.5 * (CE(a, b) + CE(b, a)).
template <class T>
Var<T> sce_loss(Var<T> a, Var<T> b);
template <class T>
double sce_loss(const Tensor<T>& a, const Tensor<T>& b);

// sce(student_x, target) + sce(student_flip, target); the target is a
// constant.
template <class T>
Var<T> paired_consistency_loss(Var<T> student_x, Var<T> student_flip, const Tensor<T>& target);

// Mean negative log-likelihood of integer labels under softmax(logits).
template <class T>
Var<T> labeled_cross_entropy(Var<T> logits, const std::vector<int>& labels);

}  // namespace dplot
