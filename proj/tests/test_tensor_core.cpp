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

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "dplot/adam.hpp"
#include "dplot/autodiff.hpp"
#include "dplot/ops.hpp"
#include "dplot/rng.hpp"
#include "dplot/tensor.hpp"
#include "oracles.hpp"

namespace dplot {
namespace {

using testing::random_tensor;

Tensor<double> naive_matmul(const Tensor<double>& a, const Tensor<double>& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<double> c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  return c;
}

Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, std::size_t stride,
                          std::size_t pad) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t f = w.dim(0), k = w.dim(2);
  const std::size_t ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
  Tensor<double> y({n, f, ho, wo});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < f; ++o)
      for (std::size_t i = 0; i < ho; ++i)
        for (std::size_t j = 0; j < wo; ++j) {
          double s = 0.0;
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t ki = 0; ki < k; ++ki)
              for (std::size_t kj = 0; kj < k; ++kj) {
                const long yy = static_cast<long>(i * stride + ki) - static_cast<long>(pad);
                const long xx = static_cast<long>(j * stride + kj) - static_cast<long>(pad);
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(wd))
                  continue;
                s += x[((b * c + ch) * h + yy) * wd + xx] * w[((o * c + ch) * k + ki) * k + kj];
              }
          y[((b * f + o) * ho + i) * wo + j] = s;
        }
  return y;
}

// Small integers keep every product and partial sum exact, so any
// summation order gives the same bits.
Tensor<double> integer_tensor(const Shape& s, Rng& rng) {
  Tensor<double> t(s);
  for (auto& v : t.data()) v = static_cast<double>(static_cast<int>(rng.below(9)) - 4);
  return t;
}

TEST(Matmul, IdentityAndAnalytic) {
  Tape<double> tape(false);
  Tensor<double> eye({3, 3});
  for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  Rng rng(1);
  const Tensor<double> b = random_tensor({3, 4}, rng);
  EXPECT_TRUE(bitwise_equal(matmul(tape.constant(eye), tape.constant(b)).value(), b));
  const auto c = matmul(tape.constant(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3, 4})),
                        tape.constant(Tensor<double>({2, 1}, std::vector<double>{0, 1})));
  EXPECT_EQ(c.value(), Tensor<double>({2, 1}, std::vector<double>{2, 4}));
}

TEST(Matmul, MatchesTripleLoopExactly) {
  Rng rng(2);
  const auto a = integer_tensor({5, 7}, rng);
  const auto b = integer_tensor({7, 3}, rng);
  Tape<double> tape(false);
  EXPECT_TRUE(bitwise_equal(matmul(tape.constant(a), tape.constant(b)).value(), naive_matmul(a, b)));
}

TEST(Matmul, ShapeMismatchThrows) {
  Tape<double> tape(false);
  EXPECT_THROW(matmul(tape.constant(Tensor<double>({2, 3})), tape.constant(Tensor<double>({2, 3}))),
               ShapeError);
}

TEST(Conv2d, OneByOneUnitKernelIsIdentity) {
  Rng rng(3);
  const auto x = random_tensor({2, 3, 5, 4}, rng);
  Tensor<double> w({3, 3, 1, 1});
  for (int i = 0; i < 3; ++i) w[i * 3 + i] = 1.0;
  Tape<double> tape(false);
  EXPECT_TRUE(bitwise_equal(conv2d(tape.constant(x), tape.constant(w), {}).value(), x));
}

TEST(Conv2d, AllOnesKernelOnConstantImage) {
  Tape<double> tape(false);
  const auto y = conv2d(tape.constant(Tensor<double>({1, 1, 5, 5}, 1.0)),
                        tape.constant(Tensor<double>({1, 1, 3, 3}, 1.0)), {1, 1});
  for (std::size_t i = 1; i < 4; ++i)
    for (std::size_t j = 1; j < 4; ++j) EXPECT_EQ(y.value()[i * 5 + j], 9.0);
  EXPECT_EQ(y.value()[0], 4.0);
}

TEST(Conv2d, MatchesNestedLoopExactly) {
  Rng rng(4);
  for (std::size_t stride : {1, 2}) {
    for (std::size_t pad : {0, 1}) {
      const auto x = integer_tensor({2, 3, 7, 6}, rng);
      const auto w = integer_tensor({4, 3, 3, 3}, rng);
      Tape<double> tape(false);
      const auto y = conv2d(tape.constant(x), tape.constant(w), {stride, pad});
      EXPECT_TRUE(bitwise_equal(y.value(), naive_conv(x, w, stride, pad)))
          << "stride " << stride << " pad " << pad;
    }
  }
}

TEST(Conv2d, LargeBatchMatchesNestedLoop) {
  // Crosses the internal column chunking boundary.
  Rng rng(5);
  const auto x = integer_tensor({9, 2, 16, 16}, rng);
  const auto w = integer_tensor({3, 2, 3, 3}, rng);
  Tape<double> tape(false);
  EXPECT_TRUE(bitwise_equal(conv2d(tape.constant(x), tape.constant(w), {1, 1}).value(),
                            naive_conv(x, w, 1, 1)));
}

TEST(Conv2d, RejectsEvenKernel) {
  Tape<double> tape(false);
  EXPECT_THROW(conv2d(tape.constant(Tensor<double>({1, 1, 4, 4})),
                      tape.constant(Tensor<double>({1, 1, 2, 2})), {}),
               ShapeError);
}

TEST(BatchNorm, ConstantChannelGivesZeros) {
  Tensor<double> x({4, 2, 3, 3});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = (i / 9) % 2 == 0 ? 3.0 : -1.5;
  Tape<double> tape(false);
  auto stats = RunningStats<double>::identity(2);
  const auto y = batchnorm(tape.constant(x), tape.constant(Tensor<double>({2}, 1.0)),
                           tape.constant(Tensor<double>({2})), stats, {});
  for (double v : y.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(BatchNorm, BatchStatsNormalize) {
  Rng rng(6);
  Tensor<double> x = random_tensor({8, 3, 4, 4}, rng, -3.0, 5.0);
  Tape<double> tape(false);
  auto stats = RunningStats<double>::identity(3);
  const auto y = batchnorm(tape.constant(x), tape.constant(Tensor<double>({3}, 1.0)),
                           tape.constant(Tensor<double>({3})), stats, {});
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0.0, v = 0.0;
    for (std::size_t n = 0; n < 8; ++n)
      for (std::size_t k = 0; k < 16; ++k) m += y.value()[(n * 3 + c) * 16 + k];
    m /= 128.0;
    for (std::size_t n = 0; n < 8; ++n)
      for (std::size_t k = 0; k < 16; ++k) {
        const double d = y.value()[(n * 3 + c) * 16 + k] - m;
        v += d * d;
      }
    v /= 128.0;
    EXPECT_LT(std::abs(m), 1e-5);
    EXPECT_LT(std::abs(v - 1.0), 1e-4);
  }
}

TEST(BatchNorm, RunningModeMatchesBatchModeOnStandardizedBatch) {
  Rng rng(7);
  Tensor<double> x = random_tensor({6, 2, 3, 3}, rng);
  // Standardize each channel exactly to mean 0, biased variance 1.
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0.0, v = 0.0;
    for (std::size_t n = 0; n < 6; ++n)
      for (std::size_t k = 0; k < 9; ++k) m += x[(n * 2 + c) * 9 + k];
    m /= 54.0;
    for (std::size_t n = 0; n < 6; ++n)
      for (std::size_t k = 0; k < 9; ++k) v += std::pow(x[(n * 2 + c) * 9 + k] - m, 2);
    v /= 54.0;
    for (std::size_t n = 0; n < 6; ++n)
      for (std::size_t k = 0; k < 9; ++k) {
        double& e = x[(n * 2 + c) * 9 + k];
        e = (e - m) / std::sqrt(v);
      }
  }
  Tape<double> tape(false);
  const auto g = tape.constant(Tensor<double>({2}, std::vector<double>{1.5, 0.5}));
  const auto b = tape.constant(Tensor<double>({2}, std::vector<double>{0.1, -0.2}));
  auto s1 = RunningStats<double>::identity(2);
  auto s2 = RunningStats<double>::identity(2);
  BatchNormOptions run;
  run.mode = BnMode::running_stats;
  const auto yb = batchnorm(tape.constant(x), g, b, s1, {});
  const auto yr = batchnorm(tape.constant(x), g, b, s2, run);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(yb.value()[i], yr.value()[i], 1e-6);
}

TEST(BatchNorm, RunningStatsUpdateByMomentum) {
  Tensor<double> x({2, 1}, std::vector<double>{1.0, 3.0});
  Tape<double> tape(false);
  auto stats = RunningStats<double>::identity(1);
  batchnorm(tape.constant(x), tape.constant(Tensor<double>({1}, 1.0)),
            tape.constant(Tensor<double>({1})), stats, {});
  EXPECT_DOUBLE_EQ(stats.mean[0], 0.1 * 2.0);
  EXPECT_DOUBLE_EQ(stats.var[0], 0.9 + 0.1 * 1.0);
}

TEST(BatchNorm, SingleSampleBatchModeThrows) {
  Tape<double> tape(false);
  auto stats = RunningStats<double>::identity(1);
  EXPECT_THROW(batchnorm(tape.constant(Tensor<double>({1, 1, 2, 2})),
                         tape.constant(Tensor<double>({1}, 1.0)),
                         tape.constant(Tensor<double>({1})), stats, {}),
               ShapeError);
}

TEST(Softmax, KnownValues) {
  const auto p = softmax_rows(Tensor<double>({1, 4}, 0.7));
  for (double v : p.data()) EXPECT_DOUBLE_EQ(v, 0.25);
  const auto q = softmax_rows(Tensor<double>({1, 2}, std::vector<double>{0.0, std::log(3.0)}));
  EXPECT_NEAR(q[0], 0.25, 1e-15);
  EXPECT_NEAR(q[1], 0.75, 1e-15);
}

TEST(Softmax, RowsAreSimplexPoints) {
  Rng rng(8);
  const auto p = softmax_rows(random_tensor({50, 6}, rng, -20.0, 20.0));
  for (std::size_t i = 0; i < 50; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 6; ++j) {
      EXPECT_GE(p[i * 6 + j], 0.0);
      s += p[i * 6 + j];
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(LogClamped, ClampsAtEpsilon) {
  Tape<double> tape(false);
  const auto y = log_clamped(tape.constant(Tensor<double>({2}, std::vector<double>{0.0, 1.0})));
  EXPECT_DOUBLE_EQ(y.value()[0], std::log(1e-12));
  EXPECT_DOUBLE_EQ(y.value()[1], 0.0);
}

TEST(Backward, SumAndHalfSquaredNorm) {
  Rng rng(9);
  const auto p = random_tensor({3, 2}, rng);
  {
    Tape<double> tape;
    const auto v = tape.parameter(0, p);
    const auto g = tape.backward(sum(v));
    for (double e : g.find(0)->data()) EXPECT_EQ(e, 1.0);
  }
  {
    Tape<double> tape;
    const auto v = tape.parameter(0, p);
    const auto g = tape.backward(scale(sum(mul(v, v)), 0.5));
    EXPECT_TRUE(bitwise_equal(*g.find(0), p));
  }
}

TEST(Backward, NonParticipatingParameterGetsZero) {
  Tape<double> tape;
  const auto a = tape.parameter(0, Tensor<double>({2}, 1.0));
  tape.parameter(1, Tensor<double>({3}, 1.0));
  const auto g = tape.backward(sum(a));
  EXPECT_FALSE(g.contains(1));
  EXPECT_EQ(g.get_or_zero(1, {3}), Tensor<double>({3}));
}

TEST(Backward, RejectsNonScalarAndSecondUse) {
  Tape<double> tape;
  const auto a = tape.parameter(0, Tensor<double>({2}, 1.0));
  EXPECT_THROW(tape.backward(a), ShapeError);
  const auto loss = sum(a);
  tape.backward(loss);
  EXPECT_TRUE(tape.consumed());
  EXPECT_THROW(tape.backward(loss), std::logic_error);
}

TEST(Backward, NonFiniteResultIsReported) {
  Tape<double> tape(false);
  const auto a = tape.constant(Tensor<double>({1}, 1e308));
  EXPECT_THROW(scale(a, 10.0), NumericError);
}

TEST(GradientOracle, EveryPrimitiveMatchesFiniteDifferences) {
  for (const auto& c : testing::run_gradient_oracles(5, 11)) {
    EXPECT_TRUE(c.ok()) << c.name << " worst excess " << c.worst_excess;
  }
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  std::vector<Tensor<double>> params{Tensor<double>({2}, std::vector<double>{0.5, -1.0})};
  AdamState<double> opt({1e-3}, {0}, params);
  Gradients<double> g;
  g.accumulate(0, Tensor<double>({2}));
  opt.apply(params, g);
  EXPECT_EQ(params[0], Tensor<double>({2}, std::vector<double>{0.5, -1.0}));
  EXPECT_EQ(opt.step(), 1);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  std::vector<Tensor<double>> params{Tensor<double>({2}, std::vector<double>{0.0, 0.0})};
  AdamState<double> opt({0.01}, {0}, params);
  Gradients<double> g;
  g.accumulate(0, Tensor<double>({2}, std::vector<double>{3.0, -0.2}));
  opt.apply(params, g);
  EXPECT_NEAR(params[0][0], -0.01, 1e-8);
  EXPECT_NEAR(params[0][1], 0.01, 1e-7);
}

TEST(Adam, ThreeStepScalarTrace) {
  const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double grads[] = {0.3, -1.2, 0.7};
  double p = 1.0, m = 0.0, v = 0.0;
  std::vector<Tensor<double>> params{Tensor<double>({}, 1.0)};
  AdamState<double> opt({lr, b1, b2, eps}, {0}, params);
  for (int t = 1; t <= 3; ++t) {
    const double g = grads[t - 1];
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double inv1 = 1.0 / (1.0 - std::pow(b1, t));
    const double inv2 = 1.0 / (1.0 - std::pow(b2, t));
    p -= lr * (m * inv1) / (std::sqrt(v * inv2) + eps);
    Gradients<double> gr;
    gr.accumulate(0, Tensor<double>({}, g));
    opt.apply(params, gr);
    EXPECT_EQ(params[0].item(), p) << "step " << t;
  }
  EXPECT_EQ(opt.step(), 3);
}

TEST(Adam, ShapeMismatchThrows) {
  std::vector<Tensor<double>> params{Tensor<double>({2})};
  AdamState<double> opt({}, {0}, params);
  Gradients<double> g;
  g.accumulate(0, Tensor<double>({3}));
  EXPECT_THROW(opt.apply(params, g), ShapeError);
}

TEST(Rng, SameSeedSameSequence) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_EQ(Rng(5).fork(3).next_u64(), Rng(5).fork(3).next_u64());
  EXPECT_NE(Rng(5).fork(3).next_u64(), Rng(5).fork(4).next_u64());
}

TEST(Rng, NormalMoments) {
  Rng r(1);
  double s = 0.0, s2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.01);
}

TEST(Tensor, SizeInvariantAndFiniteCheck) {
  EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>{1.0f}), ShapeError);
  Tensor<float> t({2}, std::vector<float>{1.0f, NAN});
  EXPECT_FALSE(t.all_finite());
  EXPECT_THROW(require_finite(t, "t"), NumericError);
}

}  // namespace
}  // namespace dplot
