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

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <set>

#include "dplot/data.hpp"

namespace dplot {
namespace {

std::shared_ptr<const ImageBatch> pool(std::size_t n, std::uint64_t seed = 1) {
  Rng rng(seed);
  return std::make_shared<const ImageBatch>(gen_shapegrid(n, 4, rng));
}

TEST(ShapeGrid, DeterministicAndBalanced) {
  Rng a(5), b(5);
  const auto x = gen_shapegrid(40, 4, a);
  const auto y = gen_shapegrid(40, 4, b);
  EXPECT_TRUE(bitwise_equal(x.images, y.images));
  EXPECT_EQ(x.labels, y.labels);
  EXPECT_EQ(x.images.shape(), (Shape{40, 3, 16, 16}));
  for (int c = 0; c < 4; ++c) EXPECT_EQ(std::count(x.labels.begin(), x.labels.end(), c), 10);
  for (float v : x.images.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(ShapeGrid, ClassCountIsValidated) {
  Rng rng(1);
  EXPECT_THROW(gen_shapegrid(10, 1, rng), ConfigError);
  EXPECT_THROW(gen_shapegrid(10, 9, rng), ConfigError);
}

TEST(Glyph, MirroredParametersRenderTheFlippedImage) {
  Rng rng(9);
  for (int i = 0; i < 64; ++i) {
    const GlyphParams p = sample_glyph(i % 8, 8, rng);
    Tensor<float> a({1, 3, 16, 16}), b({1, 3, 16, 16});
    render_glyph(p, a.ptr());
    render_glyph(mirrored(p), b.ptr());
    EXPECT_TRUE(bitwise_equal(flip_h(a), b)) << glyph_name(p.label);
  }
}

TEST(Flip, IsAnInvolution) {
  const auto p = pool(8);
  EXPECT_TRUE(bitwise_equal(flip_h(flip_h(p->images)), p->images));
  const auto f = flip_h(p->images);
  EXPECT_EQ(f[15], p->images[0]);
}

TEST(Corrupt, SeverityZeroIsExactCopy) {
  const auto p = pool(8);
  for (auto kind : all_corruptions()) {
    Rng rng(1);
    EXPECT_TRUE(bitwise_equal(corrupt(p->images, {kind, 0}, rng), p->images)) << to_string(kind);
  }
}

TEST(Corrupt, OutputsStayInUnitRange) {
  const auto p = pool(16);
  for (auto kind : all_corruptions())
    for (int s = 1; s <= kMaxSeverity; ++s) {
      Rng rng(2);
      const auto y = corrupt(p->images, {kind, s}, rng);
      for (float v : y.data()) {
        ASSERT_GE(v, 0.0f) << to_string(kind) << " " << s;
        ASSERT_LE(v, 1.0f);
      }
    }
}

TEST(Corrupt, GaussianMeanAbsoluteDeltaMatchesFoldedNormal) {
  // Mid-grey images keep clamping rare.
  Tensor<float> grey({256, 3, 16, 16}, 0.5f);
  Rng rng(3);
  const auto y = corrupt(grey, {CorruptionKind::gaussian_noise, 5}, rng);
  double total = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) total += std::abs(y[i] - 0.5f);
  const double expected = 0.26 * std::sqrt(2.0 / std::numbers::pi);
  EXPECT_NEAR(expected, 0.2074, 1e-4);
  EXPECT_NEAR(total / static_cast<double>(y.size()), expected, 0.15 * expected);
}

TEST(Corrupt, DeterministicNoiseFromSeed) {
  const auto p = pool(8);
  Rng a(4), b(4), c(5);
  const CorruptionSpec spec{CorruptionKind::gaussian_noise, 3};
  EXPECT_TRUE(bitwise_equal(corrupt(p->images, spec, a), corrupt(p->images, spec, b)));
  EXPECT_FALSE(bitwise_equal(corrupt(p->images, spec, a), corrupt(p->images, spec, c)));
}

TEST(Corrupt, DeterministicKindsCommuteWithFlip) {
  const auto p = pool(16);
  for (auto kind : {CorruptionKind::brightness, CorruptionKind::contrast, CorruptionKind::blur,
                    CorruptionKind::pixelate})
    for (int s = 1; s <= kMaxSeverity; ++s) {
      Rng r1(1), r2(1);
      const auto a = flip_h(corrupt(p->images, {kind, s}, r1));
      const auto b = corrupt(flip_h(p->images), {kind, s}, r2);
      EXPECT_TRUE(bitwise_equal(a, b)) << to_string(kind) << " severity " << s;
    }
}

TEST(Corrupt, SeverityIncreasesDistortion) {
  const auto p = pool(32);
  for (auto kind : all_corruptions()) {
    double prev = 0.0;
    for (int s = 1; s <= kMaxSeverity; s += 2) {
      Rng rng(6);
      const auto y = corrupt(p->images, {kind, s}, rng);
      double d = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) d += std::abs(y[i] - p->images[i]);
      EXPECT_GT(d, prev) << to_string(kind) << " severity " << s;
      prev = d;
    }
  }
}

TEST(Corrupt, NameRoundTrip) {
  for (auto kind : all_corruptions()) EXPECT_EQ(parse_corruption(to_string(kind)), kind);
  EXPECT_THROW(parse_corruption("fog"), ConfigError);
}

TEST(Stream, SegmentCounts) {
  StreamSpec spec;
  spec.setting = StreamSetting::gradual;
  EXPECT_EQ(segment_plan(spec).size(), 45u);
  std::vector<CorruptionKind> fifteen;
  for (int r = 0; r < 3; ++r)
    for (auto k : all_corruptions()) fifteen.push_back(k);
  spec.kinds = fifteen;
  EXPECT_EQ(segment_plan(spec).size(), 135u);
  spec.setting = StreamSetting::continual;
  EXPECT_EQ(segment_plan(spec).size(), 15u);
  for (const auto& s : segment_plan(spec)) EXPECT_EQ(s.severity, 5);
}

TEST(Stream, GradualSeverityWalk) {
  StreamSpec spec;
  spec.kinds = {CorruptionKind::blur};
  const auto plan = segment_plan(spec);
  std::vector<int> sev;
  for (const auto& s : plan) sev.push_back(s.severity);
  EXPECT_EQ(sev, (std::vector<int>{1, 2, 3, 4, 5, 4, 3, 2, 1}));
}

TEST(Stream, BatchesAreReproducibleInAnyOrder) {
  StreamSpec spec;
  spec.kinds = {CorruptionKind::gaussian_noise, CorruptionKind::contrast};
  spec.batches_per_segment = 2;
  spec.batch_size = 8;
  spec.seed = 11;
  const Stream s1(spec, pool(64)), s2(spec, pool(64));
  ASSERT_EQ(s1.num_batches(), 36u);
  const auto late = s2.batch(30);
  for (std::size_t i = 0; i < s1.num_batches(); ++i) {
    const auto a = s1.batch(i);
    EXPECT_EQ(a.position, i);
    EXPECT_EQ(a.batch.size(), 8u);
    if (i == 30) EXPECT_TRUE(bitwise_equal(a.batch.images, late.batch.images));
  }
}

TEST(Stream, SegmentImagesAreDistinct) {
  StreamSpec spec;
  spec.setting = StreamSetting::continual;
  spec.kinds = {CorruptionKind::brightness};
  spec.batches_per_segment = 4;
  spec.batch_size = 16;
  const auto p = pool(64);
  const Stream s(spec, p);
  // Brightness is deterministic, so distinct sources give distinct outputs.
  std::set<std::vector<float>> seen;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto b = s.batch(i);
    const std::size_t per = b.batch.images.size() / b.batch.size();
    for (std::size_t j = 0; j < b.batch.size(); ++j)
      seen.insert(std::vector<float>(b.batch.images.ptr() + j * per,
                                     b.batch.images.ptr() + (j + 1) * per));
  }
  EXPECT_EQ(seen.size(), 64u);
}

TEST(Stream, MixedTagsAndPoolExhaustion) {
  StreamSpec spec;
  spec.setting = StreamSetting::mixed;
  spec.batches_per_segment = 1;
  spec.batch_size = 8;
  const Stream s(spec, pool(16));
  EXPECT_EQ(s.batch(0).info.kind, "mixed");
  EXPECT_EQ(s.batch(0).info.severity, 5);
  spec.batches_per_segment = 3;
  EXPECT_THROW(Stream(spec, pool(16)), ConfigError);
}

}  // namespace
}  // namespace dplot
