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
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "dplot/rng.hpp"
#include "dplot/tensor.hpp"

namespace dplot {

inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kImageSize = 16;

// N x 3 x 16 x 16 images with pixels in [0, 1] and labels in [0, C).
struct ImageBatch {
  Tensor<float> images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

// Subset of a batch by sample index.
ImageBatch gather(const ImageBatch& batch, const std::vector<std::size_t>& indices);
ImageBatch concat(const ImageBatch& a, const ImageBatch& b);

// Glyph family of each class: disk, plus, horizontal stripes, checkerboard,
// ring, vertical stripes, diamond, diagonal cross.
const char* glyph_name(int label);

// Random draw of one glyph instance. Offsets are relative to the image
// centre; `mirror` negates the x axis of the glyph's own frame so patterns
// without mirror symmetry (checkerboard, stripe phase) cover both
// orientations.
struct GlyphParams {
  int label = 0;
  double offset_x = 0.0;
  double offset_y = 0.0;
  double radius = 4.0;
  double phase_x = 0.0;
  double phase_y = 0.0;
  bool mirror = false;
  float foreground[3] = {1.0f, 1.0f, 1.0f};
  float background[3] = {0.0f, 0.0f, 0.0f};
};

GlyphParams sample_glyph(int label, std::size_t classes, Rng& rng);

// Writes one 3 x 16 x 16 image into `out`.
void render_glyph(const GlyphParams& params, float* out);

// Parameters whose rendering is the horizontal flip of the original one.
GlyphParams mirrored(const GlyphParams& params);

// Procedural dataset of n images over `classes` glyph families (2..8),
// balanced up to n mod classes. Every glyph is mirror-symmetric about its own
// vertical axis and the centre jitter distribution is symmetric about the
// image centre, so a horizontal flip never changes the class.
ImageBatch gen_shapegrid(std::size_t n, std::size_t classes, Rng& rng);

enum class CorruptionKind { gaussian_noise, brightness, contrast, blur, pixelate };

inline constexpr int kMaxSeverity = 5;

std::string to_string(CorruptionKind kind);
CorruptionKind parse_corruption(const std::string& name);
std::vector<CorruptionKind> all_corruptions();

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::gaussian_noise;
  int severity = 0;  // 0 is the exact identity, 1..5 increasingly severe
};

// Severity tables (index = severity - 1):
//   gaussian_noise  additive N(0, s^2),  s        = .04 .08 .12 .18 .26
//   brightness      additive shift,       delta    = .05 .10 .15 .20 .30
//   contrast        (x - mean) * c + mean, c       = .85 .70 .55 .40 .30
//   blur            box radius r blended with weight w,
//                   r = 1 1 2 2 3, w = .4 .7 .6 .85 1.0
//   pixelate        block average with factor 2 2 4 4 8, nearest upscale
// The contrast mean is per image over all channels. Outputs are clamped to
// [0, 1]. Only gaussian_noise consumes the generator.
Tensor<float> corrupt(const Tensor<float>& images, const CorruptionSpec& spec, Rng& rng);
ImageBatch corrupt(const ImageBatch& batch, const CorruptionSpec& spec, Rng& rng);

// Reverses the width axis of an N x C x H x W tensor.
template <class T>
Tensor<T> flip_h(const Tensor<T>& images);
ImageBatch flip_h(const ImageBatch& batch);

enum class StreamSetting { continual, gradual, mixed };

std::string to_string(StreamSetting setting);
StreamSetting parse_setting(const std::string& name);

struct StreamSpec {
  StreamSetting setting = StreamSetting::gradual;
  // Repetitions are allowed (e.g. 15 entries for a 15-domain sequence).
  std::vector<CorruptionKind> kinds = all_corruptions();
  std::size_t batches_per_segment = 20;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
};

struct SegmentInfo {
  std::string kind;  // corruption name, or "mixed"
  int severity = 0;
  std::size_t segment = 0;
};

struct StreamBatch {
  ImageBatch batch;
  SegmentInfo info;
  std::size_t position = 0;  // batch index within the stream
};

// continual: one severity-5 segment per kind.
// gradual:   per kind the severity walk 1 2 3 4 5 4 3 2 1.
// mixed:     one segment per kind, every image draws its own kind at 5.
std::vector<SegmentInfo> segment_plan(const StreamSpec& spec);

// Deterministic online stream over a clean test pool. Each segment samples
// batches_per_segment * batch_size distinct pool images (a fresh
// permutation per segment); corruption noise is drawn from a generator keyed
// by the batch position, so batch(i) is reproducible in any access order.
class Stream {
 public:
  Stream(StreamSpec spec, std::shared_ptr<const ImageBatch> pool);

  const StreamSpec& spec() const { return spec_; }
  const std::vector<SegmentInfo>& segments() const { return segments_; }
  std::size_t num_batches() const { return segments_.size() * spec_.batches_per_segment; }
  StreamBatch batch(std::size_t position) const;

 private:
  StreamSpec spec_;
  std::shared_ptr<const ImageBatch> pool_;
  std::vector<SegmentInfo> segments_;
  std::vector<std::vector<std::size_t>> segment_indices_;
};

}  // namespace dplot
