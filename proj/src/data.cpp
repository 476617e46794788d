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

#include "dplot/data.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "dplot/error.hpp"
#include "dplot/ops.hpp"

namespace dplot {
namespace {

constexpr std::size_t kPlane = kImageSize * kImageSize;
constexpr std::size_t kImageNumel = kImageChannels * kPlane;

constexpr double kNoiseSigma[] = {0.04, 0.08, 0.12, 0.18, 0.26};
constexpr float kBrightness[] = {0.05f, 0.1f, 0.15f, 0.2f, 0.3f};
constexpr float kContrast[] = {0.85f, 0.7f, 0.55f, 0.4f, 0.3f};
constexpr int kBlurRadius[] = {1, 1, 2, 2, 3};
constexpr float kBlurWeight[] = {0.4f, 0.7f, 0.6f, 0.85f, 1.0f};
constexpr std::size_t kPixelate[] = {2, 2, 4, 4, 8};

// Per-image hue jitter as a fraction of the class hue spacing; above 0.5
// neighbouring classes overlap, so colour alone is an unreliable cue.
constexpr double kHueJitter = 0.9;

float clamp01(float v) { return std::min(1.0f, std::max(0.0f, v)); }

void hsv_to_rgb(double h, double s, double v, float* rgb) {
  h = h - std::floor(h);
  const double k[3] = {5.0, 3.0, 1.0};
  for (int c = 0; c < 3; ++c) {
    const double t = std::fmod(k[c] + h * 6.0, 6.0);
    const double m = std::max(0.0, std::min({t, 4.0 - t, 1.0}));
    rgb[c] = static_cast<float>(v - v * s * m);
  }
}

bool parity_on(double u) {
  return (static_cast<long long>(std::floor(u * 0.5)) & 1LL) == 0;
}

bool glyph_mask(const GlyphParams& g, double x, double y) {
  const double ax = std::abs(x), ay = std::abs(y);
  const double r = g.radius;
  switch (g.label) {
    case 0:  // disk
      return x * x + y * y <= r * r;
    case 1:  // plus
      return (ax <= 1.0 && ay <= r) || (ay <= 1.0 && ax <= r);
    case 2:  // horizontal stripes
      return ax <= r && ay <= r && parity_on(y + g.phase_y);
    case 3:  // checkerboard
      return ax <= r && ay <= r &&
             parity_on(x + g.phase_x) == parity_on(y + g.phase_y);
    case 4: {  // ring
      const double d = std::sqrt(x * x + y * y);
      return d <= r && d >= r - 1.6;
    }
    case 5:  // vertical stripes
      return ax <= r && ay <= r && parity_on(x + g.phase_x);
    case 6:  // diamond
      return ax + ay <= r + 0.5;
    case 7:  // diagonal cross
      return std::abs(ax - ay) <= 0.9 && ax <= r;
    default:
      throw std::out_of_range("glyph label out of range");
  }
}

// Sum of the pixels of one plane, pairing each column with its mirror so
// the result is identical for the flipped plane.
double mirror_sum(const float* plane, std::size_t h, std::size_t w) {
  double total = 0.0;
  for (std::size_t i = 0; i < h; ++i) {
    const float* row = plane + i * w;
    double row_sum = 0.0;
    for (std::size_t j = 0; j < w / 2; ++j) {
      row_sum += static_cast<double>(row[j]) + static_cast<double>(row[w - 1 - j]);
    }
    if (w % 2 == 1) row_sum += row[w / 2];
    total += row_sum;
  }
  return total;
}

void check_images(const Tensor<float>& images) {
  if (images.rank() != 4) {
    throw ShapeError("expected N x C x H x W images, got " + shape_str(images.shape()));
  }
}

// Box blur with edge replication, separable. Symmetric neighbours are added
// pairwise before accumulation so the filter commutes with flip_h exactly.
void box_blur_plane(const float* in, float* out, std::size_t h, std::size_t w, int r) {
  std::vector<float> tmp(h * w);
  const auto clampi = [](long v, long hi) { return static_cast<std::size_t>(std::clamp(v, 0L, hi)); };
  const long hl = static_cast<long>(h) - 1, wl = static_cast<long>(w) - 1;
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      float s = in[i * w + j];
      for (int k = 1; k <= r; ++k) {
        const float a = in[i * w + clampi(static_cast<long>(j) - k, wl)];
        const float b = in[i * w + clampi(static_cast<long>(j) + k, wl)];
        s += a + b;
      }
      tmp[i * w + j] = s;
    }
  }
  const float norm = 1.0f / static_cast<float>((2 * r + 1) * (2 * r + 1));
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      float s = tmp[i * w + j];
      for (int k = 1; k <= r; ++k) {
        const float a = tmp[clampi(static_cast<long>(i) - k, hl) * w + j];
        const float b = tmp[clampi(static_cast<long>(i) + k, hl) * w + j];
        s += a + b;
      }
      out[i * w + j] = s * norm;
    }
  }
}

void pixelate_plane(const float* in, float* out, std::size_t h, std::size_t w,
                    std::size_t f) {
  const float norm = 1.0f / static_cast<float>(f * f);
  for (std::size_t bi = 0; bi < h; bi += f) {
    for (std::size_t bj = 0; bj < w; bj += f) {
      const std::size_t bh = std::min(f, h - bi), bw = std::min(f, w - bj);
      float s = 0.0f;
      for (std::size_t i = bi; i < bi + bh; ++i) {
        for (std::size_t k = 0; k < bw / 2; ++k) {
          s += in[i * w + bj + k] + in[i * w + bj + bw - 1 - k];
        }
        if (bw % 2 == 1) s += in[i * w + bj + bw / 2];
      }
      const float v = (bh == f && bw == f) ? s * norm
                                            : s / static_cast<float>(bh * bw);
      for (std::size_t i = bi; i < bi + bh; ++i) {
        for (std::size_t j = bj; j < bj + bw; ++j) out[i * w + j] = v;
      }
    }
  }
}

// Corrupts `count` images starting at `x` in place.
void corrupt_images(float* x, std::size_t count, std::size_t c, std::size_t h,
                    std::size_t w, const CorruptionSpec& spec, Rng& rng) {
  const std::size_t plane = h * w;
  const std::size_t numel = count * c * plane;
  const int s = spec.severity - 1;
  switch (spec.kind) {
    case CorruptionKind::gaussian_noise: {
      const double sigma = kNoiseSigma[s];
      for (std::size_t i = 0; i < numel; ++i) {
        x[i] = clamp01(static_cast<float>(x[i] + sigma * rng.normal()));
      }
      break;
    }
    case CorruptionKind::brightness:
      for (std::size_t i = 0; i < numel; ++i) x[i] = clamp01(x[i] + kBrightness[s]);
      break;
    case CorruptionKind::contrast:
      for (std::size_t n = 0; n < count; ++n) {
        float* img = x + n * c * plane;
        double total = 0.0;
        for (std::size_t ch = 0; ch < c; ++ch) total += mirror_sum(img + ch * plane, h, w);
        const auto mean = static_cast<float>(total / static_cast<double>(c * plane));
        for (std::size_t i = 0; i < c * plane; ++i) {
          img[i] = clamp01((img[i] - mean) * kContrast[s] + mean);
        }
      }
      break;
    case CorruptionKind::blur: {
      std::vector<float> blurred(plane);
      const float wgt = kBlurWeight[s];
      for (std::size_t p = 0; p < count * c; ++p) {
        float* pl = x + p * plane;
        box_blur_plane(pl, blurred.data(), h, w, kBlurRadius[s]);
        for (std::size_t i = 0; i < plane; ++i) {
          pl[i] = clamp01((1.0f - wgt) * pl[i] + wgt * blurred[i]);
        }
      }
      break;
    }
    case CorruptionKind::pixelate: {
      std::vector<float> out(plane);
      for (std::size_t p = 0; p < count * c; ++p) {
        float* pl = x + p * plane;
        pixelate_plane(pl, out.data(), h, w, kPixelate[s]);
        for (std::size_t i = 0; i < plane; ++i) pl[i] = clamp01(out[i]);
      }
      break;
    }
  }
}

}  // namespace

ImageBatch gather(const ImageBatch& batch, const std::vector<std::size_t>& indices) {
  check_images(batch.images);
  Shape shape = batch.images.shape();
  const std::size_t per = shape_numel(shape) / std::max<std::size_t>(shape[0], 1);
  shape[0] = indices.size();
  ImageBatch out{Tensor<float>::uninitialized(shape), std::vector<int>(indices.size())};
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= batch.size()) throw std::out_of_range("gather index out of range");
    std::copy_n(batch.images.ptr() + indices[i] * per, per, out.images.ptr() + i * per);
    out.labels[i] = batch.labels[indices[i]];
  }
  return out;
}

ImageBatch concat(const ImageBatch& a, const ImageBatch& b) {
  ImageBatch out{concat_rows(a.images, b.images), a.labels};
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  return out;
}

const char* glyph_name(int label) {
  static const char* names[] = {"disk", "plus", "hstripes", "checker",
                                "ring", "vstripes", "diamond", "xcross"};
  if (label < 0 || label > 7) throw std::out_of_range("glyph label out of range");
  return names[label];
}

GlyphParams sample_glyph(int label, std::size_t classes, Rng& rng) {
  GlyphParams g;
  g.label = label;
  g.offset_x = rng.uniform(-2.5, 2.5);
  g.offset_y = rng.uniform(-2.5, 2.5);
  g.radius = rng.uniform(3.5, 5.0);
  g.phase_x = rng.uniform(0.0, 4.0);
  g.phase_y = rng.uniform(0.0, 4.0);
  g.mirror = rng.uniform() < 0.5;
  const double spacing = 1.0 / static_cast<double>(classes);
  const double hue = label * spacing + rng.uniform(-kHueJitter, kHueJitter) * spacing;
  hsv_to_rgb(hue, rng.uniform(0.45, 0.9), rng.uniform(0.65, 1.0), g.foreground);
  hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.5), rng.uniform(0.05, 0.35), g.background);
  return g;
}

void render_glyph(const GlyphParams& g, float* out) {
  const double centre = (static_cast<double>(kImageSize) - 1.0) * 0.5;
  for (std::size_t i = 0; i < kImageSize; ++i) {
    const double y = (static_cast<double>(i) - centre) - g.offset_y;
    for (std::size_t j = 0; j < kImageSize; ++j) {
      double x = (static_cast<double>(j) - centre) - g.offset_x;
      if (g.mirror) x = -x;
      const bool on = glyph_mask(g, x, y);
      const float* rgb = on ? g.foreground : g.background;
      for (std::size_t c = 0; c < kImageChannels; ++c) {
        out[c * kPlane + i * kImageSize + j] = rgb[c];
      }
    }
  }
}

GlyphParams mirrored(const GlyphParams& params) {
  GlyphParams g = params;
  g.offset_x = -params.offset_x;
  g.mirror = !params.mirror;
  return g;
}

ImageBatch gen_shapegrid(std::size_t n, std::size_t classes, Rng& rng) {
  if (classes < 2 || classes > 8) {
    throw ConfigError("classes must be in 2..8, got " + std::to_string(classes));
  }
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % classes);
  rng.shuffle(labels.begin(), labels.end());
  ImageBatch out{Tensor<float>::uninitialized({n, kImageChannels, kImageSize, kImageSize}),
                 labels};
  for (std::size_t i = 0; i < n; ++i) {
    const GlyphParams g = sample_glyph(labels[i], classes, rng);
    render_glyph(g, out.images.ptr() + i * kImageNumel);
  }
  return out;
}

std::string to_string(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::gaussian_noise: return "gaussian_noise";
    case CorruptionKind::brightness: return "brightness";
    case CorruptionKind::contrast: return "contrast";
    case CorruptionKind::blur: return "blur";
    case CorruptionKind::pixelate: return "pixelate";
  }
  return "unknown";
}

CorruptionKind parse_corruption(const std::string& name) {
  for (CorruptionKind k : all_corruptions()) {
    if (to_string(k) == name) return k;
  }
  if (name == "gaussian" || name == "noise") return CorruptionKind::gaussian_noise;
  throw ConfigError("unknown corruption '" + name + "'");
}

std::vector<CorruptionKind> all_corruptions() {
  return {CorruptionKind::gaussian_noise, CorruptionKind::brightness,
          CorruptionKind::contrast, CorruptionKind::blur, CorruptionKind::pixelate};
}

Tensor<float> corrupt(const Tensor<float>& images, const CorruptionSpec& spec, Rng& rng) {
  check_images(images);
  if (spec.severity < 0 || spec.severity > kMaxSeverity) {
    throw ConfigError("severity must be in 0..5, got " + std::to_string(spec.severity));
  }
  Tensor<float> out = images;
  if (spec.severity == 0) return out;
  corrupt_images(out.ptr(), images.dim(0), images.dim(1), images.dim(2), images.dim(3),
                 spec, rng);
  return out;
}

ImageBatch corrupt(const ImageBatch& batch, const CorruptionSpec& spec, Rng& rng) {
  return {corrupt(batch.images, spec, rng), batch.labels};
}

template <class T>
Tensor<T> flip_h(const Tensor<T>& images) {
  if (images.rank() != 4) {
    throw ShapeError("flip_h expects N x C x H x W, got " + shape_str(images.shape()));
  }
  const std::size_t w = images.dim(3);
  const std::size_t rows = images.size() / std::max<std::size_t>(w, 1);
  Tensor<T> out = Tensor<T>::uninitialized(images.shape());
  const T* src = images.ptr();
  T* dst = out.ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < w; ++j) dst[r * w + j] = src[r * w + (w - 1 - j)];
  }
  return out;
}

template Tensor<float> flip_h(const Tensor<float>&);
template Tensor<double> flip_h(const Tensor<double>&);

ImageBatch flip_h(const ImageBatch& batch) { return {flip_h(batch.images), batch.labels}; }

std::string to_string(StreamSetting setting) {
  switch (setting) {
    case StreamSetting::continual: return "continual";
    case StreamSetting::gradual: return "gradual";
    case StreamSetting::mixed: return "mixed";
  }
  return "unknown";
}

StreamSetting parse_setting(const std::string& name) {
  if (name == "continual") return StreamSetting::continual;
  if (name == "gradual") return StreamSetting::gradual;
  if (name == "mixed") return StreamSetting::mixed;
  throw ConfigError("unknown stream setting '" + name + "'");
}

std::vector<SegmentInfo> segment_plan(const StreamSpec& spec) {
  std::vector<SegmentInfo> plan;
  if (spec.kinds.empty()) throw ConfigError("stream needs at least one corruption kind");
  for (CorruptionKind kind : spec.kinds) {
    switch (spec.setting) {
      case StreamSetting::continual:
        plan.push_back({to_string(kind), kMaxSeverity, plan.size()});
        break;
      case StreamSetting::gradual:
        for (int s : {1, 2, 3, 4, 5, 4, 3, 2, 1}) plan.push_back({to_string(kind), s, plan.size()});
        break;
      case StreamSetting::mixed:
        plan.push_back({"mixed", kMaxSeverity, plan.size()});
        break;
    }
  }
  return plan;
}

Stream::Stream(StreamSpec spec, std::shared_ptr<const ImageBatch> pool)
    : spec_(std::move(spec)), pool_(std::move(pool)), segments_(segment_plan(spec_)) {
  if (!pool_) throw ConfigError("stream needs a test pool");
  if (spec_.batch_size == 0 || spec_.batches_per_segment == 0) {
    throw ConfigError("batch_size and batches_per_segment must be positive");
  }
  const std::size_t need = spec_.batch_size * spec_.batches_per_segment;
  if (pool_->size() < need) {
    throw ConfigError("test pool exhausted: a segment needs " + std::to_string(need) +
                      " images, pool has " + std::to_string(pool_->size()));
  }
  const Rng root(spec_.seed);
  segment_indices_.reserve(segments_.size());
  for (std::size_t s = 0; s < segments_.size(); ++s) {
    Rng r = root.fork(2 * s);
    std::vector<std::size_t> perm = r.permutation(pool_->size());
    perm.resize(need);
    segment_indices_.push_back(std::move(perm));
  }
}

StreamBatch Stream::batch(std::size_t position) const {
  if (position >= num_batches()) throw std::out_of_range("stream position out of range");
  const std::size_t seg = position / spec_.batches_per_segment;
  const std::size_t k = position % spec_.batches_per_segment;
  const auto& idx = segment_indices_[seg];
  std::vector<std::size_t> pick(idx.begin() + k * spec_.batch_size,
                                idx.begin() + (k + 1) * spec_.batch_size);
  StreamBatch out;
  out.batch = gather(*pool_, pick);
  out.info = segments_[seg];
  out.position = position;
  Rng rng = Rng(spec_.seed).fork(2 * position + 1);
  auto& x = out.batch.images;
  if (spec_.setting == StreamSetting::mixed) {
    const std::size_t per = x.size() / x.dim(0);
    for (std::size_t n = 0; n < x.dim(0); ++n) {
      const CorruptionKind kind = spec_.kinds[rng.below(spec_.kinds.size())];
      corrupt_images(x.ptr() + n * per, 1, x.dim(1), x.dim(2), x.dim(3),
                     {kind, kMaxSeverity}, rng);
    }
  } else {
    x = corrupt(x, {parse_corruption(out.info.kind), out.info.severity}, rng);
  }
  return out;
}

}  // namespace dplot
