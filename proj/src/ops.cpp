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

#include "dplot/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <utility>
#include <sstream>

namespace dplot {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

// Column-major views: conv2d treats its row-major [rows][cols] buffers as
// tall-skinny column-major [cols x rows] matrices, which Eigen's GEMM
// kernels block far better when the channel count is small.
template <class T>
using ColMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using MapCol = Eigen::Map<ColMat<T>>;
template <class T>
using CMapCol = Eigen::Map<const ColMat<T>>;

template <class T>
MapMat<T> as_mat(Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return MapMat<T>(t.ptr(), static_cast<Eigen::Index>(rows),
                   static_cast<Eigen::Index>(cols));
}

template <class T>
CMapMat<T> as_mat(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return CMapMat<T>(t.ptr(), static_cast<Eigen::Index>(rows),
                    static_cast<Eigen::Index>(cols));
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

struct ConvGeometry {
  std::size_t n, c, h, w, f, k, ho, wo, stride, pad;
  std::size_t patch() const { return c * k * k; }
  std::size_t plane() const { return ho * wo; }
};

// Images are processed in chunks so the unfolded patch matrix stays
// cache-resident; a chunk spans roughly kConvChunkColumns output pixels.
constexpr std::size_t kConvChunkColumns = 512;

std::size_t conv_chunk(const ConvGeometry& g) {
  return std::max<std::size_t>(1, kConvChunkColumns / std::max<std::size_t>(g.plane(), 1));
}

// Output columns [lo, hi) whose input column ow*stride + kj - pad is in range.
std::pair<std::size_t, std::size_t> valid_cols(const ConvGeometry& g,
                                               std::size_t kj) {
  std::size_t lo = 0;
  while (lo < g.wo && lo * g.stride + kj < g.pad) ++lo;
  std::size_t hi = lo;
  while (hi < g.wo && hi * g.stride + kj < g.pad + g.w) ++hi;
  return {lo, hi};
}

// Unfolds images [n0, n0 + cnt) into
// cols[(c*k + ki)*k + kj][(i*ho + oh)*wo + ow], i = image offset in the chunk.
template <class T>
void im2col(const T* x, const ConvGeometry& g, std::size_t n0, std::size_t cnt,
            T* cols) {
  const std::size_t ncol = cnt * g.plane();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const auto [lo, hi] = valid_cols(g, kj);
        T* row = cols + ((c * g.k + ki) * g.k + kj) * ncol;
        for (std::size_t i = 0; i < cnt; ++i) {
          const T* plane = x + ((n0 + i) * g.c + c) * g.h * g.w;
          for (std::size_t oh = 0; oh < g.ho; ++oh) {
            const long ih = static_cast<long>(oh * g.stride + ki) -
                            static_cast<long>(g.pad);
            T* out = row + (i * g.ho + oh) * g.wo;
            if (ih < 0 || ih >= static_cast<long>(g.h)) {
              std::fill(out, out + g.wo, T(0));
              continue;
            }
            const T* src = plane + static_cast<std::size_t>(ih) * g.w;
            for (std::size_t ow = 0; ow < lo; ++ow) out[ow] = T(0);
            if (g.stride == 1) {
              const T* s = src + kj - g.pad;
              for (std::size_t ow = lo; ow < hi; ++ow) out[ow] = s[ow];
            } else {
              for (std::size_t ow = lo; ow < hi; ++ow)
                out[ow] = src[ow * g.stride + kj - g.pad];
            }
            for (std::size_t ow = hi; ow < g.wo; ++ow) out[ow] = T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* cols, const ConvGeometry& g, std::size_t n0,
            std::size_t cnt, T* dx) {
  const std::size_t ncol = cnt * g.plane();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const auto [lo, hi] = valid_cols(g, kj);
        const T* row = cols + ((c * g.k + ki) * g.k + kj) * ncol;
        for (std::size_t i = 0; i < cnt; ++i) {
          T* plane = dx + ((n0 + i) * g.c + c) * g.h * g.w;
          for (std::size_t oh = 0; oh < g.ho; ++oh) {
            const long ih = static_cast<long>(oh * g.stride + ki) -
                            static_cast<long>(g.pad);
            if (ih < 0 || ih >= static_cast<long>(g.h)) continue;
            const T* in = row + (i * g.ho + oh) * g.wo;
            T* dst = plane + static_cast<std::size_t>(ih) * g.w;
            if (g.stride == 1) {
              T* d = dst + kj - g.pad;
              for (std::size_t ow = lo; ow < hi; ++ow) d[ow] += in[ow];
            } else {
              for (std::size_t ow = lo; ow < hi; ++ow)
                dst[ow * g.stride + kj - g.pad] += in[ow];
            }
          }
        }
      }
    }
  }
}

// [F][i*plane + p] <-> [i][F][p] for one chunk.
template <class T>
void chunk_to_nchw(const T* src, const ConvGeometry& g, std::size_t n0,
                   std::size_t cnt, T* out) {
  const std::size_t plane = g.plane(), ncol = cnt * plane;
  for (std::size_t i = 0; i < cnt; ++i)
    for (std::size_t f = 0; f < g.f; ++f)
      std::copy_n(src + f * ncol + i * plane, plane,
                  out + ((n0 + i) * g.f + f) * plane);
}

template <class T>
void nchw_to_chunk(const T* in, const ConvGeometry& g, std::size_t n0,
                   std::size_t cnt, T* dst) {
  const std::size_t plane = g.plane(), ncol = cnt * plane;
  for (std::size_t i = 0; i < cnt; ++i)
    for (std::size_t f = 0; f < g.f; ++f)
      std::copy_n(in + ((n0 + i) * g.f + f) * plane, plane,
                  dst + f * ncol + i * plane);
}

}  // namespace

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  require(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0),
          "matmul: cannot multiply " + shape_str(av.shape()) + " by " +
              shape_str(bv.shape()));
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor<T> out({m, n});
  as_mat(out, m, n).noalias() = as_mat(av, m, k) * as_mat(bv, k, n);
  Tape<T>& tape = *a.tape;
  return tape.record("matmul", std::move(out), {a, b},
                     [a, b, m, k, n](Tape<T>& t, const Tensor<T>& g) {
                       const auto gm = as_mat(g, m, n);
                       if (t.requires_grad(a)) {
                         Tensor<T> da({m, k});
                         as_mat(da, m, k).noalias() =
                             gm * as_mat(b.value(), k, n).transpose();
                         t.accumulate(a.id, std::move(da));
                       }
                       if (t.requires_grad(b)) {
                         Tensor<T> db({k, n});
                         as_mat(db, k, n).noalias() =
                             as_mat(a.value(), m, k).transpose() * gm;
                         t.accumulate(b.id, std::move(db));
                       }
                     });
}

template <class T>
Var<T> linear(Var<T> x, Var<T> w, std::optional<Var<T>> bias) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  require(xv.rank() == 2 && wv.rank() == 2 && xv.dim(1) == wv.dim(1),
          "linear: input " + shape_str(xv.shape()) + " vs weight " +
              shape_str(wv.shape()));
  const std::size_t n = xv.dim(0), in = xv.dim(1), outf = wv.dim(0);
  if (bias) {
    require(bias->value().shape() == Shape{outf},
            "linear: bias shape " + shape_str(bias->shape()));
  }
  Tensor<T> out({n, outf});
  auto om = as_mat(out, n, outf);
  om.noalias() = as_mat(xv, n, in) * as_mat(wv, outf, in).transpose();
  if (bias) {
    const T* b = bias->value().ptr();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < outf; ++j) om(i, j) += b[j];
  }
  Tape<T>& tape = *x.tape;
  auto fn = [x, w, bias, n, in, outf](Tape<T>& t, const Tensor<T>& g) {
    const auto gm = as_mat(g, n, outf);
    if (t.requires_grad(x)) {
      Tensor<T> dx({n, in});
      as_mat(dx, n, in).noalias() = gm * as_mat(w.value(), outf, in);
      t.accumulate(x.id, std::move(dx));
    }
    if (t.requires_grad(w)) {
      Tensor<T> dw({outf, in});
      as_mat(dw, outf, in).noalias() = gm.transpose() * as_mat(x.value(), n, in);
      t.accumulate(w.id, std::move(dw));
    }
    if (bias && t.requires_grad(*bias)) {
      Tensor<T> db({outf});
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < outf; ++j) db[j] += gm(i, j);
      t.accumulate(bias->id, std::move(db));
    }
  };
  if (bias) return tape.record("linear", std::move(out), {x, w, *bias}, fn);
  return tape.record("linear", std::move(out), {x, w}, fn);
}

template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, Conv2dOptions opts) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  require(xv.rank() == 4 && wv.rank() == 4,
          "conv2d: expected 4-D input and weight, got " +
              shape_str(xv.shape()) + " and " + shape_str(wv.shape()));
  require(wv.dim(1) == xv.dim(1),
          "conv2d: weight channels " + shape_str(wv.shape()) +
              " do not match input " + shape_str(xv.shape()));
  require(wv.dim(2) == wv.dim(3) && wv.dim(2) % 2 == 1,
          "conv2d: kernel must be square with odd size");
  require(opts.stride >= 1, "conv2d: stride must be >= 1");
  ConvGeometry g{};
  g.n = xv.dim(0);
  g.c = xv.dim(1);
  g.h = xv.dim(2);
  g.w = xv.dim(3);
  g.f = wv.dim(0);
  g.k = wv.dim(2);
  g.stride = opts.stride;
  g.pad = opts.padding;
  require(g.h + 2 * g.pad >= g.k && g.w + 2 * g.pad >= g.k,
          "conv2d: padding leaves no valid output position");
  g.ho = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.k) / g.stride + 1;

  const std::size_t patch = g.patch(), plane = g.plane(), chunk = conv_chunk(g);
  auto out = Tensor<T>::uninitialized({g.n, g.f, g.ho, g.wo});
  std::vector<T> cols(patch * chunk * plane);
  std::vector<T> ymat(chunk == 1 ? 0 : g.f * chunk * plane);
  const auto ix = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  const CMapCol<T> wm(wv.ptr(), ix(patch), ix(g.f));
  for (std::size_t n0 = 0; n0 < g.n; n0 += chunk) {
    const std::size_t cnt = std::min(chunk, g.n - n0), ncol = cnt * plane;
    im2col(xv.ptr(), g, n0, cnt, cols.data());
    const CMapCol<T> cm(cols.data(), ix(ncol), ix(patch));
    T* dst = cnt == 1 ? out.ptr() + n0 * g.f * plane : ymat.data();
    MapCol<T> ym(dst, ix(ncol), ix(g.f));
    ym.noalias() = cm * wm;
    if (cnt != 1) chunk_to_nchw(ymat.data(), g, n0, cnt, out.ptr());
  }

  Tape<T>& tape = *x.tape;
  return tape.record(
      "conv2d", std::move(out), {x, w},
      [x, w, g](Tape<T>& t, const Tensor<T>& grad) {
        const std::size_t patch = g.patch(), plane = g.plane(),
                          chunk = conv_chunk(g);
        const bool need_w = t.requires_grad(w), need_x = t.requires_grad(x);
        const auto ix = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
        Tensor<T> dw(w.value().shape());
        Tensor<T> dx(need_x ? x.value().shape() : Shape{0});
        MapCol<T> dwm(dw.ptr(), ix(patch), ix(g.f));
        const CMapCol<T> wm(w.value().ptr(), ix(patch), ix(g.f));
        std::vector<T> cols(patch * chunk * plane);
        std::vector<T> gbuf(chunk == 1 ? 0 : g.f * chunk * plane);
        for (std::size_t n0 = 0; n0 < g.n; n0 += chunk) {
          const std::size_t cnt = std::min(chunk, g.n - n0), ncol = cnt * plane;
          const T* gp = grad.ptr() + n0 * g.f * plane;
          if (cnt != 1) {
            nchw_to_chunk(grad.ptr(), g, n0, cnt, gbuf.data());
            gp = gbuf.data();
          }
          const CMapCol<T> gm(gp, ix(ncol), ix(g.f));
          MapCol<T> cm(cols.data(), ix(ncol), ix(patch));
          if (need_w) {
            im2col(x.value().ptr(), g, n0, cnt, cols.data());
            dwm.noalias() += cm.transpose() * gm;
          }
          if (need_x) {
            cm.noalias() = gm * wm.transpose();
            col2im(cols.data(), g, n0, cnt, dx.ptr());
          }
        }
        if (need_w) t.accumulate(w.id, std::move(dw));
        if (need_x) t.accumulate(x.id, std::move(dx));
      });
}

template <class T>
Var<T> batchnorm(Var<T> x, Var<T> gamma, Var<T> beta, RunningStats<T>& running,
                 const BatchNormOptions& opts) {
  const auto& xv = x.value();
  require(xv.rank() >= 2, "batchnorm: input must be at least 2-D");
  const std::size_t n = xv.dim(0), c = xv.dim(1);
  const std::size_t inner = xv.size() / std::max<std::size_t>(n * c, 1);
  require(gamma.value().shape() == Shape{c} && beta.value().shape() == Shape{c},
          "batchnorm: affine parameters must have shape [" +
              std::to_string(c) + "]");
  require(running.mean.shape() == Shape{c} && running.var.shape() == Shape{c},
          "batchnorm: running statistics must have shape [" +
              std::to_string(c) + "]");
  const bool batch = opts.mode == BnMode::batch_stats;
  if (batch && n < 2) {
    throw ShapeError("batchnorm: batch-stats mode needs at least 2 samples, got " +
                     std::to_string(n));
  }
  const double count = static_cast<double>(n * inner);
  std::vector<T> mu(c), invstd(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double m, v;
    if (batch) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = xv.ptr() + (i * c + ch) * inner;
        for (std::size_t j = 0; j < inner; ++j) s += p[j];
      }
      m = s / count;
      double ss = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = xv.ptr() + (i * c + ch) * inner;
        for (std::size_t j = 0; j < inner; ++j) {
          const double d = p[j] - m;
          ss += d * d;
        }
      }
      v = ss / count;
      if (opts.update_running) {
        const double mo = opts.momentum;
        running.mean[ch] = static_cast<T>((1.0 - mo) * running.mean[ch] + mo * m);
        running.var[ch] = static_cast<T>((1.0 - mo) * running.var[ch] + mo * v);
      }
    } else {
      m = running.mean[ch];
      v = running.var[ch];
    }
    mu[ch] = static_cast<T>(m);
    invstd[ch] = static_cast<T>(1.0 / std::sqrt(v + opts.eps));
  }

  auto xhat = Tensor<T>::uninitialized(xv.shape());
  auto out = Tensor<T>::uninitialized(xv.shape());
  const T* gm = gamma.value().ptr();
  const T* bt = beta.value().ptr();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (i * c + ch) * inner;
      for (std::size_t j = 0; j < inner; ++j) {
        const T h = (xv[off + j] - mu[ch]) * invstd[ch];
        xhat[off + j] = h;
        out[off + j] = gm[ch] * h + bt[ch];
      }
    }
  }
  Tape<T>& tape = *x.tape;
  return tape.record(
      "batchnorm", std::move(out), {x, gamma, beta},
      [x, gamma, beta, batch, n, c, inner, invstd = std::move(invstd),
       xhat = std::move(xhat)](Tape<T>& t, const Tensor<T>& g) {
        std::vector<double> dgamma(c, 0.0), dbeta(c, 0.0);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t off = (i * c + ch) * inner;
            for (std::size_t j = 0; j < inner; ++j) {
              dgamma[ch] += static_cast<double>(g[off + j]) * xhat[off + j];
              dbeta[ch] += g[off + j];
            }
          }
        if (t.requires_grad(gamma)) {
          Tensor<T> dg({c});
          for (std::size_t ch = 0; ch < c; ++ch) dg[ch] = static_cast<T>(dgamma[ch]);
          t.accumulate(gamma.id, std::move(dg));
        }
        if (t.requires_grad(beta)) {
          Tensor<T> db({c});
          for (std::size_t ch = 0; ch < c; ++ch) db[ch] = static_cast<T>(dbeta[ch]);
          t.accumulate(beta.id, std::move(db));
        }
        if (!t.requires_grad(x)) return;
        const T* gm = gamma.value().ptr();
        auto dx = Tensor<T>::uninitialized(x.value().shape());
        const double count = static_cast<double>(n * inner);
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double k = static_cast<double>(gm[ch]) * invstd[ch];
          const double mean_dy = dbeta[ch] / count;
          const double mean_dy_xhat = dgamma[ch] / count;
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t off = (i * c + ch) * inner;
            for (std::size_t j = 0; j < inner; ++j) {
              dx[off + j] = batch ? static_cast<T>(k * (g[off + j] - mean_dy -
                                                        xhat[off + j] * mean_dy_xhat))
                                  : static_cast<T>(k * g[off + j]);
            }
          }
        }
        t.accumulate(x.id, std::move(dx));
      });
}

template <class T>
Var<T> channel_bias(Var<T> x, Var<T> bias) {
  const auto& xv = x.value();
  require(xv.rank() >= 2 && bias.shape() == Shape{xv.dim(1)},
          "channel_bias: input " + shape_str(xv.shape()) + " vs bias " +
              shape_str(bias.shape()));
  const std::size_t n = xv.dim(0), c = xv.dim(1), inner = xv.size() / (n * c);
  Tensor<T> out = xv;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      T* p = out.ptr() + (i * c + ch) * inner;
      for (std::size_t j = 0; j < inner; ++j) p[j] += bias.value()[ch];
    }
  return x.tape->record("channel_bias", std::move(out), {x, bias},
                        [x, bias, n, c, inner](Tape<T>& t, const Tensor<T>& g) {
                          if (t.requires_grad(x)) t.accumulate(x.id, g);
                          if (t.requires_grad(bias)) {
                            Tensor<T> db({c});
                            for (std::size_t i = 0; i < n; ++i)
                              for (std::size_t ch = 0; ch < c; ++ch) {
                                double s = 0.0;
                                const T* p = g.ptr() + (i * c + ch) * inner;
                                for (std::size_t j = 0; j < inner; ++j) s += p[j];
                                db[ch] += static_cast<T>(s);
                              }
                            t.accumulate(bias.id, std::move(db));
                          }
                        });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  require(a.shape() == b.shape(), "add: shape " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape->record("add", std::move(out), {a, b},
                        [a, b](Tape<T>& t, const Tensor<T>& g) {
                          if (t.requires_grad(a)) t.accumulate(a.id, g);
                          if (t.requires_grad(b)) t.accumulate(b.id, g);
                        });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  require(a.shape() == b.shape(), "mul: shape " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape->record("mul", std::move(out), {a, b},
                        [a, b](Tape<T>& t, const Tensor<T>& g) {
                          if (t.requires_grad(a)) {
                            Tensor<T> da = g;
                            for (std::size_t i = 0; i < da.size(); ++i)
                              da[i] *= b.value()[i];
                            t.accumulate(a.id, std::move(da));
                          }
                          if (t.requires_grad(b)) {
                            Tensor<T> db = g;
                            for (std::size_t i = 0; i < db.size(); ++i)
                              db[i] *= a.value()[i];
                            t.accumulate(b.id, std::move(db));
                          }
                        });
}

template <class T>
Var<T> scale(Var<T> a, double s) {
  Tensor<T> out = a.value();
  const T k = static_cast<T>(s);
  for (auto& v : out.data()) v *= k;
  return a.tape->record("scale", std::move(out), {a},
                        [a, k](Tape<T>& t, const Tensor<T>& g) {
                          Tensor<T> da = g;
                          for (auto& v : da.data()) v *= k;
                          t.accumulate(a.id, std::move(da));
                        });
}

template <class T>
Var<T> relu(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = v > T(0) ? v : T(0);
  return x.tape->record("relu", std::move(out), {x},
                        [x](Tape<T>& t, const Tensor<T>& g) {
                          Tensor<T> dx = g;
                          const auto xv = x.value().data();
                          for (std::size_t i = 0; i < dx.size(); ++i)
                            if (!(xv[i] > T(0))) dx[i] = T(0);
                          t.accumulate(x.id, std::move(dx));
                        });
}

template <class T>
Var<T> global_avg_pool(Var<T> x) {
  const auto& xv = x.value();
  require(xv.rank() == 4, "global_avg_pool: expected 4-D input, got " +
                              shape_str(xv.shape()));
  const std::size_t n = xv.dim(0), c = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  Tensor<T> out({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    const T* p = xv.ptr() + i * plane;
    for (std::size_t j = 0; j < plane; ++j) s += p[j];
    out[i] = static_cast<T>(s / static_cast<double>(plane));
  }
  return x.tape->record("global_avg_pool", std::move(out), {x},
                        [x, n, c, plane](Tape<T>& t, const Tensor<T>& g) {
                          Tensor<T> dx(x.value().shape());
                          const T inv = T(1) / static_cast<T>(plane);
                          for (std::size_t i = 0; i < n * c; ++i) {
                            const T v = g[i] * inv;
                            std::fill_n(dx.ptr() + i * plane, plane, v);
                          }
                          t.accumulate(x.id, std::move(dx));
                        });
}

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  require(logits.rank() == 2, "softmax: expected 2-D input, got " +
                                  shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  Tensor<T> out(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits.ptr() + i * c;
    T* o = out.ptr() + i * c;
    const T mx = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      o[j] = std::exp(row[j] - mx);
      s += o[j];
    }
    const T inv = static_cast<T>(1.0 / s);
    for (std::size_t j = 0; j < c; ++j) o[j] *= inv;
  }
  return out;
}

template <class T>
Var<T> softmax(Var<T> x) {
  Tensor<T> out = softmax_rows(x.value());
  const std::size_t n = out.dim(0), c = out.dim(1);
  Tape<T>& tape = *x.tape;
  // The backward closure reads the output through the tape node it creates.
  auto node = std::make_shared<std::size_t>(0);
  Var<T> y = tape.record("softmax", std::move(out), {x},
                         [x, node, n, c](Tape<T>& t, const Tensor<T>& g) {
                           const Tensor<T>& yv = t.value(*node);
                           Tensor<T> dx(yv.shape());
                           for (std::size_t i = 0; i < n; ++i) {
                             double dot = 0.0;
                             for (std::size_t j = 0; j < c; ++j)
                               dot += static_cast<double>(g[i * c + j]) * yv[i * c + j];
                             for (std::size_t j = 0; j < c; ++j)
                               dx[i * c + j] = static_cast<T>(
                                   yv[i * c + j] * (g[i * c + j] - dot));
                           }
                           t.accumulate(x.id, std::move(dx));
                         });
  *node = y.id;
  return y;
}

template <class T>
Var<T> log_clamped(Var<T> x) {
  Tensor<T> out = x.value();
  const T eps = static_cast<T>(kLogClampEps);
  for (auto& v : out.data()) v = std::log(std::max(v, eps));
  return x.tape->record("log_clamped", std::move(out), {x},
                        [x, eps](Tape<T>& t, const Tensor<T>& g) {
                          Tensor<T> dx = g;
                          const auto xv = x.value().data();
                          for (std::size_t i = 0; i < dx.size(); ++i)
                            dx[i] = xv[i] > eps ? dx[i] / xv[i] : T(0);
                          t.accumulate(x.id, std::move(dx));
                        });
}

template <class T>
Var<T> sum(Var<T> x) {
  double s = 0.0;
  for (T v : x.value().data()) s += v;
  return x.tape->record("sum", Tensor<T>::scalar(static_cast<T>(s)), {x},
                        [x](Tape<T>& t, const Tensor<T>& g) {
                          t.accumulate(x.id, Tensor<T>(x.shape(), g.item()));
                        });
}

template <class T>
Var<T> mean(Var<T> x) {
  const std::size_t n = x.value().size();
  require(n > 0, "mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

template <class T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() >= 1 && a.rank() == b.rank() &&
              std::equal(a.shape().begin() + 1, a.shape().end(),
                         b.shape().begin() + 1),
          "concat_rows: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Shape s = a.shape();
  s[0] += b.dim(0);
  auto out = Tensor<T>::uninitialized(std::move(s));
  std::copy(a.data().begin(), a.data().end(), out.ptr());
  std::copy(b.data().begin(), b.data().end(), out.ptr() + a.size());
  return out;
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  require(x.rank() >= 1 && begin <= end && end <= x.dim(0),
          "slice_rows: range [" + std::to_string(begin) + ", " +
              std::to_string(end) + ") out of " + shape_str(x.shape()));
  const std::size_t row = x.size() / std::max<std::size_t>(x.dim(0), 1);
  Shape s = x.shape();
  s[0] = end - begin;
  auto out = Tensor<T>::uninitialized(std::move(s));
  std::copy(x.ptr() + begin * row, x.ptr() + end * row, out.ptr());
  return out;
}

template <class T>
Var<T> concat_rows(Var<T> a, Var<T> b) {
  const std::size_t na = a.value().dim(0);
  Tensor<T> out = concat_rows(a.value(), b.value());
  return a.tape->record("concat_rows", std::move(out), {a, b},
                        [a, b, na](Tape<T>& t, const Tensor<T>& g) {
                          if (t.requires_grad(a))
                            t.accumulate(a.id, slice_rows(g, 0, na));
                          if (t.requires_grad(b))
                            t.accumulate(b.id, slice_rows(g, na, g.dim(0)));
                        });
}

template <class T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t end) {
  Tensor<T> out = slice_rows(x.value(), begin, end);
  return x.tape->record("slice_rows", std::move(out), {x},
                        [x, begin](Tape<T>& t, const Tensor<T>& g) {
                          Tensor<T> dx(x.shape());
                          std::copy(g.data().begin(), g.data().end(),
                                    dx.ptr() + begin * (g.size() / std::max<std::size_t>(g.dim(0), 1)));
                          t.accumulate(x.id, std::move(dx));
                        });
}

template <class T>
std::vector<int> argmax_rows(const Tensor<T>& x) {
  require(x.rank() == 2, "argmax_rows: expected 2-D input");
  const std::size_t n = x.dim(0), c = x.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = x.ptr() + i * c;
    out[i] = static_cast<int>(std::max_element(row, row + c) - row);
  }
  return out;
}

#define DPLOT_INSTANTIATE_OPS(T)                                               \
  template Var<T> matmul(Var<T>, Var<T>);                                      \
  template Var<T> linear(Var<T>, Var<T>, std::optional<Var<T>>);               \
  template Var<T> conv2d(Var<T>, Var<T>, Conv2dOptions);                       \
  template Var<T> batchnorm(Var<T>, Var<T>, Var<T>, RunningStats<T>&,          \
                            const BatchNormOptions&);                          \
  template Var<T> channel_bias(Var<T>, Var<T>);                                \
  template Var<T> add(Var<T>, Var<T>);                                         \
  template Var<T> mul(Var<T>, Var<T>);                                         \
  template Var<T> scale(Var<T>, double);                                       \
  template Var<T> relu(Var<T>);                                                \
  template Var<T> global_avg_pool(Var<T>);                                     \
  template Var<T> softmax(Var<T>);                                             \
  template Var<T> log_clamped(Var<T>);                                         \
  template Var<T> sum(Var<T>);                                                 \
  template Var<T> mean(Var<T>);                                                \
  template Var<T> concat_rows(Var<T>, Var<T>);                                 \
  template Var<T> slice_rows(Var<T>, std::size_t, std::size_t);                \
  template Tensor<T> softmax_rows(const Tensor<T>&);                           \
  template Tensor<T> concat_rows(const Tensor<T>&, const Tensor<T>&);          \
  template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t);   \
  template std::vector<int> argmax_rows(const Tensor<T>&);

DPLOT_INSTANTIATE_OPS(float)
DPLOT_INSTANTIATE_OPS(double)

}  // namespace dplot
