#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "advcomm/diffcore/tape.hpp"
#include "advcomm/diffcore/tensor.hpp"

// Differentiable primitives. Every op validates shapes eagerly and throws
// ShapeError naming the op and the offending dimensions.
namespace advcomm::diffcore {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

[[noreturn]] inline void shape_fail(const char* op, const std::string& what) {
  throw ShapeError(std::string(op) + ": " + what);
}

inline void require_rank(const char* op, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    shape_fail(op, "expected rank " + std::to_string(rank) + ", got " + shape_str(s));
  }
}

inline void require_same(const char* op, const Shape& a, const Shape& b) {
  if (a != b) shape_fail(op, "shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <typename T>
void add_into(Tensor<T>* sink, const Tensor<T>& g) {
  if (!sink) return;
  auto d = sink->data();
  auto s = g.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

template <typename T, typename F>
Var<T> unary(const char* op, Var<T> x, F&& fwd_and_deriv) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  Tensor<T> deriv(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    auto [y, dy] = fwd_and_deriv(xv[i]);
    out[i] = y;
    deriv[i] = dy;
  }
  return x.tape->record(op, std::move(out), {x},
                        [x, deriv = std::move(deriv)](Tape<T>& tape, const Tensor<T>& g) {
                          if (auto* s = tape.grad_sink(x)) {
                            for (std::size_t i = 0; i < g.size(); ++i) (*s)[i] += g[i] * deriv[i];
                          }
                        });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// linear algebra

/// [M,K] x [K,N] -> [M,N]
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  using namespace detail;
  const auto& av = a.value();
  const auto& bv = b.value();
  require_rank("matmul", av.shape(), 2);
  require_rank("matmul", bv.shape(), 2);
  if (av.dim(1) != bv.dim(0)) {
    shape_fail("matmul", "inner dims differ " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  const auto m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor<T> out({m, n});
  MapMat<T>(out.raw(), m, n).noalias() = CMapMat<T>(av.raw(), m, k) * CMapMat<T>(bv.raw(), k, n);
  return a.tape->record("matmul", std::move(out), {a, b},
                        [a, b, m, k, n](Tape<T>& tape, const Tensor<T>& g) {
                          CMapMat<T> G(g.raw(), m, n);
                          if (auto* s = tape.grad_sink(a)) {
                            MapMat<T>(s->raw(), m, k).noalias() +=
                                G * CMapMat<T>(tape.value(b).raw(), k, n).transpose();
                          }
                          if (auto* s = tape.grad_sink(b)) {
                            MapMat<T>(s->raw(), k, n).noalias() +=
                                CMapMat<T>(tape.value(a).raw(), m, k).transpose() * G;
                          }
                        });
}

/// x [B,in], w [in,out], b [out] -> [B,out]
template <typename T>
Var<T> dense(Var<T> x, Var<T> w, Var<T> b) {
  using namespace detail;
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = b.value();
  require_rank("dense", xv.shape(), 2);
  require_rank("dense", wv.shape(), 2);
  require_rank("dense", bv.shape(), 1);
  if (xv.dim(1) != wv.dim(0) || bv.dim(0) != wv.dim(1)) {
    shape_fail("dense", "input " + shape_str(xv.shape()) + ", weight " + shape_str(wv.shape()) +
                            ", bias " + shape_str(bv.shape()));
  }
  const auto batch = xv.dim(0), in = wv.dim(0), outd = wv.dim(1);
  Tensor<T> out({batch, outd});
  MapMat<T> O(out.raw(), batch, outd);
  O.noalias() = CMapMat<T>(xv.raw(), batch, in) * CMapMat<T>(wv.raw(), in, outd);
  O.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bv.raw(), outd);
  return x.tape->record(
      "dense", std::move(out), {x, w, b}, [x, w, b, batch, in, outd](Tape<T>& tape, const Tensor<T>& g) {
        CMapMat<T> G(g.raw(), batch, outd);
        if (auto* s = tape.grad_sink(x)) {
          MapMat<T>(s->raw(), batch, in).noalias() +=
              G * CMapMat<T>(tape.value(w).raw(), in, outd).transpose();
        }
        if (auto* s = tape.grad_sink(w)) {
          MapMat<T>(s->raw(), in, outd).noalias() +=
              CMapMat<T>(tape.value(x).raw(), batch, in).transpose() * G;
        }
        if (auto* s = tape.grad_sink(b)) {
          Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(s->raw(), outd) += G.colwise().sum();
        }
      });
}

/// Per-sample left multiplication by a constant: out[b] = A[b] x[b].
/// A [B,N,N] (no gradient), x [B,N,F] -> [B,N,F]. Used for graph shifts.
template <typename T>
Var<T> batched_left_matmul(const Tensor<T>& a, Var<T> x) {
  using namespace detail;
  const auto& xv = x.value();
  require_rank("batched_left_matmul", a.shape(), 3);
  require_rank("batched_left_matmul", xv.shape(), 3);
  if (a.dim(0) != xv.dim(0) || a.dim(2) != xv.dim(1)) {
    shape_fail("batched_left_matmul", "operator " + shape_str(a.shape()) + " vs signal " + shape_str(xv.shape()));
  }
  const auto batch = xv.dim(0), n_out = a.dim(1), n_in = a.dim(2), f = xv.dim(2);
  Tensor<T> out({batch, n_out, f});
  for (std::size_t b = 0; b < batch; ++b) {
    MapMat<T>(out.raw() + b * n_out * f, n_out, f).noalias() =
        CMapMat<T>(a.raw() + b * n_out * n_in, n_out, n_in) * CMapMat<T>(xv.raw() + b * n_in * f, n_in, f);
  }
  return x.tape->record("batched_left_matmul", std::move(out), {x},
                        [a, x, batch, n_out, n_in, f](Tape<T>& tape, const Tensor<T>& g) {
                          auto* s = tape.grad_sink(x);
                          if (!s) return;
                          for (std::size_t b = 0; b < batch; ++b) {
                            MapMat<T>(s->raw() + b * n_in * f, n_in, f).noalias() +=
                                CMapMat<T>(a.raw() + b * n_out * n_in, n_out, n_in).transpose() *
                                CMapMat<T>(g.raw() + b * n_out * f, n_out, f);
                          }
                        });
}

// ---------------------------------------------------------------------------
// convolution and resampling, NCHW layout

namespace detail {

struct ConvGeom {
  std::size_t batch, cin, h, w, cout, kh, kw, pad, ho, wo;
  std::size_t patch() const { return cin * kh * kw; }
  std::size_t pixels() const { return ho * wo; }
};

// columns laid out [patch, n_samples * pixels] for samples [b0, b0+nb)
// valid output columns [lo, hi) for kernel column kj: 0 <= oj + kj - pad < w
inline void valid_cols(const ConvGeom& g, std::size_t kj, std::size_t& lo, std::size_t& hi) {
  lo = kj < g.pad ? std::min(g.pad - kj, g.wo) : 0;
  hi = g.w + g.pad > kj ? std::min(g.w + g.pad - kj, g.wo) : 0;
  if (hi < lo) hi = lo;
}

// columns laid out [patch, n_samples * pixels] for samples [b0, b0+nb)
template <typename T>
void im2col(const ConvGeom& g, const T* x, std::size_t b0, std::size_t nb, T* col) {
  const std::size_t cols = nb * g.pixels();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        std::size_t lo, hi;
        valid_cols(g, kj, lo, hi);
        T* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t b = 0; b < nb; ++b) {
          const T* plane = x + ((b0 + b) * g.cin + c) * g.h * g.w;
          T* dst = row + b * g.pixels();
          for (std::size_t oi = 0; oi < g.ho; ++oi) {
            T* d = dst + oi * g.wo;
            const long ii = static_cast<long>(oi + ki) - static_cast<long>(g.pad);
            if (ii < 0 || ii >= static_cast<long>(g.h)) {
              std::fill(d, d + g.wo, T{0});
              continue;
            }
            std::fill(d, d + lo, T{0});
            const T* s = plane + ii * static_cast<long>(g.w) + static_cast<long>(lo + kj) - static_cast<long>(g.pad);
            std::copy(s, s + (hi - lo), d + lo);
            std::fill(d + hi, d + g.wo, T{0});
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const ConvGeom& g, const T* col, std::size_t b0, std::size_t nb, T* dx) {
  const std::size_t cols = nb * g.pixels();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        std::size_t lo, hi;
        valid_cols(g, kj, lo, hi);
        const T* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t b = 0; b < nb; ++b) {
          T* plane = dx + ((b0 + b) * g.cin + c) * g.h * g.w;
          const T* src = row + b * g.pixels();
          for (std::size_t oi = 0; oi < g.ho; ++oi) {
            const long ii = static_cast<long>(oi + ki) - static_cast<long>(g.pad);
            if (ii < 0 || ii >= static_cast<long>(g.h)) continue;
            T* d = plane + ii * static_cast<long>(g.w) + static_cast<long>(lo + kj) - static_cast<long>(g.pad);
            const T* s = src + oi * g.wo;
            for (std::size_t oj = lo; oj < hi; ++oj) *d++ += s[oj];
          }
        }
      }
    }
  }
}

inline constexpr std::size_t kConvChunk = 128;

}  // namespace detail

/// Stride-1 2-D convolution with symmetric zero padding.
/// x [B,C,H,W], w [O,C,kh,kw], b [O] -> [B,O,H+2p-kh+1,W+2p-kw+1]
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, std::size_t pad) {
  using namespace detail;
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = b.value();
  require_rank("conv2d", xv.shape(), 4);
  require_rank("conv2d", wv.shape(), 4);
  require_rank("conv2d", bv.shape(), 1);
  if (xv.dim(1) != wv.dim(1) || bv.dim(0) != wv.dim(0)) {
    shape_fail("conv2d", "input " + shape_str(xv.shape()) + ", kernel " + shape_str(wv.shape()) +
                             ", bias " + shape_str(bv.shape()));
  }
  if (xv.dim(2) + 2 * pad < wv.dim(2) || xv.dim(3) + 2 * pad < wv.dim(3)) {
    shape_fail("conv2d", "kernel " + shape_str(wv.shape()) + " larger than padded input " + shape_str(xv.shape()));
  }
  ConvGeom g{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(0), wv.dim(2), wv.dim(3), pad, 0, 0};
  g.ho = g.h + 2 * pad - g.kh + 1;
  g.wo = g.w + 2 * pad - g.kw + 1;

  Tensor<T> out({g.batch, g.cout, g.ho, g.wo});
  std::vector<T> col;
  RowMat<T> res;
  CMapMat<T> W(wv.raw(), g.cout, g.patch());
  for (std::size_t b0 = 0; b0 < g.batch; b0 += kConvChunk) {
    const std::size_t nb = std::min(kConvChunk, g.batch - b0);
    col.resize(g.patch() * nb * g.pixels());
    im2col(g, xv.raw(), b0, nb, col.data());
    res.noalias() = W * CMapMat<T>(col.data(), g.patch(), nb * g.pixels());
    for (std::size_t bb = 0; bb < nb; ++bb) {
      for (std::size_t o = 0; o < g.cout; ++o) {
        T* dst = out.raw() + ((b0 + bb) * g.cout + o) * g.pixels();
        const T* src = res.data() + o * nb * g.pixels() + bb * g.pixels();
        for (std::size_t p = 0; p < g.pixels(); ++p) dst[p] = src[p] + bv[o];
      }
    }
  }
  return x.tape->record("conv2d", std::move(out), {x, w, b}, [x, w, b, g](Tape<T>& tape, const Tensor<T>& grad) {
    auto* sx = tape.grad_sink(x);
    auto* sw = tape.grad_sink(w);
    auto* sb = tape.grad_sink(b);
    const auto& xv = tape.value(x);
    CMapMat<T> W(tape.value(w).raw(), g.cout, g.patch());
    std::vector<T> col, gcol;
    RowMat<T> gout;
    for (std::size_t b0 = 0; b0 < g.batch; b0 += kConvChunk) {
      const std::size_t nb = std::min(kConvChunk, g.batch - b0);
      const std::size_t cols = nb * g.pixels();
      gout.resize(g.cout, cols);
      for (std::size_t bb = 0; bb < nb; ++bb) {
        for (std::size_t o = 0; o < g.cout; ++o) {
          const T* src = grad.raw() + ((b0 + bb) * g.cout + o) * g.pixels();
          std::copy(src, src + g.pixels(), gout.data() + o * cols + bb * g.pixels());
        }
      }
      if (sb) {
        for (std::size_t o = 0; o < g.cout; ++o) (*sb)[o] += gout.row(o).sum();
      }
      if (sw) {
        col.resize(g.patch() * cols);
        im2col(g, xv.raw(), b0, nb, col.data());
        MapMat<T>(sw->raw(), g.cout, g.patch()).noalias() +=
            gout * CMapMat<T>(col.data(), g.patch(), cols).transpose();
      }
      if (sx) {
        gcol.resize(g.patch() * cols);
        MapMat<T>(gcol.data(), g.patch(), cols).noalias() = W.transpose() * gout;
        col2im_add(g, gcol.data(), b0, nb, sx->raw());
      }
    }
  });
}

/// 2x2 average pooling, stride 2, trailing odd row/column dropped.
template <typename T>
Var<T> avgpool2x(Var<T> x) {
  using namespace detail;
  const auto& xv = x.value();
  require_rank("avgpool2x", xv.shape(), 4);
  const auto nb = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (h < 2 || w < 2) shape_fail("avgpool2x", "spatial dims too small in " + shape_str(xv.shape()));
  const auto ho = h / 2, wo = w / 2;
  Tensor<T> out({nb, c, ho, wo});
  for (std::size_t p = 0; p < nb * c; ++p) {
    const T* src = xv.raw() + p * h * w;
    T* dst = out.raw() + p * ho * wo;
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j)
        dst[i * wo + j] = (src[2 * i * w + 2 * j] + src[2 * i * w + 2 * j + 1] + src[(2 * i + 1) * w + 2 * j] +
                           src[(2 * i + 1) * w + 2 * j + 1]) *
                          T{0.25};
  }
  return x.tape->record("avgpool2x", std::move(out), {x}, [x, nb, c, h, w, ho, wo](Tape<T>& tape, const Tensor<T>& g) {
    auto* s = tape.grad_sink(x);
    if (!s) return;
    for (std::size_t p = 0; p < nb * c; ++p) {
      T* dst = s->raw() + p * h * w;
      const T* src = g.raw() + p * ho * wo;
      for (std::size_t i = 0; i < ho; ++i)
        for (std::size_t j = 0; j < wo; ++j) {
          const T v = src[i * wo + j] * T{0.25};
          dst[2 * i * w + 2 * j] += v;
          dst[2 * i * w + 2 * j + 1] += v;
          dst[(2 * i + 1) * w + 2 * j] += v;
          dst[(2 * i + 1) * w + 2 * j + 1] += v;
        }
    }
  });
}

/// Nearest-neighbour 2x upsampling. [B,C,H,W] -> [B,C,2H,2W]
template <typename T>
Var<T> upsample2x(Var<T> x) {
  using namespace detail;
  const auto& xv = x.value();
  require_rank("upsample2x", xv.shape(), 4);
  const auto nb = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const auto ho = 2 * h, wo = 2 * w;
  Tensor<T> out({nb, c, ho, wo});
  for (std::size_t p = 0; p < nb * c; ++p) {
    const T* src = xv.raw() + p * h * w;
    T* dst = out.raw() + p * ho * wo;
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j) dst[i * wo + j] = src[(i / 2) * w + j / 2];
  }
  return x.tape->record("upsample2x", std::move(out), {x}, [x, nb, c, h, w, ho, wo](Tape<T>& tape, const Tensor<T>& g) {
    auto* s = tape.grad_sink(x);
    if (!s) return;
    for (std::size_t p = 0; p < nb * c; ++p) {
      T* dst = s->raw() + p * h * w;
      const T* src = g.raw() + p * ho * wo;
      for (std::size_t i = 0; i < ho; ++i)
        for (std::size_t j = 0; j < wo; ++j) dst[(i / 2) * w + j / 2] += src[i * wo + j];
    }
  });
}

/// Zero padding of the two spatial axes; negative amounts crop.
template <typename T>
Var<T> pad2d(Var<T> x, long top, long bottom, long left, long right) {
  using namespace detail;
  const auto& xv = x.value();
  require_rank("pad2d", xv.shape(), 4);
  const auto nb = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const long ho = static_cast<long>(h) + top + bottom;
  const long wo = static_cast<long>(w) + left + right;
  if (ho <= 0 || wo <= 0) shape_fail("pad2d", "cropping removes all of " + shape_str(xv.shape()));
  Tensor<T> out({nb, c, static_cast<std::size_t>(ho), static_cast<std::size_t>(wo)});
  auto map = [=](long i, long j) -> long {
    const long si = i - top, sj = j - left;
    if (si < 0 || sj < 0 || si >= static_cast<long>(h) || sj >= static_cast<long>(w)) return -1;
    return si * static_cast<long>(w) + sj;
  };
  for (std::size_t p = 0; p < nb * c; ++p)
    for (long i = 0; i < ho; ++i)
      for (long j = 0; j < wo; ++j)
        if (long k = map(i, j); k >= 0) out[p * ho * wo + i * wo + j] = xv[p * h * w + k];
  return x.tape->record("pad2d", std::move(out), {x}, [x, nb, c, h, w, ho, wo, map](Tape<T>& tape, const Tensor<T>& g) {
    auto* s = tape.grad_sink(x);
    if (!s) return;
    for (std::size_t p = 0; p < nb * c; ++p)
      for (long i = 0; i < ho; ++i)
        for (long j = 0; j < wo; ++j)
          if (long k = map(i, j); k >= 0) (*s)[p * h * w + k] += g[p * ho * wo + i * wo + j];
  });
}

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
Var<T> leaky_relu(Var<T> x, T slope = T{0.01}) {
  auto* tape = x.tape;
  return detail::unary("leaky_relu", x, [slope, tape](T v) {
    if (tape->tracking_branches()) tape->note_branch(v > T{0});
    return v > T{0} ? std::pair<T, T>{v, T{1}} : std::pair<T, T>{slope * v, slope};
  });
}

template <typename T>
Var<T> relu(Var<T> x) {
  auto* tape = x.tape;
  return detail::unary("relu", x, [tape](T v) {
    if (tape->tracking_branches()) tape->note_branch(v > T{0});
    return v > T{0} ? std::pair<T, T>{v, T{1}} : std::pair<T, T>{T{0}, T{0}};
  });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  return detail::unary("sigmoid", x, [](T v) {
    const T y = v >= T{0} ? T{1} / (T{1} + std::exp(-v)) : std::exp(v) / (T{1} + std::exp(v));
    return std::pair<T, T>{y, y * (T{1} - y)};
  });
}

template <typename T>
Var<T> exp(Var<T> x) {
  return detail::unary("exp", x, [](T v) {
    const T y = std::exp(v);
    return std::pair<T, T>{y, y};
  });
}

template <typename T>
Var<T> scale(Var<T> x, T c) {
  return detail::unary("scale", x, [c](T v) { return std::pair<T, T>{c * v, c}; });
}

/// Clamp to [lo, hi]; gradient is zero where the bound is active.
template <typename T>
Var<T> clamp(Var<T> x, T lo, T hi) {
  auto* tape = x.tape;
  return detail::unary("clamp", x, [lo, hi, tape](T v) {
    if (tape->tracking_branches()) {
      tape->note_branch(v < lo);
      tape->note_branch(v > hi);
    }
    if (v < lo) return std::pair<T, T>{lo, T{0}};
    if (v > hi) return std::pair<T, T>{hi, T{0}};
    return std::pair<T, T>{v, T{1}};
  });
}

namespace detail {

template <typename T, typename F>
Var<T> binary(const char* op, Var<T> a, Var<T> b, F&& fn) {
  const auto& av = a.value();
  const auto& bv = b.value();
  require_same(op, av.shape(), bv.shape());
  Tensor<T> out(av.shape()), da(av.shape()), db(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) {
    auto [y, ga, gb] = fn(av[i], bv[i]);
    out[i] = y;
    da[i] = ga;
    db[i] = gb;
  }
  return a.tape->record(op, std::move(out), {a, b},
                        [a, b, da = std::move(da), db = std::move(db)](Tape<T>& tape, const Tensor<T>& g) {
                          if (auto* s = tape.grad_sink(a))
                            for (std::size_t i = 0; i < g.size(); ++i) (*s)[i] += g[i] * da[i];
                          if (auto* s = tape.grad_sink(b))
                            for (std::size_t i = 0; i < g.size(); ++i) (*s)[i] += g[i] * db[i];
                        });
}

}  // namespace detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require_same("add", av.shape(), bv.shape());
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  return a.tape->record("add", std::move(out), {a, b}, [a, b](Tape<T>& tape, const Tensor<T>& g) {
    detail::add_into(tape.grad_sink(a), g);
    detail::add_into(tape.grad_sink(b), g);
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return detail::binary("sub", a, b, [](T x, T y) { return std::tuple<T, T, T>{x - y, T{1}, T{-1}}; });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return detail::binary("mul", a, b, [](T x, T y) { return std::tuple<T, T, T>{x * y, y, x}; });
}

/// Elementwise minimum; ties send the gradient to the first operand.
template <typename T>
Var<T> minimum(Var<T> a, Var<T> b) {
  auto* tape = a.tape;
  return detail::binary("minimum", a, b, [tape](T x, T y) {
    if (tape->tracking_branches()) tape->note_branch(x <= y);
    return x <= y ? std::tuple<T, T, T>{x, T{1}, T{0}} : std::tuple<T, T, T>{y, T{0}, T{1}};
  });
}

/// Elementwise product with a constant tensor of the same shape.
template <typename T>
Var<T> mul_const(Var<T> x, const Tensor<T>& c) {
  const auto& xv = x.value();
  detail::require_same("mul_const", xv.shape(), c.shape());
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * c[i];
  return x.tape->record("mul_const", std::move(out), {x}, [x, c](Tape<T>& tape, const Tensor<T>& g) {
    if (auto* s = tape.grad_sink(x))
      for (std::size_t i = 0; i < g.size(); ++i) (*s)[i] += g[i] * c[i];
  });
}

/// Elementwise sum with a constant tensor of the same shape.
template <typename T>
Var<T> add_const(Var<T> x, const Tensor<T>& c) {
  const auto& xv = x.value();
  detail::require_same("add_const", xv.shape(), c.shape());
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] + c[i];
  return x.tape->record("add_const", std::move(out), {x},
                        [x](Tape<T>& tape, const Tensor<T>& g) { detail::add_into(tape.grad_sink(x), g); });
}

// ---------------------------------------------------------------------------
// softmax family, over the last axis

template <typename T>
Var<T> softmax(Var<T> x) {
  const auto& xv = x.value();
  if (xv.rank() == 0) detail::shape_fail("softmax", "needs at least one axis");
  const auto cols = xv.shape().back();
  const auto rows = xv.size() / cols;
  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = xv.raw() + r * cols;
    T* dst = out.raw() + r * cols;
    const T mx = *std::max_element(src, src + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(static_cast<double>(src[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) dst[c] = static_cast<T>(std::exp(static_cast<double>(src[c] - mx)) / z);
  }
  auto y = out;
  return x.tape->record("softmax", std::move(out), {x}, [x, y, rows, cols](Tape<T>& tape, const Tensor<T>& g) {
    auto* s = tape.grad_sink(x);
    if (!s) return;
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += static_cast<double>(g[r * cols + c]) * y[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c)
        (*s)[r * cols + c] += y[r * cols + c] * static_cast<T>(g[r * cols + c] - dot);
    }
  });
}

template <typename T>
Var<T> log_softmax(Var<T> x) {
  const auto& xv = x.value();
  if (xv.rank() == 0) detail::shape_fail("log_softmax", "needs at least one axis");
  const auto cols = xv.shape().back();
  const auto rows = xv.size() / cols;
  Tensor<T> out(xv.shape());
  Tensor<T> prob(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = xv.raw() + r * cols;
    const T mx = *std::max_element(src, src + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(static_cast<double>(src[c] - mx));
    const double lz = std::log(z) + static_cast<double>(mx);
    for (std::size_t c = 0; c < cols; ++c) {
      out[r * cols + c] = static_cast<T>(static_cast<double>(src[c]) - lz);
      prob[r * cols + c] = static_cast<T>(std::exp(static_cast<double>(src[c]) - lz));
    }
  }
  return x.tape->record("log_softmax", std::move(out), {x}, [x, prob, rows, cols](Tape<T>& tape, const Tensor<T>& g) {
    auto* s = tape.grad_sink(x);
    if (!s) return;
    for (std::size_t r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (std::size_t c = 0; c < cols; ++c) gs += g[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c)
        (*s)[r * cols + c] += g[r * cols + c] - prob[r * cols + c] * static_cast<T>(gs);
    }
  });
}

// ---------------------------------------------------------------------------
// structural

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  auto out = x.value().reshaped(std::move(shape));
  return x.tape->record("reshape", std::move(out), {x},
                        [x](Tape<T>& tape, const Tensor<T>& g) { detail::add_into(tape.grad_sink(x), g); });
}

/// Concatenation along `axis`; all other dims must agree.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis) {
  if (xs.empty()) detail::shape_fail("concat", "no inputs");
  Shape shape = xs[0].shape();
  if (axis >= shape.size()) detail::shape_fail("concat", "axis out of range for " + shape_str(shape));
  std::size_t total = 0;
  for (const auto& x : xs) {
    const auto& s = x.shape();
    if (s.size() != shape.size()) detail::shape_fail("concat", "rank mismatch " + shape_str(s) + " vs " + shape_str(shape));
    for (std::size_t a = 0; a < s.size(); ++a) {
      if (a != axis && s[a] != shape[a])
        detail::shape_fail("concat", "dims differ " + shape_str(s) + " vs " + shape_str(shape));
    }
    total += s[axis];
  }
  shape[axis] = total;
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= shape[a];
  for (std::size_t a = axis + 1; a < shape.size(); ++a) inner *= shape[a];
  Tensor<T> out(shape);
  std::vector<std::size_t> widths;
  std::size_t off = 0;
  for (const auto& x : xs) {
    const auto& v = x.value();
    const auto wdt = v.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(v.raw() + o * wdt, v.raw() + (o + 1) * wdt, out.raw() + o * total * inner + off);
    widths.push_back(wdt);
    off += wdt;
  }
  return xs[0].tape->record("concat", std::move(out), xs,
                            [xs, widths, outer, row = total * inner](Tape<T>& tape, const Tensor<T>& g) {
                              std::size_t off = 0;
                              for (std::size_t k = 0; k < xs.size(); ++k) {
                                if (auto* s = tape.grad_sink(xs[k])) {
                                  for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t i = 0; i < widths[k]; ++i)
                                      (*s)[o * widths[k] + i] += g[o * row + off + i];
                                }
                                off += widths[k];
                              }
                            });
}

/// Gathers slices of the leading axis: out[r] = x[idx[r]].
template <typename T>
Var<T> take_rows(Var<T> x, const std::vector<std::size_t>& idx) {
  const auto& xv = x.value();
  if (xv.rank() == 0) detail::shape_fail("take_rows", "needs a leading axis");
  if (idx.empty()) detail::shape_fail("take_rows", "empty index list");
  const auto n = xv.dim(0);
  const auto inner = xv.size() / n;
  Shape shape = xv.shape();
  shape[0] = idx.size();
  Tensor<T> out(shape);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= n) throw std::out_of_range("take_rows: index " + std::to_string(idx[r]) + " >= " + std::to_string(n));
    std::copy(xv.raw() + idx[r] * inner, xv.raw() + (idx[r] + 1) * inner, out.raw() + r * inner);
  }
  return x.tape->record("take_rows", std::move(out), {x}, [x, idx, inner](Tape<T>& tape, const Tensor<T>& g) {
    auto* s = tape.grad_sink(x);
    if (!s) return;
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t i = 0; i < inner; ++i) (*s)[idx[r] * inner + i] += g[r * inner + i];
  });
}

/// Places slices into a zero tensor with `rows` leading entries: out[idx[r]] = x[r].
template <typename T>
Var<T> scatter_rows(Var<T> x, const std::vector<std::size_t>& idx, std::size_t rows) {
  const auto& xv = x.value();
  if (xv.rank() == 0 || xv.dim(0) != idx.size()) {
    detail::shape_fail("scatter_rows", "source " + shape_str(xv.shape()) + " vs " + std::to_string(idx.size()) + " indices");
  }
  const auto inner = xv.size() / idx.size();
  Shape shape = xv.shape();
  shape[0] = rows;
  Tensor<T> out(shape);
  std::vector<char> seen(rows, 0);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= rows) throw std::out_of_range("scatter_rows: index out of range");
    if (seen[idx[r]]++) throw std::invalid_argument("scatter_rows: duplicate index");
    std::copy(xv.raw() + r * inner, xv.raw() + (r + 1) * inner, out.raw() + idx[r] * inner);
  }
  return x.tape->record("scatter_rows", std::move(out), {x}, [x, idx, inner](Tape<T>& tape, const Tensor<T>& g) {
    auto* s = tape.grad_sink(x);
    if (!s) return;
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t i = 0; i < inner; ++i) (*s)[r * inner + i] += g[idx[r] * inner + i];
  });
}

/// x [R,C], idx[R] -> [R] with out[r] = x[r, idx[r]].
template <typename T>
Var<T> pick(Var<T> x, const std::vector<std::size_t>& idx) {
  const auto& xv = x.value();
  detail::require_rank("pick", xv.shape(), 2);
  if (xv.dim(0) != idx.size()) {
    detail::shape_fail("pick", "rows " + shape_str(xv.shape()) + " vs " + std::to_string(idx.size()) + " indices");
  }
  const auto cols = xv.dim(1);
  Tensor<T> out({idx.size()});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= cols) throw std::out_of_range("pick: column index out of range");
    out[r] = xv[r * cols + idx[r]];
  }
  return x.tape->record("pick", std::move(out), {x}, [x, idx, cols](Tape<T>& tape, const Tensor<T>& g) {
    if (auto* s = tape.grad_sink(x))
      for (std::size_t r = 0; r < idx.size(); ++r) (*s)[r * cols + idx[r]] += g[r];
  });
}

// ---------------------------------------------------------------------------
// reductions, accumulated in 64-bit

template <typename T>
Var<T> sum(Var<T> x) {
  const double acc = sum_wide<T>(x.value().data());
  return x.tape->record("sum", Tensor<T>::scalar(static_cast<T>(acc)), {x}, [x](Tape<T>& tape, const Tensor<T>& g) {
    if (auto* s = tape.grad_sink(x))
      for (auto& v : s->data()) v += g[0];
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  const auto n = x.value().size();
  const double acc = sum_wide<T>(x.value().data()) / static_cast<double>(n);
  return x.tape->record("mean", Tensor<T>::scalar(static_cast<T>(acc)), {x}, [x, n](Tape<T>& tape, const Tensor<T>& g) {
    if (auto* s = tape.grad_sink(x)) {
      const T share = static_cast<T>(static_cast<double>(g[0]) / static_cast<double>(n));
      for (auto& v : s->data()) v += share;
    }
  });
}

/// Sum over the last axis; [.., C] -> [..]. A rank-1 input yields a scalar.
template <typename T>
Var<T> row_sum(Var<T> x) {
  const auto& xv = x.value();
  if (xv.rank() == 0) detail::shape_fail("row_sum", "needs at least one axis");
  const auto cols = xv.shape().back();
  const auto rows = xv.size() / cols;
  Shape shape(xv.shape().begin(), xv.shape().end() - 1);
  Tensor<T> out(shape);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += xv[r * cols + c];
    out[r] = static_cast<T>(acc);
  }
  return x.tape->record("row_sum", std::move(out), {x}, [x, rows, cols](Tape<T>& tape, const Tensor<T>& g) {
    if (auto* s = tape.grad_sink(x))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) (*s)[r * cols + c] += g[r];
  });
}

// ---------------------------------------------------------------------------
// losses

/// Mean squared error over all elements.
template <typename T>
Var<T> mse(Var<T> pred, Var<T> target) {
  const auto& pv = pred.value();
  const auto& tv = target.value();
  detail::require_same("mse", pv.shape(), tv.shape());
  const auto n = pv.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(pv[i]) - static_cast<double>(tv[i]);
    acc += d * d;
  }
  return pred.tape->record("mse", Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n))), {pred, target},
                           [pred, target, n](Tape<T>& tape, const Tensor<T>& g) {
                             const auto& pv = tape.value(pred);
                             const auto& tv = tape.value(target);
                             const double k = 2.0 * static_cast<double>(g[0]) / static_cast<double>(n);
                             auto* sp = tape.grad_sink(pred);
                             auto* st = tape.grad_sink(target);
                             for (std::size_t i = 0; i < n; ++i) {
                               const T d = static_cast<T>(k * (static_cast<double>(pv[i]) - static_cast<double>(tv[i])));
                               if (sp) (*sp)[i] += d;
                               if (st) (*st)[i] -= d;
                             }
                           });
}

/// Binary cross-entropy of sigmoid(logits) against `target`, averaged over
/// the elements where `mask` is nonzero. An empty mask yields exactly 0.
template <typename T>
Var<T> bce_with_mask(Var<T> logits, const Tensor<T>& target, const Tensor<T>& mask) {
  const auto& zv = logits.value();
  detail::require_same("bce_with_mask", zv.shape(), target.shape());
  detail::require_same("bce_with_mask", zv.shape(), mask.shape());
  double acc = 0.0, count = 0.0;
  for (std::size_t i = 0; i < zv.size(); ++i) {
    if (mask[i] == T{0}) continue;
    const double z = zv[i], y = target[i];
    acc += static_cast<double>(mask[i]) * (std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z))));
    count += static_cast<double>(mask[i]);
  }
  const double loss = count > 0.0 ? acc / count : 0.0;
  return logits.tape->record("bce_with_mask", Tensor<T>::scalar(static_cast<T>(loss)), {logits},
                             [logits, target, mask, count](Tape<T>& tape, const Tensor<T>& g) {
                               auto* s = tape.grad_sink(logits);
                               if (!s || count == 0.0) return;
                               const auto& zv = tape.value(logits);
                               const double k = static_cast<double>(g[0]) / count;
                               for (std::size_t i = 0; i < zv.size(); ++i) {
                                 if (mask[i] == T{0}) continue;
                                 const double z = zv[i];
                                 const double p = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
                                 (*s)[i] += static_cast<T>(k * static_cast<double>(mask[i]) * (p - static_cast<double>(target[i])));
                               }
                             });
}

// convenience

template <typename T>
Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T>
Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <typename T>
Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }

}  // namespace advcomm::diffcore
