#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "tssd/error.hpp"
#include "tssd/tape.hpp"
#include "tssd/tensor.hpp"

// Differentiable tensor operations. Each op computes its output eagerly,
// records it on the tape of its inputs and registers the backward rule.
// There is no implicit broadcasting; operand shapes must match exactly except
// where an op documents otherwise.

namespace tssd {

namespace detail {

[[noreturn]] inline void shape_fail(const std::string& op, const Shape& a, const Shape& b) {
  throw ShapeError(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

[[noreturn]] inline void shape_fail(const std::string& op, const Shape& a,
                                    const std::string& want) {
  throw ShapeError(op + ": got shape " + shape_str(a) + ", expected " + want);
}

template <class Real>
Tape<Real>& tape_of(const Var<Real>& a) {
  if (!a.valid()) throw TapeError("op on a value that is not on a tape");
  return *a.tape();
}

template <class Real>
void same_tape(const Var<Real>& a, const Var<Real>& b) {
  if (a.tape() != b.tape()) throw TapeError("op mixes values from different tapes");
}

template <class Real>
void axpy(std::size_t n, Real alpha, const Real* x, Real* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <class Real>
Real dot(std::size_t n, const Real* a, const Real* b) {
  Real acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t k = 0; k < 8; ++k) acc[k] += a[i + k] * b[i + k];
  }
  Real s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

// C[M,N] += A[M,K] * B[K,N]. Every C entry accumulates its K products in
// order p = 0..K-1 whatever the tile it falls in, so a row of the result does
// not depend on how many other rows or columns are computed alongside it.
template <class Real>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b,
             Real* c) {
  constexpr std::size_t kRows = 4;
  constexpr std::size_t kCols = 256 / sizeof(Real);
  for (std::size_t j0 = 0; j0 < n; j0 += kCols) {
    const std::size_t jn = std::min(kCols, n - j0);
    std::size_t i0 = 0;
    if (jn == kCols) {
      for (; i0 + kRows <= m; i0 += kRows) {
        Real acc[kRows][kCols];
        for (std::size_t r = 0; r < kRows; ++r) {
          std::copy_n(c + (i0 + r) * n + j0, kCols, acc[r]);
        }
        for (std::size_t p = 0; p < k; ++p) {
          const Real* brow = b + p * n + j0;
          for (std::size_t r = 0; r < kRows; ++r) {
            const Real av = a[(i0 + r) * k + p];
            for (std::size_t j = 0; j < kCols; ++j) acc[r][j] += av * brow[j];
          }
        }
        for (std::size_t r = 0; r < kRows; ++r) {
          std::copy_n(acc[r], kCols, c + (i0 + r) * n + j0);
        }
      }
    }
    for (std::size_t i = i0; i < m; ++i) {
      Real* crow = c + i * n + j0;
      for (std::size_t p = 0; p < k; ++p) axpy(jn, a[i * k + p], b + p * n + j0, crow);
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T, through a transposed copy of B.
template <class Real>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b,
             Real* c) {
  std::vector<Real> bt(k * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  }
  gemm_nn(m, n, k, a, bt.data(), c);
}

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kh, kw, pad;
  std::size_t out_h, out_w;
};

// Unfolds one sample; row k of the patch matrix starts at col + k*row_stride.
template <class Real>
void im2col(const Real* x, const ConvGeometry& g, Real* col, std::size_t row_stride) {
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  const auto h = static_cast<std::ptrdiff_t>(g.height), w = static_cast<std::ptrdiff_t>(g.width);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        Real* row = col + ((c * g.kh + i) * g.kw + j) * row_stride;
        const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(j) - pad;
        // output columns whose input column lies inside the image
        const std::ptrdiff_t lo = std::clamp<std::ptrdiff_t>(-shift, 0, static_cast<std::ptrdiff_t>(g.out_w));
        const std::ptrdiff_t hi = std::clamp<std::ptrdiff_t>(w - shift, lo, static_cast<std::ptrdiff_t>(g.out_w));
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + i) - pad;
          Real* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= h) {
            for (std::size_t ox = 0; ox < g.out_w; ++ox) dst[ox] = Real(0);
            continue;
          }
          const Real* src = x + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::ptrdiff_t ox = 0; ox < lo; ++ox) dst[ox] = Real(0);
          for (std::ptrdiff_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox + shift];
          for (std::ptrdiff_t ox = hi; ox < static_cast<std::ptrdiff_t>(g.out_w); ++ox) dst[ox] = Real(0);
        }
      }
    }
  }
}

template <class Real>
void im2col(const Real* x, const ConvGeometry& g, Real* col) {
  im2col(x, g, col, g.out_h * g.out_w);
}

// Adjoint of im2col: scatters patch rows back into dx (accumulating).
template <class Real>
void col2im(const Real* col, const ConvGeometry& g, Real* dx, std::size_t row_stride) {
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  const auto h = static_cast<std::ptrdiff_t>(g.height), w = static_cast<std::ptrdiff_t>(g.width);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const Real* row = col + ((c * g.kh + i) * g.kw + j) * row_stride;
        const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(j) - pad;
        const std::ptrdiff_t lo = std::clamp<std::ptrdiff_t>(-shift, 0, static_cast<std::ptrdiff_t>(g.out_w));
        const std::ptrdiff_t hi = std::clamp<std::ptrdiff_t>(w - shift, lo, static_cast<std::ptrdiff_t>(g.out_w));
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + i) - pad;
          if (iy < 0 || iy >= h) continue;
          Real* dst = dx + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          const Real* src = row + oy * g.out_w;
          for (std::ptrdiff_t ox = lo; ox < hi; ++ox) dst[ox + shift] += src[ox];
        }
      }
    }
  }
}

template <class Real>
void col2im(const Real* col, const ConvGeometry& g, Real* dx) {
  col2im(col, g, dx, g.out_h * g.out_w);
}

// Unfolds `count` consecutive samples into col[kdim, count*HW] (sample-major
// within each row).
template <class Real>
void unfold_chunk(const Real* x, const ConvGeometry& g, std::size_t count, Real* col) {
  const std::size_t hw = g.out_h * g.out_w;
  const std::size_t in_stride = g.channels * g.height * g.width;
  for (std::size_t s = 0; s < count; ++s) im2col(x + s * in_stride, g, col + s * hw, count * hw);
}

template <class Real>
void fold_chunk(const Real* col, const ConvGeometry& g, std::size_t count, Real* dx) {
  const std::size_t hw = g.out_h * g.out_w;
  const std::size_t in_stride = g.channels * g.height * g.width;
  for (std::size_t s = 0; s < count; ++s) col2im(col + s * hw, g, dx + s * in_stride, count * hw);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class Real>
Var<Real> add(const Var<Real>& a, const Var<Real>& b) {
  detail::same_tape(a, b);
  if (a.shape() != b.shape()) detail::shape_fail("add", a.shape(), b.shape());
  Tensor<Real> out = a.value();
  const auto& bv = b.value().storage();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return detail::tape_of(a).record(std::move(out), {a, b}, [ia, ib](Tape<Real>& t, std::size_t self) {
    auto g = t.grad_at(self);
    for (std::size_t id : {ia, ib}) {
      if (Real* d = t.grad_sink(id)) {
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
    }
  });
}

template <class Real>
Var<Real> sub(const Var<Real>& a, const Var<Real>& b) {
  detail::same_tape(a, b);
  if (a.shape() != b.shape()) detail::shape_fail("sub", a.shape(), b.shape());
  Tensor<Real> out = a.value();
  const auto& bv = b.value().storage();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return detail::tape_of(a).record(std::move(out), {a, b}, [ia, ib](Tape<Real>& t, std::size_t self) {
    auto g = t.grad_at(self);
    if (Real* d = t.grad_sink(ia)) {
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (Real* d = t.grad_sink(ib)) {
      for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
    }
  });
}

template <class Real>
Var<Real> mul(const Var<Real>& a, const Var<Real>& b) {
  detail::same_tape(a, b);
  if (a.shape() != b.shape()) detail::shape_fail("mul", a.shape(), b.shape());
  Tensor<Real> out = a.value();
  const auto& bv = b.value().storage();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return detail::tape_of(a).record(std::move(out), {a, b}, [ia, ib](Tape<Real>& t, std::size_t self) {
    auto g = t.grad_at(self);
    const auto& av = t.value_at(ia).storage();
    const auto& bv = t.value_at(ib).storage();
    if (Real* d = t.grad_sink(ia)) {
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * bv[i];
    }
    if (Real* d = t.grad_sink(ib)) {
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * av[i];
    }
  });
}

/// s * a for a scalar constant s.
template <class Real>
Var<Real> scale(const Var<Real>& a, Real s) {
  Tensor<Real> out = a.value();
  for (Real& v : out.storage()) v *= s;
  const std::size_t ia = a.id();
  return detail::tape_of(a).record(std::move(out), {a}, [ia, s](Tape<Real>& t, std::size_t self) {
    auto g = t.grad_at(self);
    if (Real* d = t.grad_sink(ia)) {
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += s * g[i];
    }
  });
}

template <class Real>
Var<Real> square(const Var<Real>& a) {
  Tensor<Real> out = a.value();
  for (Real& v : out.storage()) v *= v;
  const std::size_t ia = a.id();
  return detail::tape_of(a).record(std::move(out), {a}, [ia](Tape<Real>& t, std::size_t self) {
    auto g = t.grad_at(self);
    const auto& av = t.value_at(ia).storage();
    if (Real* d = t.grad_sink(ia)) {
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += Real(2) * av[i] * g[i];
    }
  });
}

/// Sum of all elements as a scalar (shape []).
template <class Real>
Var<Real> sum(const Var<Real>& a) {
  Real s = 0;
  for (Real v : a.value().storage()) s += v;
  const std::size_t ia = a.id();
  return detail::tape_of(a).record(Tensor<Real>(Shape{}, s), {a},
                                   [ia](Tape<Real>& t, std::size_t self) {
                                     const Real g = t.grad_at(self)[0];
                                     if (Real* d = t.grad_sink(ia)) {
                                       const std::size_t n = t.value_at(ia).size();
                                       for (std::size_t i = 0; i < n; ++i) d[i] += g;
                                     }
                                   });
}

template <class Real>
Var<Real> mean(const Var<Real>& a) {
  return scale(sum(a), Real(1) / static_cast<Real>(a.size()));
}

/// Copy of `a` that blocks gradient flow.
template <class Real>
Var<Real> detach(const Var<Real>& a) {
  return detail::tape_of(a).constant(a.value());
}

template <class Real>
Var<Real> reshape(const Var<Real>& a, Shape shape) {
  Tensor<Real> out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  return detail::tape_of(a).record(std::move(out), {a}, [ia](Tape<Real>& t, std::size_t self) {
    auto g = t.grad_at(self);
    if (Real* d = t.grad_sink(ia)) {
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

/// Rows [begin, begin+count) along the leading dimension.
template <class Real>
Var<Real> slice_leading(const Var<Real>& a, std::size_t begin, std::size_t count) {
  const Shape& s = a.shape();
  if (s.empty() || count == 0 || begin + count > s[0]) {
    detail::shape_fail("slice_leading", s,
                       "leading dim >= " + std::to_string(begin + count));
  }
  const std::size_t row = a.size() / s[0];
  Shape os = s;
  os[0] = count;
  std::vector<Real> data(a.value().storage().begin() + begin * row,
                         a.value().storage().begin() + (begin + count) * row);
  const std::size_t ia = a.id();
  const std::size_t off = begin * row;
  return detail::tape_of(a).record(
      Tensor<Real>(std::move(os), std::move(data)), {a}, [ia, off](Tape<Real>& t, std::size_t self) {
        auto g = t.grad_at(self);
        if (Real* d = t.grad_sink(ia)) {
          for (std::size_t i = 0; i < g.size(); ++i) d[off + i] += g[i];
        }
      });
}

/// Mean of the first `over` slices of a [T, ...] tensor, giving [...].
template <class Real>
Var<Real> time_mean(const Var<Real>& a, std::size_t over) {
  const Shape& s = a.shape();
  if (s.size() < 2) detail::shape_fail("time_mean", s, "rank >= 2 [T, ...]");
  if (over < 1 || over > s[0]) {
    throw ShapeError("time_mean: over=" + std::to_string(over) + " outside [1, " +
                     std::to_string(s[0]) + "]");
  }
  const std::size_t row = a.size() / s[0];
  Shape os(s.begin() + 1, s.end());
  Tensor<Real> out(os);
  const auto& av = a.value().storage();
  for (std::size_t t = 0; t < over; ++t) {
    for (std::size_t i = 0; i < row; ++i) out[i] += av[t * row + i];
  }
  const Real inv = Real(1) / static_cast<Real>(over);
  for (Real& v : out.storage()) v *= inv;
  const std::size_t ia = a.id();
  return detail::tape_of(a).record(std::move(out), {a}, [ia, over, row, inv](Tape<Real>& t, std::size_t self) {
    auto g = t.grad_at(self);
    if (Real* d = t.grad_sink(ia)) {
      for (std::size_t k = 0; k < over; ++k) {
        for (std::size_t i = 0; i < row; ++i) d[k * row + i] += inv * g[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// A[M,K] x B[K,N] -> [M,N]; also A[M,K] x v[K] -> [M].
template <class Real>
Var<Real> matmul(const Var<Real>& a, const Var<Real>& b) {
  detail::same_tape(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || (sb.size() != 1 && sb.size() != 2) || sa[1] != sb[0]) {
    detail::shape_fail("matmul", sa, sb);
  }
  const std::size_t m = sa[0], k = sa[1], n = sb.size() == 2 ? sb[1] : 1;
  Shape os = sb.size() == 2 ? Shape{m, n} : Shape{m};
  Tensor<Real> out(os);
  detail::gemm_nn(m, n, k, a.value().data().data(), b.value().data().data(),
                  out.data().data());
  const std::size_t ia = a.id(), ib = b.id();
  return detail::tape_of(a).record(std::move(out), {a, b}, [ia, ib, m, n, k](Tape<Real>& t, std::size_t self) {
    const Real* g = t.grad_at(self).data();
    const Real* av = t.value_at(ia).data().data();
    const Real* bv = t.value_at(ib).data().data();
    if (Real* da = t.grad_sink(ia)) {
      // dA[i,p] = sum_j g[i,j] B[p,j]
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) da[i * k + p] += detail::dot(n, g + i * n, bv + p * n);
      }
    }
    if (Real* db = t.grad_sink(ib)) {
      // dB[p,j] = sum_i A[i,p] g[i,j]
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) detail::axpy(n, av[i * k + p], g + i * n, db + p * n);
      }
    }
  });
}

/// Fully connected layer: x[N,I], weight[O,I], bias[O] -> [N,O].
template <class Real>
Var<Real> linear(const Var<Real>& x, const Var<Real>& weight, const Var<Real>& bias) {
  detail::same_tape(x, weight);
  detail::same_tape(x, bias);
  const Shape& sx = x.shape();
  const Shape& sw = weight.shape();
  if (sx.size() != 2 || sw.size() != 2 || sx[1] != sw[1]) detail::shape_fail("linear", sx, sw);
  if (bias.shape() != Shape{sw[0]}) detail::shape_fail("linear(bias)", bias.shape(), Shape{sw[0]});
  const std::size_t n = sx[0], in = sx[1], o = sw[0];
  Tensor<Real> out(Shape{n, o});
  const Real* xv = x.value().data().data();
  const Real* wv = weight.value().data().data();
  const Real* bv = bias.value().data().data();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < o; ++c) out[r * o + c] = bv[c] + detail::dot(in, xv + r * in, wv + c * in);
  }
  const std::size_t ix = x.id(), iw = weight.id(), ib = bias.id();
  return detail::tape_of(x).record(std::move(out), {x, weight, bias}, [ix, iw, ib, n, in, o](Tape<Real>& t, std::size_t self) {
    const Real* g = t.grad_at(self).data();
    if (Real* dx = t.grad_sink(ix)) {
      const Real* wv = t.value_at(iw).data().data();
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < o; ++c) detail::axpy(in, g[r * o + c], wv + c * in, dx + r * in);
      }
    }
    if (Real* dw = t.grad_sink(iw)) {
      const Real* xv = t.value_at(ix).data().data();
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < o; ++c) detail::axpy(in, g[r * o + c], xv + r * in, dw + c * in);
      }
    }
    if (Real* db = t.grad_sink(ib)) {
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < o; ++c) db[c] += g[r * o + c];
      }
    }
  });
}

/// 2-D convolution, stride 1, zero padding `pad`, no bias.
/// x[N,C,H,W], weight[O,C,KH,KW] -> [N,O,H+2p-KH+1,W+2p-KW+1].
/// With the default 3x3 kernel and pad 1 the spatial size is preserved.
///
/// Samples are unfolded in chunks into one column matrix [C*KH*KW, n*HW] so a
/// single GEMM covers the chunk; the unfold is recomputed during backward.
template <class Real>
Var<Real> conv2d(const Var<Real>& x, const Var<Real>& weight, std::size_t pad = 1) {
  detail::same_tape(x, weight);
  const Shape& sx = x.shape();
  const Shape& sw = weight.shape();
  if (sx.size() != 4 || sw.size() != 4 || sx[1] != sw[1] || sx[2] + 2 * pad < sw[2] ||
      sx[3] + 2 * pad < sw[3]) {
    detail::shape_fail("conv2d", sx, sw);
  }
  const std::size_t n = sx[0], o = sw[0];
  const detail::ConvGeometry geo{sx[1], sx[2], sx[3], sw[2], sw[3], pad,
                                 sx[2] + 2 * pad - sw[2] + 1, sx[3] + 2 * pad - sw[3] + 1};
  const std::size_t kdim = geo.channels * geo.kh * geo.kw;
  const std::size_t hw = geo.out_h * geo.out_w;
  const std::size_t in_stride = geo.channels * geo.height * geo.width;
  // samples per chunk: keep the column matrix cache-sized
  const std::size_t chunk = std::max<std::size_t>(1, (std::size_t{1} << 14) / (kdim * hw));
  Tensor<Real> out(Shape{n, o, geo.out_h, geo.out_w});
  const Real* xv = x.value().data().data();
  const Real* wv = weight.value().data().data();
  {
    std::vector<Real> col, res;
    for (std::size_t s0 = 0; s0 < n; s0 += chunk) {
      const std::size_t sn = std::min(chunk, n - s0), cols = sn * hw;
      col.resize(kdim * cols);
      res.assign(o * cols, Real(0));
      detail::unfold_chunk(xv + s0 * in_stride, geo, sn, col.data());
      detail::gemm_nn(o, cols, kdim, wv, col.data(), res.data());
      for (std::size_t s = 0; s < sn; ++s) {
        for (std::size_t oc = 0; oc < o; ++oc) {
          std::copy_n(res.data() + oc * cols + s * hw, hw, out.data().data() + ((s0 + s) * o + oc) * hw);
        }
      }
    }
  }
  const std::size_t ix = x.id(), iw = weight.id();
  return detail::tape_of(x).record(std::move(out), {x, weight}, [ix, iw, geo, n, o, kdim, hw, in_stride, chunk](Tape<Real>& t, std::size_t self) {
    const Real* g = t.grad_at(self).data();
    const Real* xv = t.value_at(ix).data().data();
    const Real* wv = t.value_at(iw).data().data();
    Real* dx = t.grad_sink(ix);
    Real* dw = t.grad_sink(iw);
    std::vector<Real> wt;
    if (dx) {
      wt.resize(kdim * o);
      for (std::size_t oc = 0; oc < o; ++oc) {
        for (std::size_t k = 0; k < kdim; ++k) wt[k * o + oc] = wv[oc * kdim + k];
      }
    }
    std::vector<Real> col, gcol, dcol;
    for (std::size_t s0 = 0; s0 < n; s0 += chunk) {
      const std::size_t sn = std::min(chunk, n - s0), cols = sn * hw;
      gcol.resize(o * cols);
      for (std::size_t s = 0; s < sn; ++s) {
        for (std::size_t oc = 0; oc < o; ++oc) {
          std::copy_n(g + ((s0 + s) * o + oc) * hw, hw, gcol.data() + oc * cols + s * hw);
        }
      }
      if (dw) {
        col.resize(kdim * cols);
        detail::unfold_chunk(xv + s0 * in_stride, geo, sn, col.data());
        detail::gemm_nt(o, kdim, cols, gcol.data(), col.data(), dw);
      }
      if (dx) {
        dcol.assign(kdim * cols, Real(0));
        detail::gemm_nn(kdim, cols, o, wt.data(), gcol.data(), dcol.data());
        detail::fold_chunk(dcol.data(), geo, sn, dx + s0 * in_stride);
      }
    }
  });
}

/// 2x2 average pooling with stride 2. An odd trailing row or column is
/// dropped (output floor(H/2) x floor(W/2)).
template <class Real>
Var<Real> avgpool2d(const Var<Real>& x) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[2] < 2 || s[3] < 2) {
    detail::shape_fail("avgpool2d", s, "[N,C,H,W] with H, W >= 2");
  }
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3], oh = h / 2, ow = w / 2;
  Tensor<Real> out(Shape{s[0], s[1], oh, ow});
  const Real* xv = x.value().data().data();
  for (std::size_t p = 0; p < planes; ++p) {
    const Real* src = xv + p * h * w;
    Real* dst = out.data().data() + p * oh * ow;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const Real* q = src + 2 * y * w + 2 * xx;
        dst[y * ow + xx] = Real(0.25) * ((q[0] + q[1]) + (q[w] + q[w + 1]));
      }
    }
  }
  const std::size_t ix = x.id();
  return detail::tape_of(x).record(std::move(out), {x}, [ix, planes, h, w, oh, ow](Tape<Real>& t, std::size_t self) {
    const Real* g = t.grad_at(self).data();
    Real* d = t.grad_sink(ix);
    if (!d) return;
    for (std::size_t p = 0; p < planes; ++p) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t xx = 0; xx < ow; ++xx) {
          const Real v = Real(0.25) * g[p * oh * ow + y * ow + xx];
          Real* q = d + p * h * w + 2 * y * w + 2 * xx;
          q[0] += v;
          q[1] += v;
          q[w] += v;
          q[w + 1] += v;
        }
      }
    }
  });
}

/// Mean over the spatial dims: [N,C,H,W] -> [N,C].
template <class Real>
Var<Real> global_avgpool(const Var<Real>& x) {
  const Shape& s = x.shape();
  if (s.size() != 4) detail::shape_fail("global_avgpool", s, "[N,C,H,W]");
  const std::size_t planes = s[0] * s[1], hw = s[2] * s[3];
  const Real inv = Real(1) / static_cast<Real>(hw);
  Tensor<Real> out(Shape{s[0], s[1]});
  const Real* xv = x.value().data().data();
  for (std::size_t p = 0; p < planes; ++p) {
    Real acc = 0;
    for (std::size_t i = 0; i < hw; ++i) acc += xv[p * hw + i];
    out[p] = acc * inv;
  }
  const std::size_t ix = x.id();
  return detail::tape_of(x).record(std::move(out), {x}, [ix, planes, hw, inv](Tape<Real>& t, std::size_t self) {
    const Real* g = t.grad_at(self).data();
    if (Real* d = t.grad_sink(ix)) {
      for (std::size_t p = 0; p < planes; ++p) {
        const Real v = g[p] * inv;
        for (std::size_t i = 0; i < hw; ++i) d[p * hw + i] += v;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization

enum class BatchNormMode { kTrain, kInference };

/// Running statistics of one batch-norm layer.
template <class Real>
struct BatchNormState {
  Tensor<Real>* running_mean = nullptr;
  Tensor<Real>* running_var = nullptr;
  Real momentum = Real(0.1);
  Real eps = Real(1e-5);
};

/// Per-channel batch normalization of x[N,C] or x[N,C,H,W].
///
/// Train mode normalizes with the biased batch statistics over N (and H, W)
/// and folds them into the running estimates (unbiased variance) with
/// `momentum`. Inference mode uses the running estimates only.
template <class Real>
Var<Real> batchnorm(const Var<Real>& x, const Var<Real>& gamma, const Var<Real>& beta,
                    const BatchNormState<Real>& state, BatchNormMode mode) {
  detail::same_tape(x, gamma);
  detail::same_tape(x, beta);
  const Shape& s = x.shape();
  if (s.size() != 2 && s.size() != 4) detail::shape_fail("batchnorm", s, "[N,C] or [N,C,H,W]");
  const std::size_t n = s[0], c = s[1], hw = s.size() == 4 ? s[2] * s[3] : 1;
  if (gamma.shape() != Shape{c}) detail::shape_fail("batchnorm(gamma)", gamma.shape(), Shape{c});
  if (beta.shape() != Shape{c}) detail::shape_fail("batchnorm(beta)", beta.shape(), Shape{c});
  if (!state.running_mean || !state.running_var ||
      state.running_mean->shape() != Shape{c} || state.running_var->shape() != Shape{c}) {
    throw ShapeError("batchnorm: running statistics must have shape " + shape_str(Shape{c}));
  }
  const bool train = mode == BatchNormMode::kTrain;
  if (train && n < 2) {
    throw ShapeError("batchnorm: train mode needs batch size >= 2, got " + std::to_string(n));
  }
  const Real* xv = x.value().data().data();
  const Real* gv = gamma.value().data().data();
  const Real* bv = beta.value().data().data();
  const std::size_t count = n * hw;
  std::vector<Real> mu(c), inv_std(c);
  if (train) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double acc = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const Real* p = xv + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) acc += p[i];
      }
      const double m = acc / static_cast<double>(count);
      double var = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const Real* p = xv + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) var += (p[i] - m) * (p[i] - m);
      }
      var /= static_cast<double>(count);
      mu[ch] = static_cast<Real>(m);
      inv_std[ch] = static_cast<Real>(1.0 / std::sqrt(var + static_cast<double>(state.eps)));
      Real& rm = (*state.running_mean)[ch];
      Real& rv = (*state.running_var)[ch];
      const double unbiased = count > 1 ? var * static_cast<double>(count) / static_cast<double>(count - 1) : var;
      rm = static_cast<Real>((1.0 - state.momentum) * rm + state.momentum * m);
      rv = static_cast<Real>((1.0 - state.momentum) * rv + state.momentum * unbiased);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = (*state.running_mean)[ch];
      inv_std[ch] = Real(1) / std::sqrt((*state.running_var)[ch] + state.eps);
    }
  }
  Tensor<Real> out(s);
  std::vector<Real> xhat(x.size());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const Real h = (xv[off + i] - mu[ch]) * inv_std[ch];
        xhat[off + i] = h;
        out[off + i] = gv[ch] * h + bv[ch];
      }
    }
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return detail::tape_of(x).record(
      std::move(out), {x, gamma, beta},
      [ix, ig, ib, n, c, hw, count, train, inv_std = std::move(inv_std),
       xhat = std::move(xhat)](Tape<Real>& t, std::size_t self) {
        const Real* g = t.grad_at(self).data();
        const Real* gv = t.value_at(ig).data().data();
        std::vector<Real> sum_g(c, Real(0)), sum_gx(c, Real(0));
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t off = (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              sum_g[ch] += g[off + i];
              sum_gx[ch] += g[off + i] * xhat[off + i];
            }
          }
        }
        if (Real* dg = t.grad_sink(ig)) {
          for (std::size_t ch = 0; ch < c; ++ch) dg[ch] += sum_gx[ch];
        }
        if (Real* db = t.grad_sink(ib)) {
          for (std::size_t ch = 0; ch < c; ++ch) db[ch] += sum_g[ch];
        }
        if (Real* dx = t.grad_sink(ix)) {
          const Real inv_count = Real(1) / static_cast<Real>(count);
          for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t off = (b * c + ch) * hw;
              const Real k = gv[ch] * inv_std[ch];
              if (train) {
                const Real mg = sum_g[ch] * inv_count;
                const Real mgx = sum_gx[ch] * inv_count;
                for (std::size_t i = 0; i < hw; ++i) {
                  dx[off + i] += k * (g[off + i] - mg - xhat[off + i] * mgx);
                }
              } else {
                for (std::size_t i = 0; i < hw; ++i) dx[off + i] += k * g[off + i];
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Loss

/// Mean over the batch of -log softmax(logits)[label]. logits[B,K].
template <class Real>
Var<Real> softmax_cross_entropy(const Var<Real>& logits, std::span<const int> labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2) detail::shape_fail("softmax_cross_entropy", s, "[B,K]");
  const std::size_t b = s[0], k = s[1];
  if (labels.size() != b) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for batch of " + std::to_string(b));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw ConfigError("softmax_cross_entropy: label " + std::to_string(y) +
                        " outside [0, " + std::to_string(k) + ")");
    }
  }
  const Real* lv = logits.value().data().data();
  std::vector<Real> prob(b * k);
  double loss = 0;
  for (std::size_t r = 0; r < b; ++r) {
    const Real* row = lv + r * k;
    const Real mx = *std::max_element(row, row + k);
    double z = 0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    for (std::size_t j = 0; j < k; ++j) {
      prob[r * k + j] = static_cast<Real>(std::exp(static_cast<double>(row[j] - mx)) / z);
    }
    loss += std::log(z) - static_cast<double>(row[labels[r]] - mx);
  }
  loss /= static_cast<double>(b);
  std::vector<int> ys(labels.begin(), labels.end());
  const std::size_t il = logits.id();
  return detail::tape_of(logits).record(
      Tensor<Real>(Shape{}, static_cast<Real>(loss)), {logits},
      [il, b, k, prob = std::move(prob), ys = std::move(ys)](Tape<Real>& t, std::size_t self) {
        const Real g = t.grad_at(self)[0] / static_cast<Real>(b);
        if (Real* d = t.grad_sink(il)) {
          for (std::size_t r = 0; r < b; ++r) {
            for (std::size_t j = 0; j < k; ++j) {
              const Real onehot = static_cast<std::size_t>(ys[r]) == j ? Real(1) : Real(0);
              d[r * k + j] += g * (prob[r * k + j] - onehot);
            }
          }
        }
      });
}

}  // namespace tssd
