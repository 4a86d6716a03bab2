#pragma once

// OpenMP-parallel dense kernels. Every kernel partitions work so that each
// output element is written by exactly one thread in a fixed summation order,
// which keeps results bit-identical for any thread count.
// Serial reference versions live in kernels_reference.hpp.

#include <algorithm>
#include <span>
#include <type_traits>
#include <vector>

#include "uex/core/conv_geom.hpp"

namespace uex::kernels {

namespace detail {
// Output columns [lo, hi) whose input column ow*stride - pad + kw lies in [0, in_w).
inline void valid_cols(int in_w, int out_w, int stride, int pad, int kw, int& lo, int& hi) {
  const int off = kw - pad;
  lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
  hi = (in_w - 1 - off) < 0 ? 0 : std::min(out_w, (in_w - 1 - off) / stride + 1);
}
}  // namespace detail

namespace detail {

constexpr long kColBlock = 512;

template <class T>
inline void axpy(T* __restrict y, const T* __restrict x, T a, long n) {
  if constexpr (std::is_arithmetic_v<T>) {
#pragma omp simd
    for (long i = 0; i < n; ++i) y[i] += a * x[i];
  } else {
    for (long i = 0; i < n; ++i) y[i] += a * x[i];
  }
}

template <class T>
inline T dot(const T* __restrict a, const T* __restrict b, long n) {
  T acc = T(0);
  if constexpr (std::is_arithmetic_v<T>) {
#pragma omp simd reduction(+ : acc)
    for (long i = 0; i < n; ++i) acc += a[i] * b[i];
  } else {
    for (long i = 0; i < n; ++i) acc += a[i] * b[i];
  }
  return acc;
}

// col[(ic*K+kh)*K+kw][n*OH*OW + oh*OW + ow] = padded input sample.
template <class T>
void im2col(const ConvGeom& g, const T* in, T* col) {
  const int K = g.kernel, OH = g.out_h(), OW = g.out_w();
  const long P = g.out_plane(), cols = g.batch * P;
  const int rows = g.in_ch * K * K;
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const int ic = r / (K * K), kh = (r / K) % K, kw = r % K;
    int lo, hi;
    valid_cols(g.in_w, OW, g.stride, g.pad, kw, lo, hi);
    T* dst = col + r * cols;
    std::fill(dst, dst + cols, T(0));
    for (int n = 0; n < g.batch; ++n) {
      const T* x = in + (static_cast<long>(n) * g.in_ch + ic) * g.in_plane();
      for (int oh = 0; oh < OH; ++oh) {
        const int ih = oh * g.stride - g.pad + kh;
        if (ih < 0 || ih >= g.in_h) continue;
        const T* xr = x + static_cast<long>(ih) * g.in_w + (kw - g.pad);
        T* d = dst + n * P + static_cast<long>(oh) * OW;
        for (int ow = lo; ow < hi; ++ow) d[ow] = xr[ow * g.stride];
      }
    }
  }
}

// Inverse scatter-add of im2col into a zeroed input gradient.
template <class T>
void col2im(const ConvGeom& g, const T* col, T* gin) {
  const int K = g.kernel, OH = g.out_h(), OW = g.out_w();
  const long P = g.out_plane(), cols = g.batch * P;
#pragma omp parallel for schedule(static)
  for (int ic = 0; ic < g.in_ch; ++ic) {
    for (int n = 0; n < g.batch; ++n) {
      T* gi = gin + (static_cast<long>(n) * g.in_ch + ic) * g.in_plane();
      std::fill(gi, gi + g.in_plane(), T(0));
    }
    for (int kh = 0; kh < K; ++kh)
      for (int kw = 0; kw < K; ++kw) {
        const T* src = col + ((static_cast<long>(ic) * K + kh) * K + kw) * cols;
        int lo, hi;
        valid_cols(g.in_w, OW, g.stride, g.pad, kw, lo, hi);
        for (int n = 0; n < g.batch; ++n) {
          T* gi = gin + (static_cast<long>(n) * g.in_ch + ic) * g.in_plane();
          for (int oh = 0; oh < OH; ++oh) {
            const int ih = oh * g.stride - g.pad + kh;
            if (ih < 0 || ih >= g.in_h) continue;
            T* gr = gi + static_cast<long>(ih) * g.in_w + (kw - g.pad);
            const T* s = src + n * P + static_cast<long>(oh) * OW;
            for (int ow = lo; ow < hi; ++ow) gr[ow * g.stride] += s[ow];
          }
        }
      }
  }
}

// [N, C, P] <-> [C, N*P]
template <class T>
void nchw_to_cn(const T* src, T* dst, int n, int c, long p) {
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) std::copy_n(src + (static_cast<long>(i) * c + ch) * p, p, dst + (ch * static_cast<long>(n) + i) * p);
}

template <class T>
void cn_to_nchw(const T* src, T* dst, int n, int c, long p) {
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) std::copy_n(src + (ch * static_cast<long>(n) + i) * p, p, dst + (static_cast<long>(i) * c + ch) * p);
}

}  // namespace detail

/// out[n,oc] = bias[oc] + sum_ic in[n,ic] (*) w[oc,ic]. `bias` may be empty.
/// Batched im2col followed by a column-blocked GEMM.
template <class T>
void conv2d_forward(const ConvGeom& g, std::span<const T> in, std::span<const T> w,
                    std::span<const T> bias, std::span<T> out) {
  const long P = g.out_plane(), cols = g.batch * P;
  const long rows = static_cast<long>(g.in_ch) * g.kernel * g.kernel;
  std::vector<T> col(static_cast<std::size_t>(rows * cols));
  detail::im2col(g, in.data(), col.data());
  std::vector<T> res(static_cast<std::size_t>(g.out_ch * cols));
  const long blocks = (cols + detail::kColBlock - 1) / detail::kColBlock;
#pragma omp parallel for schedule(static)
  for (long b = 0; b < blocks; ++b) {
    const long j0 = b * detail::kColBlock, len = std::min(detail::kColBlock, cols - j0);
    for (int oc = 0; oc < g.out_ch; ++oc) {
      T* o = res.data() + oc * cols + j0;
      std::fill(o, o + len, bias.empty() ? T(0) : bias[oc]);
      const T* wr = w.data() + oc * rows;
      for (long r = 0; r < rows; ++r) detail::axpy(o, col.data() + r * cols + j0, wr[r], len);
    }
  }
  detail::cn_to_nchw(res.data(), out.data(), g.batch, g.out_ch, P);
}

/// gin = d(loss)/d(in) given gout. Overwrites gin.
template <class T>
void conv2d_backward_input(const ConvGeom& g, std::span<const T> gout, std::span<const T> w,
                           std::span<T> gin) {
  const long P = g.out_plane(), cols = g.batch * P;
  const long rows = static_cast<long>(g.in_ch) * g.kernel * g.kernel;
  std::vector<T> go(static_cast<std::size_t>(g.out_ch * cols));
  detail::nchw_to_cn(gout.data(), go.data(), g.batch, g.out_ch, P);
  std::vector<T> dcol(static_cast<std::size_t>(rows * cols));
  const long blocks = (cols + detail::kColBlock - 1) / detail::kColBlock;
#pragma omp parallel for schedule(static)
  for (long b = 0; b < blocks; ++b) {
    const long j0 = b * detail::kColBlock, len = std::min(detail::kColBlock, cols - j0);
    for (long r = 0; r < rows; ++r) {
      T* d = dcol.data() + r * cols + j0;
      std::fill(d, d + len, T(0));
      for (int oc = 0; oc < g.out_ch; ++oc) detail::axpy(d, go.data() + oc * cols + j0, w[oc * rows + r], len);
    }
  }
  detail::col2im(g, dcol.data(), gin.data());
}

/// Accumulates weight and bias gradients. `gbias` may be empty.
template <class T>
void conv2d_backward_weight(const ConvGeom& g, std::span<const T> in, std::span<const T> gout,
                            std::span<T> gw, std::span<T> gbias) {
  const long P = g.out_plane(), cols = g.batch * P;
  const long rows = static_cast<long>(g.in_ch) * g.kernel * g.kernel;
  std::vector<T> col(static_cast<std::size_t>(rows * cols));
  detail::im2col(g, in.data(), col.data());
  std::vector<T> go(static_cast<std::size_t>(g.out_ch * cols));
  detail::nchw_to_cn(gout.data(), go.data(), g.batch, g.out_ch, P);
#pragma omp parallel for schedule(static)
  for (int oc = 0; oc < g.out_ch; ++oc) {
    const T* gr = go.data() + oc * cols;
    if (!gbias.empty()) {
      T acc = T(0);
      for (long j = 0; j < cols; ++j) acc += gr[j];
      gbias[oc] += acc;
    }
    for (long r = 0; r < rows; ++r) gw[oc * rows + r] += detail::dot(gr, col.data() + r * cols, cols);
  }
}

/// y[n,o] = b[o] + sum_i w[o,i] x[n,i]. `b` may be empty.
template <class T>
void linear_forward(int batch, int in_f, int out_f, std::span<const T> x, std::span<const T> w,
                    std::span<const T> b, std::span<T> y) {
#pragma omp parallel for schedule(static)
  for (int n = 0; n < batch; ++n) {
    const T* xr = x.data() + static_cast<long>(n) * in_f;
    for (int o = 0; o < out_f; ++o) {
      const T* wr = w.data() + static_cast<long>(o) * in_f;
      T acc = b.empty() ? T(0) : b[o];
      for (int i = 0; i < in_f; ++i) acc += wr[i] * xr[i];
      y[static_cast<long>(n) * out_f + o] = acc;
    }
  }
}

template <class T>
void linear_backward_input(int batch, int in_f, int out_f, std::span<const T> gy,
                           std::span<const T> w, std::span<T> gx) {
#pragma omp parallel for schedule(static)
  for (int n = 0; n < batch; ++n) {
    T* gr = gx.data() + static_cast<long>(n) * in_f;
    std::fill(gr, gr + in_f, T(0));
    for (int o = 0; o < out_f; ++o) {
      const T gv = gy[static_cast<long>(n) * out_f + o];
      const T* wr = w.data() + static_cast<long>(o) * in_f;
      for (int i = 0; i < in_f; ++i) gr[i] += gv * wr[i];
    }
  }
}

template <class T>
void linear_backward_weight(int batch, int in_f, int out_f, std::span<const T> x,
                            std::span<const T> gy, std::span<T> gw, std::span<T> gb) {
#pragma omp parallel for schedule(static)
  for (int o = 0; o < out_f; ++o) {
    T* gr = gw.data() + static_cast<long>(o) * in_f;
    for (int n = 0; n < batch; ++n) {
      const T gv = gy[static_cast<long>(n) * out_f + o];
      const T* xr = x.data() + static_cast<long>(n) * in_f;
      for (int i = 0; i < in_f; ++i) gr[i] += gv * xr[i];
      if (!gb.empty()) gb[o] += gv;
    }
  }
}

}  // namespace uex::kernels
