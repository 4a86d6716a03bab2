#pragma once

// Straightforward serial kernels. Used by tests and benchmarks as the ground
// truth for the parallel versions in kernels.hpp; not used on hot paths.

#include <span>

#include "uex/core/conv_geom.hpp"

namespace uex::kernels::reference {

template <class T>
void conv2d_forward(const ConvGeom& g, std::span<const T> in, std::span<const T> w,
                    std::span<const T> bias, std::span<T> out) {
  const int OH = g.out_h(), OW = g.out_w(), K = g.kernel;
  for (int n = 0; n < g.batch; ++n)
    for (int oc = 0; oc < g.out_ch; ++oc)
      for (int oh = 0; oh < OH; ++oh)
        for (int ow = 0; ow < OW; ++ow) {
          T acc = bias.empty() ? T(0) : bias[oc];
          for (int ic = 0; ic < g.in_ch; ++ic)
            for (int kh = 0; kh < K; ++kh)
              for (int kw = 0; kw < K; ++kw) {
                const int ih = oh * g.stride - g.pad + kh, iw = ow * g.stride - g.pad + kw;
                if (ih < 0 || iw < 0 || ih >= g.in_h || iw >= g.in_w) continue;
                acc += w[((oc * g.in_ch + ic) * K + kh) * K + kw] *
                       in[((n * g.in_ch + ic) * g.in_h + ih) * g.in_w + iw];
              }
          out[((n * g.out_ch + oc) * OH + oh) * OW + ow] = acc;
        }
}

template <class T>
void conv2d_backward_input(const ConvGeom& g, std::span<const T> gout, std::span<const T> w,
                           std::span<T> gin) {
  const int OH = g.out_h(), OW = g.out_w(), K = g.kernel;
  for (auto& v : gin) v = T(0);
  for (int n = 0; n < g.batch; ++n)
    for (int oc = 0; oc < g.out_ch; ++oc)
      for (int oh = 0; oh < OH; ++oh)
        for (int ow = 0; ow < OW; ++ow) {
          const T gv = gout[((n * g.out_ch + oc) * OH + oh) * OW + ow];
          for (int ic = 0; ic < g.in_ch; ++ic)
            for (int kh = 0; kh < K; ++kh)
              for (int kw = 0; kw < K; ++kw) {
                const int ih = oh * g.stride - g.pad + kh, iw = ow * g.stride - g.pad + kw;
                if (ih < 0 || iw < 0 || ih >= g.in_h || iw >= g.in_w) continue;
                gin[((n * g.in_ch + ic) * g.in_h + ih) * g.in_w + iw] +=
                    gv * w[((oc * g.in_ch + ic) * K + kh) * K + kw];
              }
        }
}

template <class T>
void conv2d_backward_weight(const ConvGeom& g, std::span<const T> in, std::span<const T> gout,
                            std::span<T> gw, std::span<T> gbias) {
  const int OH = g.out_h(), OW = g.out_w(), K = g.kernel;
  for (int n = 0; n < g.batch; ++n)
    for (int oc = 0; oc < g.out_ch; ++oc)
      for (int oh = 0; oh < OH; ++oh)
        for (int ow = 0; ow < OW; ++ow) {
          const T gv = gout[((n * g.out_ch + oc) * OH + oh) * OW + ow];
          if (!gbias.empty()) gbias[oc] += gv;
          for (int ic = 0; ic < g.in_ch; ++ic)
            for (int kh = 0; kh < K; ++kh)
              for (int kw = 0; kw < K; ++kw) {
                const int ih = oh * g.stride - g.pad + kh, iw = ow * g.stride - g.pad + kw;
                if (ih < 0 || iw < 0 || ih >= g.in_h || iw >= g.in_w) continue;
                gw[((oc * g.in_ch + ic) * K + kh) * K + kw] +=
                    gv * in[((n * g.in_ch + ic) * g.in_h + ih) * g.in_w + iw];
              }
        }
}

template <class T>
void linear_forward(int batch, int in_f, int out_f, std::span<const T> x, std::span<const T> w,
                    std::span<const T> b, std::span<T> y) {
  for (int n = 0; n < batch; ++n)
    for (int o = 0; o < out_f; ++o) {
      T acc = b.empty() ? T(0) : b[o];
      for (int i = 0; i < in_f; ++i) acc += w[o * in_f + i] * x[n * in_f + i];
      y[n * out_f + o] = acc;
    }
}

template <class T>
void linear_backward_input(int batch, int in_f, int out_f, std::span<const T> gy,
                           std::span<const T> w, std::span<T> gx) {
  for (int n = 0; n < batch; ++n)
    for (int i = 0; i < in_f; ++i) {
      T acc = T(0);
      for (int o = 0; o < out_f; ++o) acc += gy[n * out_f + o] * w[o * in_f + i];
      gx[n * in_f + i] = acc;
    }
}

template <class T>
void linear_backward_weight(int batch, int in_f, int out_f, std::span<const T> x,
                            std::span<const T> gy, std::span<T> gw, std::span<T> gb) {
  for (int n = 0; n < batch; ++n)
    for (int o = 0; o < out_f; ++o) {
      if (!gb.empty()) gb[o] += gy[n * out_f + o];
      for (int i = 0; i < in_f; ++i) gw[o * in_f + i] += gy[n * out_f + o] * x[n * in_f + i];
    }
}

}  // namespace uex::kernels::reference
