#include "uex/models/network.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "uex/core/kernels.hpp"

namespace uex {

namespace {

using kernels::ConvGeom;

template <class T>
void relu_inplace(Tensor<T>& t) {
  for (auto& v : t.vec())
    if (!(v > T(0))) v = T(0);
}

// d *= (y > 0)
template <class T>
void relu_mask(Tensor<T>& d, const Tensor<T>& y) {
  for (std::size_t i = 0; i < d.size(); ++i)
    if (!(y[i] > T(0))) d[i] = T(0);
}

constexpr double kGroupNormEps = 1e-5;

int norm_groups(int channels) { return std::gcd(channels, 4); }

// y = gamma * (x - mean) / sqrt(var + eps) + beta, statistics per (sample, channel group).
template <class T>
void group_norm_forward(const Tensor<T>& x, int groups, std::span<const T> gamma, std::span<const T> beta, Tensor<T>& y) {
  using std::sqrt;
  const int n = x.dim(0), c = x.dim(1), cg = c / groups;
  const long plane = static_cast<long>(x.dim(2)) * x.dim(3), len = cg * plane;
  y = Tensor<T>(x.shape());
#pragma omp parallel for schedule(static)
  for (int ng = 0; ng < n * groups; ++ng) {
    const T* src = x.data() + static_cast<long>(ng) * len;
    T* dst = y.data() + static_cast<long>(ng) * len;
    T mean = T(0), var = T(0);
    for (long j = 0; j < len; ++j) mean += src[j];
    mean = mean / T(static_cast<float>(len));
    for (long j = 0; j < len; ++j) var += (src[j] - mean) * (src[j] - mean);
    const T inv = T(1) / sqrt(var / T(static_cast<float>(len)) + T(kGroupNormEps));
    const int c0 = (ng % groups) * cg;
    for (int ch = 0; ch < cg; ++ch) {
      const T ga = gamma[static_cast<std::size_t>(c0 + ch)] * inv, be = beta[static_cast<std::size_t>(c0 + ch)];
      for (long j = ch * plane; j < (ch + 1) * plane; ++j) dst[j] = (src[j] - mean) * ga + be;
    }
  }
}

// Accumulates gamma/beta gradients; overwrites dx.
template <class T>
void group_norm_backward(const Tensor<T>& x, int groups, std::span<const T> gamma, const Tensor<T>& dy,
                         std::span<T> dgamma, std::span<T> dbeta, Tensor<T>& dx) {
  using std::sqrt;
  const int n = x.dim(0), c = x.dim(1), cg = c / groups;
  const long plane = static_cast<long>(x.dim(2)) * x.dim(3), len = cg * plane;
  dx = Tensor<T>(x.shape());
  // Per-sample partial sums for gamma/beta, reduced afterwards in sample order.
  std::vector<T> pg(static_cast<std::size_t>(n) * c, T(0)), pb(static_cast<std::size_t>(n) * c, T(0));
#pragma omp parallel for schedule(static)
  for (int ng = 0; ng < n * groups; ++ng) {
    const T* src = x.data() + static_cast<long>(ng) * len;
    const T* g = dy.data() + static_cast<long>(ng) * len;
    T* out = dx.data() + static_cast<long>(ng) * len;
    T mean = T(0), var = T(0);
    for (long j = 0; j < len; ++j) mean += src[j];
    mean = mean / T(static_cast<float>(len));
    for (long j = 0; j < len; ++j) var += (src[j] - mean) * (src[j] - mean);
    const T inv = T(1) / sqrt(var / T(static_cast<float>(len)) + T(kGroupNormEps));
    const int i = ng / groups, c0 = (ng % groups) * cg;
    T m1 = T(0), m2 = T(0);
    for (int ch = 0; ch < cg; ++ch) {
      const T ga = gamma[static_cast<std::size_t>(c0 + ch)];
      T sg = T(0), sb = T(0);
      for (long j = ch * plane; j < (ch + 1) * plane; ++j) {
        const T xhat = (src[j] - mean) * inv;
        sb += g[j];
        sg += g[j] * xhat;
        m1 += g[j] * ga;
        m2 += g[j] * ga * xhat;
      }
      pg[static_cast<std::size_t>(i) * c + c0 + ch] = sg;
      pb[static_cast<std::size_t>(i) * c + c0 + ch] = sb;
    }
    m1 = m1 / T(static_cast<float>(len));
    m2 = m2 / T(static_cast<float>(len));
    for (int ch = 0; ch < cg; ++ch) {
      const T ga = gamma[static_cast<std::size_t>(c0 + ch)];
      for (long j = ch * plane; j < (ch + 1) * plane; ++j) {
        const T xhat = (src[j] - mean) * inv;
        out[j] = inv * (g[j] * ga - m1 - xhat * m2);
      }
    }
  }
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      dgamma[static_cast<std::size_t>(ch)] += pg[static_cast<std::size_t>(i) * c + ch];
      dbeta[static_cast<std::size_t>(ch)] += pb[static_cast<std::size_t>(i) * c + ch];
    }
}

// Tape layout: [0] input, [1] stem conv, [2] stem output, then per block
// conv1, relu(gn1), conv2, shortcut conv (empty in block 1), block output.
template <class T>
class RnMini final : public Network<T> {
 public:
  RnMini(const ArchSpec& arch, int classes) : Network<T>(make_layout(arch, classes), classes), arch_(arch) {
    for (const auto& e : this->layout_.entries()) offsets_[e.name] = e;
  }

  Tape<T> forward(std::span<const T> p, const Tensor<T>& x) const override {
    const int n = x.dim(0);
    require(x.shape().rank() == 4 && x.dim(1) == arch_.channels && x.dim(2) == arch_.height && x.dim(3) == arch_.width,
            "input " + x.shape().str() + " does not match rn-mini geometry");
    Tape<T> tape;
    tape.acts.push_back(x);
    int h = arch_.height, w = arch_.width, c = arch_.channels;
    {
      const ConvGeom g{n, c, h, w, arch_.base_width, 3, 1, 1};
      Tensor<T> conv(Shape{n, g.out_ch, h, w});
      kernels::conv2d_forward<T>(g, x.span(), param(p, "stem.conv.weight"), {}, conv.span());
      Tensor<T> a;
      group_norm_forward(conv, norm_groups(g.out_ch), param(p, "stem.gn.gamma"), param(p, "stem.gn.beta"), a);
      relu_inplace(a);
      tape.acts.push_back(std::move(conv));
      tape.acts.push_back(std::move(a));
      c = g.out_ch;
    }
    for (int b = 0; b < 4; ++b) {
      const std::string name = "block" + std::to_string(b + 1);
      const int cout = arch_.base_width << b, stride = b == 0 ? 1 : 2, groups = norm_groups(cout);
      const Tensor<T>& in = tape.acts.back();
      const ConvGeom g1{n, c, h, w, cout, 3, stride, 1};
      const int oh = g1.out_h(), ow = g1.out_w();
      Tensor<T> c1(Shape{n, cout, oh, ow});
      kernels::conv2d_forward<T>(g1, in.span(), param(p, name + ".conv1.weight"), {}, c1.span());
      Tensor<T> r1;
      group_norm_forward(c1, groups, param(p, name + ".gn1.gamma"), param(p, name + ".gn1.beta"), r1);
      relu_inplace(r1);
      const ConvGeom g2{n, cout, oh, ow, cout, 3, 1, 1};
      Tensor<T> c2(Shape{n, cout, oh, ow});
      kernels::conv2d_forward<T>(g2, r1.span(), param(p, name + ".conv2.weight"), {}, c2.span());
      Tensor<T> out;
      group_norm_forward(c2, groups, param(p, name + ".gn2.gamma"), param(p, name + ".gn2.beta"), out);
      Tensor<T> cs;
      if (b > 0) {
        const ConvGeom gs{n, c, h, w, cout, 1, stride, 0};
        cs = Tensor<T>(Shape{n, cout, oh, ow});
        kernels::conv2d_forward<T>(gs, in.span(), param(p, name + ".shortcut.weight"), {}, cs.span());
        Tensor<T> sc;
        group_norm_forward(cs, groups, param(p, name + ".gn_sc.gamma"), param(p, name + ".gn_sc.beta"), sc);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += sc[i];
      } else {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += in[i];
      }
      relu_inplace(out);
      tape.acts.push_back(std::move(c1));
      tape.acts.push_back(std::move(r1));
      tape.acts.push_back(std::move(c2));
      tape.acts.push_back(std::move(cs));
      tape.acts.push_back(std::move(out));
      c = cout;
      h = oh;
      w = ow;
    }
    const Tensor<T>& last = tape.acts.back();
    tape.features = Tensor<T>(Shape{n, c});
    const T inv = T(1) / T(static_cast<float>(h * w));
    for (int i = 0; i < n * c; ++i) {
      T acc = T(0);
      const T* src = last.data() + static_cast<long>(i) * h * w;
      for (int j = 0; j < h * w; ++j) acc += src[j];
      tape.features[static_cast<std::size_t>(i)] = acc * inv;
    }
    tape.logits = Tensor<T>(Shape{n, this->classes_});
    kernels::linear_forward<T>(n, c, this->classes_, tape.features.span(), param(p, "head.weight"),
                               param(p, "head.bias"), tape.logits.span());
    return tape;
  }

  void backward(std::span<const T> p, const Tape<T>& tape, const Tensor<T>& dlogits, std::span<T> gp,
                Tensor<T>* gx) const override {
    const int n = dlogits.dim(0), k = this->classes_;
    const int c4 = tape.features.dim(1);
    Tensor<T> dfeat(Shape{n, c4});
    kernels::linear_backward_weight<T>(n, c4, k, tape.features.span(), dlogits.span(), grad(gp, "head.weight"),
                                       grad(gp, "head.bias"));
    kernels::linear_backward_input<T>(n, c4, k, dlogits.span(), param(p, "head.weight"), dfeat.span());

    const Tensor<T>& last = tape.acts.back();
    Tensor<T> dout(last.shape());
    const int plane = last.dim(2) * last.dim(3);
    const T inv = T(1) / T(static_cast<float>(plane));
    for (int i = 0; i < n * c4; ++i)
      for (int j = 0; j < plane; ++j) dout[static_cast<std::size_t>(i) * plane + j] = dfeat[static_cast<std::size_t>(i)] * inv;

    for (int b = 3; b >= 0; --b) {
      const std::string name = "block" + std::to_string(b + 1);
      const std::size_t base = 3 + 5 * static_cast<std::size_t>(b);
      const Tensor<T>& in = tape.acts[base - 1];
      const Tensor<T>& c1 = tape.acts[base];
      const Tensor<T>& r1 = tape.acts[base + 1];
      const Tensor<T>& c2 = tape.acts[base + 2];
      const Tensor<T>& cs = tape.acts[base + 3];
      const Tensor<T>& out = tape.acts[base + 4];
      const int cin = in.dim(1), h = in.dim(2), w = in.dim(3), cout = out.dim(1);
      const int stride = b == 0 ? 1 : 2, groups = norm_groups(cout);
      relu_mask(dout, out);

      Tensor<T> dc2;
      group_norm_backward(c2, groups, param(p, name + ".gn2.gamma"), dout, grad(gp, name + ".gn2.gamma"),
                          grad(gp, name + ".gn2.beta"), dc2);
      const ConvGeom g2{n, cout, out.dim(2), out.dim(3), cout, 3, 1, 1};
      kernels::conv2d_backward_weight<T>(g2, r1.span(), dc2.span(), grad(gp, name + ".conv2.weight"), {});
      Tensor<T> dr1(r1.shape());
      kernels::conv2d_backward_input<T>(g2, dc2.span(), param(p, name + ".conv2.weight"), dr1.span());
      relu_mask(dr1, r1);
      Tensor<T> dc1;
      group_norm_backward(c1, groups, param(p, name + ".gn1.gamma"), dr1, grad(gp, name + ".gn1.gamma"),
                          grad(gp, name + ".gn1.beta"), dc1);
      const ConvGeom g1{n, cin, h, w, cout, 3, stride, 1};
      kernels::conv2d_backward_weight<T>(g1, in.span(), dc1.span(), grad(gp, name + ".conv1.weight"), {});
      Tensor<T> din(in.shape());
      kernels::conv2d_backward_input<T>(g1, dc1.span(), param(p, name + ".conv1.weight"), din.span());
      if (b > 0) {
        Tensor<T> dcs;
        group_norm_backward(cs, groups, param(p, name + ".gn_sc.gamma"), dout, grad(gp, name + ".gn_sc.gamma"),
                            grad(gp, name + ".gn_sc.beta"), dcs);
        const ConvGeom gs{n, cin, h, w, cout, 1, stride, 0};
        kernels::conv2d_backward_weight<T>(gs, in.span(), dcs.span(), grad(gp, name + ".shortcut.weight"), {});
        Tensor<T> dsc(in.shape());
        kernels::conv2d_backward_input<T>(gs, dcs.span(), param(p, name + ".shortcut.weight"), dsc.span());
        for (std::size_t i = 0; i < din.size(); ++i) din[i] += dsc[i];
      } else {
        for (std::size_t i = 0; i < din.size(); ++i) din[i] += dout[i];
      }
      dout = std::move(din);
    }
    relu_mask(dout, tape.acts[2]);
    Tensor<T> dc0;
    group_norm_backward(tape.acts[1], norm_groups(arch_.base_width), param(p, "stem.gn.gamma"), dout,
                        grad(gp, "stem.gn.gamma"), grad(gp, "stem.gn.beta"), dc0);
    const Tensor<T>& x = tape.acts[0];
    const ConvGeom g0{n, arch_.channels, arch_.height, arch_.width, arch_.base_width, 3, 1, 1};
    kernels::conv2d_backward_weight<T>(g0, x.span(), dc0.span(), grad(gp, "stem.conv.weight"), {});
    if (gx) {
      *gx = Tensor<T>(x.shape());
      kernels::conv2d_backward_input<T>(g0, dc0.span(), param(p, "stem.conv.weight"), gx->span());
    }
  }

 private:
  std::span<const T> param(std::span<const T> p, const std::string& name) const {
    const auto& e = offsets_.at(name);
    return p.subspan(e.offset, e.size);
  }
  std::span<T> grad(std::span<T> g, const std::string& name) const {
    const auto& e = offsets_.at(name);
    return g.subspan(e.offset, e.size);
  }

  ArchSpec arch_;
  std::map<std::string, ParamEntry> offsets_;
};

template <class T>
class LinearNet final : public Network<T> {
 public:
  LinearNet(const ArchSpec& arch, int classes)
      : Network<T>(make_layout(arch, classes), classes), in_(arch.channels * arch.height * arch.width) {}

  Tape<T> forward(std::span<const T> p, const Tensor<T>& x) const override {
    const int n = x.dim(0);
    require(static_cast<int>(x.shape().inner()) == in_, "input " + x.shape().str() + " does not match linear model");
    Tape<T> tape;
    tape.features = Tensor<T>(Shape{n, in_}, x.vec());
    tape.logits = Tensor<T>(Shape{n, this->classes_});
    const auto w = p.subspan(0, static_cast<std::size_t>(this->classes_) * in_);
    const auto b = p.subspan(w.size(), static_cast<std::size_t>(this->classes_));
    kernels::linear_forward<T>(n, in_, this->classes_, tape.features.span(), w, b, tape.logits.span());
    tape.acts.push_back(x);
    return tape;
  }

  void backward(std::span<const T> p, const Tape<T>& tape, const Tensor<T>& dlogits, std::span<T> gp,
                Tensor<T>* gx) const override {
    const int n = dlogits.dim(0), k = this->classes_;
    const std::size_t wn = static_cast<std::size_t>(k) * in_;
    kernels::linear_backward_weight<T>(n, in_, k, tape.features.span(), dlogits.span(), gp.subspan(0, wn),
                                       gp.subspan(wn, static_cast<std::size_t>(k)));
    if (gx) {
      *gx = Tensor<T>(tape.acts[0].shape());
      kernels::linear_backward_input<T>(n, in_, k, dlogits.span(), p.subspan(0, wn), gx->span());
    }
  }

 private:
  int in_;
};

}  // namespace

template <class T>
std::unique_ptr<Network<T>> make_network(const ArchSpec& arch, int head_classes) {
  if (arch.id == "rn-mini") return std::make_unique<RnMini<T>>(arch, head_classes);
  if (arch.id == "linear") return std::make_unique<LinearNet<T>>(arch, head_classes);
  throw InvalidArgument("unknown architecture '" + arch.id + "'");
}

template <class T>
T softmax_cross_entropy(const Tensor<T>& logits, const Tensor<T>& targets, Tensor<T>* dlogits) {
  using std::exp;
  using std::log;
  require(logits.shape() == targets.shape(), "logits/targets shape mismatch");
  const int n = logits.dim(0), k = logits.dim(1);
  if (dlogits) *dlogits = Tensor<T>(logits.shape());
  T loss = T(0);
  const T inv_n = T(1) / T(static_cast<float>(n));
  for (int i = 0; i < n; ++i) {
    const T* z = logits.data() + static_cast<long>(i) * k;
    const T* t = targets.data() + static_cast<long>(i) * k;
    T m = z[0];
    for (int j = 1; j < k; ++j)
      if (z[j] > m) m = z[j];
    T sum = T(0), tsum = T(0);
    for (int j = 0; j < k; ++j) {
      sum += exp(z[j] - m);
      tsum += t[j];
    }
    const T lse = log(sum) + m;
    for (int j = 0; j < k; ++j) {
      const T logp = z[j] - lse;
      loss -= t[j] * logp;
      if (dlogits) (*dlogits)[static_cast<std::size_t>(i) * k + j] = (exp(logp) * tsum - t[j]) * inv_n;
    }
  }
  return loss * inv_n;
}

template <class T>
Tensor<T> one_hot(std::span<const int> labels, int classes) {
  Tensor<T> t(Shape{static_cast<int>(labels.size()), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] >= 0 && labels[i] < classes, "label out of range");
    t[i * classes + static_cast<std::size_t>(labels[i])] = T(1);
  }
  return t;
}

template <class T>
LossGrad<T> loss_and_grad(const Network<T>& net, std::span<const T> params, const Tensor<T>& x,
                          const Tensor<T>& targets, bool want_input_grad) {
  LossGrad<T> out;
  Tape<T> tape = net.forward(params, x);
  Tensor<T> dlogits;
  out.loss = softmax_cross_entropy(tape.logits, targets, &dlogits);
  out.gparams.assign(params.size(), T(0));
  net.backward(params, tape, dlogits, out.gparams, want_input_grad ? &out.ginput : nullptr);
  out.logits = std::move(tape.logits);
  return out;
}

#define UEX_INSTANTIATE(T)                                                                                 \
  template class Network<T>;                                                                               \
  template std::unique_ptr<Network<T>> make_network<T>(const ArchSpec&, int);                             \
  template T softmax_cross_entropy<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>*);                    \
  template Tensor<T> one_hot<T>(std::span<const int>, int);                                                \
  template LossGrad<T> loss_and_grad<T>(const Network<T>&, std::span<const T>, const Tensor<T>&,         \
                                        const Tensor<T>&, bool);

UEX_INSTANTIATE(float)
UEX_INSTANTIATE(double)
UEX_INSTANTIATE(Dual<float>)
UEX_INSTANTIATE(Dual<double>)

#undef UEX_INSTANTIATE

}  // namespace uex
