#include "uex/generator/generator.hpp"

#include <algorithm>
#include <cmath>

#include "uex/core/kernels.hpp"
#include "uex/core/rng.hpp"

namespace uex {

using kernels::ConvGeom;

struct Generator::Op {
  enum Kind { conv, conv_t, inst_norm, batch_norm, relu, reflect_pad, res_begin, res_end };
  Kind kind;
  int cin = 0, cout = 0, k = 0, stride = 1, pad = 0, out_pad = 0;
  std::size_t w = 0, b = 0, run = 0;
};

namespace {

constexpr float kNormEps = 1e-5f;
constexpr float kBnMomentum = 0.1f;

// The conv whose input-gradient is this transposed conv's forward.
ConvGeom adjoint_geom(const Generator::Op& op, int n, int h, int w) {
  const int oh = (h - 1) * op.stride - 2 * op.pad + op.k + op.out_pad;
  const int ow = (w - 1) * op.stride - 2 * op.pad + op.k + op.out_pad;
  return ConvGeom{n, op.cout, oh, ow, op.cin, op.k, op.stride, op.pad};
}

}  // namespace

Generator::Generator(const GeneratorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  require(cfg.base_width >= 1 && cfg.residual_blocks >= 0 && cfg.channels >= 1, "bad generator config");
  require(cfg.height % 4 == 0 && cfg.width % 4 == 0 && cfg.height >= 8 && cfg.width >= 8,
          "generator needs image sides divisible by 4");
  const int w = cfg.base_width;
  int idx = 0;
  auto name = [&](const char* what) { return "g" + std::to_string(idx) + "." + what; };
  auto add_conv = [&](Op::Kind kind, int cin, int cout, int k, int stride, int pad, int out_pad) {
    Op op{kind, cin, cout, k, stride, pad, out_pad};
    const float sd = std::sqrt(2.0f / static_cast<float>((kind == Op::conv ? cin : cout) * k * k));
    if (kind == Op::conv) {
      layout_.add("generator", name("weight"), {cout, cin, k, k}, sd);
    } else {
      layout_.add("generator", name("weight"), {cin, cout, k, k}, sd);
    }
    op.w = layout_.entries().back().offset;
    layout_.add("generator", name("bias"), {cout}, 0.0f);
    op.b = layout_.entries().back().offset;
    ops_.push_back(op);
    ++idx;
  };
  auto add_norm = [&](Op::Kind kind, int ch) {
    Op op{kind, ch, ch};
    layout_.add("generator", name("gamma"), {ch}, 0.0f, 1.0f);
    op.w = layout_.entries().back().offset;
    layout_.add("generator", name("beta"), {ch}, 0.0f);
    op.b = layout_.entries().back().offset;
    if (kind == Op::batch_norm) {
      op.run = running_.size();
      running_.insert(running_.end(), static_cast<std::size_t>(ch), 0.0f);
      running_.insert(running_.end(), static_cast<std::size_t>(ch), 1.0f);
    }
    ops_.push_back(op);
    ++idx;
  };
  auto simple = [&](Op::Kind kind) {
    ops_.push_back(Op{kind});
    ++idx;
  };

  const int down_ch[6] = {w, w, 2 * w, 2 * w, 4 * w, 4 * w};
  const int down_stride[6] = {1, 1, 2, 1, 2, 1};
  int c = cfg.channels;
  for (int i = 0; i < 6; ++i) {
    add_conv(Op::conv, c, down_ch[i], 3, down_stride[i], 1, 0);
    add_norm(Op::inst_norm, down_ch[i]);
    simple(Op::relu);
    c = down_ch[i];
  }
  for (int r = 0; r < cfg.residual_blocks; ++r) {
    simple(Op::res_begin);
    simple(Op::reflect_pad);
    add_conv(Op::conv, c, c, 3, 1, 0, 0);
    add_norm(Op::batch_norm, c);
    simple(Op::relu);
    simple(Op::reflect_pad);
    add_conv(Op::conv, c, c, 3, 1, 0, 0);
    add_norm(Op::batch_norm, c);
    simple(Op::res_end);
  }
  const int up_ch[5] = {4 * w, 2 * w, 2 * w, w, w};
  const int up_stride[5] = {1, 2, 1, 1, 1};
  for (int i = 0; i < 5; ++i) {
    add_conv(Op::conv_t, c, up_ch[i], 3, up_stride[i], 1, up_stride[i] - 1);
    add_norm(Op::inst_norm, up_ch[i]);
    simple(Op::relu);
    c = up_ch[i];
  }
  add_conv(Op::conv_t, c, cfg.channels, 6, 2, 2, 0);

  params_.assign(layout_.total(), 0.0f);
  const Rng root(seed);
  for (const auto& e : layout_.entries()) {
    auto dst = std::span(params_).subspan(e.offset, e.size);
    if (e.init_std == 0.0f) {
      std::fill(dst.begin(), dst.end(), e.init_value);
    } else {
      Rng rng = root.fork(fnv1a(e.name));
      for (auto& v : dst) v = static_cast<float>(rng.normal(0.0, e.init_std));
    }
  }
}

Generator::~Generator() = default;
Generator::Generator(const Generator&) = default;
Generator& Generator::operator=(const Generator&) = default;
Generator::Generator(Generator&&) noexcept = default;
Generator& Generator::operator=(Generator&&) noexcept = default;

void Generator::zero_output_layer() {
  const Op& last = ops_.back();
  std::fill_n(params_.begin() + static_cast<long>(last.w), static_cast<long>(last.cin) * last.cout * last.k * last.k, 0.0f);
  std::fill_n(params_.begin() + static_cast<long>(last.b), last.cout, 0.0f);
}

Tensor<float> Generator::forward(const Tensor<float>& input, double epsilon, bool train, Tape* tape) {
  require(input.shape().rank() == 4 && input.dim(1) == cfg_.channels && input.dim(2) == cfg_.height &&
              input.dim(3) == cfg_.width,
          "generator input " + input.shape().str() + " does not match its configuration");
  require(epsilon > 0.0, "epsilon must be positive");
  const int n = input.dim(0);
  Tensor<float> x = input;
  std::vector<Tensor<float>> skips;
  if (tape) {
    tape->inputs.clear();
    tape->aux.clear();
    tape->epsilon = epsilon;
  }
  for (const Op& op : ops_) {
    const int c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const long plane = static_cast<long>(h) * w;
    Tensor<float> aux;
    Tensor<float> y;
    switch (op.kind) {
      case Op::conv: {
        const ConvGeom g{n, op.cin, h, w, op.cout, op.k, op.stride, op.pad};
        y = Tensor<float>(Shape{n, op.cout, g.out_h(), g.out_w()});
        kernels::conv2d_forward<float>(g, x.span(), std::span<const float>(params_).subspan(op.w, static_cast<std::size_t>(g.weight_size())),
                                       std::span<const float>(params_).subspan(op.b, static_cast<std::size_t>(op.cout)), y.span());
        break;
      }
      case Op::conv_t: {
        const ConvGeom g = adjoint_geom(op, n, h, w);
        y = Tensor<float>(Shape{n, op.cout, g.in_h, g.in_w});
        kernels::conv2d_backward_input<float>(g, x.span(),
                                              std::span<const float>(params_).subspan(op.w, static_cast<std::size_t>(g.weight_size())),
                                              y.span());
        const long p = g.in_plane();
        for (int i = 0; i < n; ++i)
          for (int ch = 0; ch < op.cout; ++ch) {
            float* dst = y.data() + (static_cast<long>(i) * op.cout + ch) * p;
            const float bv = params_[op.b + static_cast<std::size_t>(ch)];
            for (long j = 0; j < p; ++j) dst[j] += bv;
          }
        break;
      }
      case Op::inst_norm:
      case Op::batch_norm: {
        y = Tensor<float>(x.shape());
        aux = Tensor<float>(Shape{n * c + c});  // inv std per (n,c) or per c
        const bool inst = op.kind == Op::inst_norm;
        const bool use_running = !inst && !train;
        for (int ch = 0; ch < c; ++ch) {
          const float gamma = params_[op.w + static_cast<std::size_t>(ch)], beta = params_[op.b + static_cast<std::size_t>(ch)];
          auto normalize = [&](int i0, int i1) {
            double mean = 0.0, var = 0.0;
            const double cnt = static_cast<double>(i1 - i0) * static_cast<double>(plane);
            if (use_running) {
              mean = running_[op.run + static_cast<std::size_t>(ch)];
              var = running_[op.run + static_cast<std::size_t>(c + ch)];
            } else {
              for (int i = i0; i < i1; ++i) {
                const float* src = x.data() + (static_cast<long>(i) * c + ch) * plane;
                for (long j = 0; j < plane; ++j) mean += src[j];
              }
              mean /= cnt;
              for (int i = i0; i < i1; ++i) {
                const float* src = x.data() + (static_cast<long>(i) * c + ch) * plane;
                for (long j = 0; j < plane; ++j) var += (src[j] - mean) * (src[j] - mean);
              }
              var /= cnt;
              if (!inst && train) {
                auto& rm = running_[op.run + static_cast<std::size_t>(ch)];
                auto& rv = running_[op.run + static_cast<std::size_t>(c + ch)];
                rm = (1.0f - kBnMomentum) * rm + kBnMomentum * static_cast<float>(mean);
                rv = (1.0f - kBnMomentum) * rv + kBnMomentum * static_cast<float>(cnt > 1 ? var * cnt / (cnt - 1) : var);
              }
            }
            const float inv = static_cast<float>(1.0 / std::sqrt(var + kNormEps));
            for (int i = i0; i < i1; ++i) {
              const long off = (static_cast<long>(i) * c + ch) * plane;
              for (long j = 0; j < plane; ++j) y[static_cast<std::size_t>(off + j)] = gamma * (x[static_cast<std::size_t>(off + j)] - static_cast<float>(mean)) * inv + beta;
            }
            return inv;
          };
          if (inst) {
            for (int i = 0; i < n; ++i) aux[static_cast<std::size_t>(i * c + ch)] = normalize(i, i + 1);
          } else {
            aux[static_cast<std::size_t>(n * c + ch)] = normalize(0, n);
          }
        }
        if (use_running) aux = Tensor<float>(Shape{1}, {-1.0f});  // marks eval-mode BN
        break;
      }
      case Op::relu:
        y = x;
        for (auto& v : y.vec()) v = std::max(v, 0.0f);
        break;
      case Op::reflect_pad: {
        y = Tensor<float>(Shape{n, c, h + 2, w + 2});
        for (int i = 0; i < n * c; ++i) {
          const float* src = x.data() + static_cast<long>(i) * plane;
          float* dst = y.data() + static_cast<long>(i) * (h + 2) * (w + 2);
          for (int yy = 0; yy < h + 2; ++yy) {
            const int sy = yy == 0 ? 1 : (yy == h + 1 ? h - 2 : yy - 1);
            for (int xx = 0; xx < w + 2; ++xx) {
              const int sx = xx == 0 ? 1 : (xx == w + 1 ? w - 2 : xx - 1);
              dst[yy * (w + 2) + xx] = src[sy * w + sx];
            }
          }
        }
        break;
      }
      case Op::res_begin:
        skips.push_back(x);
        y = x;
        break;
      case Op::res_end:
        y = x;
        for (std::size_t i = 0; i < y.size(); ++i) y[i] += skips.back()[i];
        skips.pop_back();
        break;
    }
    if (tape) {
      tape->inputs.push_back(std::move(x));
      tape->aux.push_back(std::move(aux));
    }
    x = std::move(y);
  }
  const float eps = static_cast<float>(epsilon);
  for (auto& v : x.vec()) v = std::tanh(v);
  if (tape) tape->squashed = x;
  for (auto& v : x.vec()) v = std::clamp(eps * v, -eps, eps);
  return x;
}

std::vector<float> Generator::backward(const Tape& tape, const Tensor<float>& grad_delta) const {
  require(grad_delta.shape() == tape.squashed.shape(), "gradient shape does not match the generator output");
  std::vector<float> grads(params_.size(), 0.0f);
  const float eps = static_cast<float>(tape.epsilon);
  Tensor<float> g = grad_delta;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const float t = tape.squashed[i];
    g[i] *= eps * (1.0f - t * t);
  }
  std::vector<Tensor<float>> skip_grads;
  for (std::size_t oi = ops_.size(); oi-- > 0;) {
    const Op& op = ops_[oi];
    const Tensor<float>& x = tape.inputs[oi];
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const long plane = static_cast<long>(h) * w;
    Tensor<float> gx(x.shape());
    switch (op.kind) {
      case Op::conv: {
        const ConvGeom gm{n, op.cin, h, w, op.cout, op.k, op.stride, op.pad};
        kernels::conv2d_backward_weight<float>(gm, x.span(), g.span(), std::span(grads).subspan(op.w, static_cast<std::size_t>(gm.weight_size())),
                                               std::span(grads).subspan(op.b, static_cast<std::size_t>(op.cout)));
        kernels::conv2d_backward_input<float>(gm, g.span(), std::span<const float>(params_).subspan(op.w, static_cast<std::size_t>(gm.weight_size())),
                                              gx.span());
        break;
      }
      case Op::conv_t: {
        const ConvGeom gm = adjoint_geom(op, n, h, w);
        kernels::conv2d_backward_weight<float>(gm, g.span(), x.span(), std::span(grads).subspan(op.w, static_cast<std::size_t>(gm.weight_size())), {});
        const long p = gm.in_plane();
        for (int i = 0; i < n; ++i)
          for (int ch = 0; ch < op.cout; ++ch) {
            const float* src = g.data() + (static_cast<long>(i) * op.cout + ch) * p;
            float acc = 0.0f;
            for (long j = 0; j < p; ++j) acc += src[j];
            grads[op.b + static_cast<std::size_t>(ch)] += acc;
          }
        kernels::conv2d_forward<float>(gm, g.span(), std::span<const float>(params_).subspan(op.w, static_cast<std::size_t>(gm.weight_size())), {},
                                       gx.span());
        break;
      }
      case Op::inst_norm:
      case Op::batch_norm: {
        const Tensor<float>& aux = tape.aux[oi];
        const bool inst = op.kind == Op::inst_norm;
        const bool eval_bn = !inst && aux.size() == 1;
        for (int ch = 0; ch < c; ++ch) {
          const float gamma = params_[op.w + static_cast<std::size_t>(ch)];
          if (eval_bn) {
            const double mean = running_[op.run + static_cast<std::size_t>(ch)];
            const float inv = static_cast<float>(1.0 / std::sqrt(running_[op.run + static_cast<std::size_t>(c + ch)] + kNormEps));
            double gg = 0.0, gb = 0.0;
            for (int i = 0; i < n; ++i) {
              const long off = (static_cast<long>(i) * c + ch) * plane;
              for (long j = 0; j < plane; ++j) {
                const float dy = g[static_cast<std::size_t>(off + j)];
                gb += dy;
                gg += dy * (x[static_cast<std::size_t>(off + j)] - mean) * inv;
                gx[static_cast<std::size_t>(off + j)] = dy * gamma * inv;
              }
            }
            grads[op.w + static_cast<std::size_t>(ch)] += static_cast<float>(gg);
            grads[op.b + static_cast<std::size_t>(ch)] += static_cast<float>(gb);
            continue;
          }
          auto back = [&](int i0, int i1, float inv) {
            const double cnt = static_cast<double>(i1 - i0) * static_cast<double>(plane);
            double mean = 0.0;
            for (int i = i0; i < i1; ++i) {
              const long off = (static_cast<long>(i) * c + ch) * plane;
              for (long j = 0; j < plane; ++j) mean += x[static_cast<std::size_t>(off + j)];
            }
            mean /= cnt;
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (int i = i0; i < i1; ++i) {
              const long off = (static_cast<long>(i) * c + ch) * plane;
              for (long j = 0; j < plane; ++j) {
                const double xhat = (x[static_cast<std::size_t>(off + j)] - mean) * inv;
                const double dy = g[static_cast<std::size_t>(off + j)];
                sum_dy += dy;
                sum_dy_xhat += dy * xhat;
              }
            }
            grads[op.w + static_cast<std::size_t>(ch)] += static_cast<float>(sum_dy_xhat);
            grads[op.b + static_cast<std::size_t>(ch)] += static_cast<float>(sum_dy);
            const double m1 = sum_dy / cnt, m2 = sum_dy_xhat / cnt;
            for (int i = i0; i < i1; ++i) {
              const long off = (static_cast<long>(i) * c + ch) * plane;
              for (long j = 0; j < plane; ++j) {
                const double xhat = (x[static_cast<std::size_t>(off + j)] - mean) * inv;
                gx[static_cast<std::size_t>(off + j)] =
                    static_cast<float>(gamma * inv * (g[static_cast<std::size_t>(off + j)] - m1 - xhat * m2));
              }
            }
          };
          if (inst) {
            for (int i = 0; i < n; ++i) back(i, i + 1, aux[static_cast<std::size_t>(i * c + ch)]);
          } else {
            back(0, n, aux[static_cast<std::size_t>(n * c + ch)]);
          }
        }
        break;
      }
      case Op::relu:
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = x[i] > 0.0f ? g[i] : 0.0f;
        break;
      case Op::reflect_pad: {
        // g has shape [n, c, h+2, w+2]
        for (int i = 0; i < n * c; ++i) {
          const float* src = g.data() + static_cast<long>(i) * (h + 2) * (w + 2);
          float* dst = gx.data() + static_cast<long>(i) * plane;
          for (int yy = 0; yy < h + 2; ++yy) {
            const int sy = yy == 0 ? 1 : (yy == h + 1 ? h - 2 : yy - 1);
            for (int xx = 0; xx < w + 2; ++xx) {
              const int sx = xx == 0 ? 1 : (xx == w + 1 ? w - 2 : xx - 1);
              dst[sy * w + sx] += src[yy * (w + 2) + xx];
            }
          }
        }
        break;
      }
      case Op::res_end:
        skip_grads.push_back(g);
        gx = g;
        break;
      case Op::res_begin:
        gx = g;
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += skip_grads.back()[i];
        skip_grads.pop_back();
        break;
    }
    g = std::move(gx);
  }
  return grads;
}

Tensor<float> generate(Generator& gen, const Tensor<float>& images, const Rational& epsilon) {
  return gen.forward(images, epsilon.value(), false);
}

void project_linf(std::span<float> delta, double epsilon) {
  require(epsilon > 0.0, "epsilon must be positive");
  const float e = static_cast<float>(epsilon);
  for (auto& v : delta) v = std::clamp(v, -e, e);
}

Tensor<float> project_linf(Tensor<float> delta, double epsilon) {
  project_linf(delta.span(), epsilon);
  return delta;
}

PerturbationBank aggregate_classwise(const Tensor<float>& per_sample, std::span<const int> labels,
                                     PerturbationBank bank, double momentum) {
  require(momentum >= 0.0 && momentum < 1.0, "momentum must lie in [0, 1)");
  require(per_sample.dim(0) == static_cast<int>(labels.size()), "one label per sample delta required");
  require(per_sample.shape().inner() == bank.deltas.shape().inner(), "sample delta shape does not match bank");
  const int k = bank.class_count();
  const std::size_t inner = per_sample.shape().inner();
  std::vector<double> sum(static_cast<std::size_t>(k) * inner, 0.0);
  std::vector<int> count(static_cast<std::size_t>(k), 0);
  for (std::size_t b = 0; b < labels.size(); ++b) {
    const int y = labels[b];
    require(y >= 0 && y < k, "label " + std::to_string(y) + " out of range");
    ++count[static_cast<std::size_t>(y)];
    const auto d = per_sample.row(static_cast<int>(b));
    double* acc = sum.data() + static_cast<std::size_t>(y) * inner;
    for (std::size_t i = 0; i < inner; ++i) acc[i] += d[i];
  }
  for (int y = 0; y < k; ++y) {
    if (!count[static_cast<std::size_t>(y)]) continue;
    auto dst = bank.deltas.row(y);
    const double* acc = sum.data() + static_cast<std::size_t>(y) * inner;
    for (std::size_t i = 0; i < inner; ++i)
      dst[i] = static_cast<float>(momentum * dst[i] + (1.0 - momentum) * acc[i] / count[static_cast<std::size_t>(y)]);
    project_linf(dst, bank.epsilon.value());
  }
  return bank;
}

}  // namespace uex
