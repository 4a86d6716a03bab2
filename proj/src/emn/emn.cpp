#include "uex/emn/emn.hpp"

#include <algorithm>
#include <cmath>

#include "uex/core/digest.hpp"
#include "uex/core/rng.hpp"
#include "uex/generator/generator.hpp"
#include "uex/models/network.hpp"
#include "uex/models/training.hpp"

namespace uex {

void EmnConfig::validate() const {
  require(epsilon.positive(), "epsilon must be positive");
  require(pgd_steps >= 1, "pgd_steps must be at least 1");
  require(pgd_step_size >= 0.0, "PGD step size must be non-negative");
  require(alternations >= 1 && train_steps >= 0, "bad alternation schedule");
  require(train_lr >= 0.0, "surrogate learning rate must be non-negative");
  require(batch_size >= 1, "batch size must be positive");
}

nlohmann::json EmnConfig::to_json() const {
  return {{"epsilon", epsilon.str()},   {"pgd_steps", pgd_steps},     {"pgd_step_size", pgd_step_size},
          {"alternations", alternations}, {"train_steps", train_steps}, {"train_lr", train_lr},
          {"batch_size", batch_size},    {"stop_accuracy", stop_accuracy}, {"seed", seed}};
}

EmnConfig EmnConfig::from_json(const nlohmann::json& j) {
  EmnConfig c;
  if (j.contains("epsilon")) c.epsilon = Rational::parse(j.at("epsilon").get<std::string>());
  c.pgd_steps = j.value("pgd_steps", c.pgd_steps);
  c.pgd_step_size = j.value("pgd_step_size", c.pgd_step_size);
  c.alternations = j.value("alternations", c.alternations);
  c.train_steps = j.value("train_steps", c.train_steps);
  c.train_lr = j.value("train_lr", c.train_lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.stop_accuracy = j.value("stop_accuracy", c.stop_accuracy);
  c.seed = j.value("seed", c.seed);
  return c;
}

namespace {

Tensor<float> add_clip(const Tensor<float>& x, const Tensor<float>& delta) {
  Tensor<float> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(x[i] + delta[i], 0.0f, 1.0f);
  return out;
}

// Per-sample cross-entropy.
std::vector<double> sample_losses(const Network<float>& net, std::span<const float> params, const Tensor<float>& x,
                                  std::span<const int> labels) {
  const Tape<float> tape = net.forward(params, x);
  const int k = tape.logits.dim(1);
  std::vector<double> out(labels.size());
  for (std::size_t b = 0; b < labels.size(); ++b) {
    const auto z = tape.logits.row(static_cast<int>(b));
    double m = z[0];
    for (int j = 1; j < k; ++j) m = std::max(m, static_cast<double>(z[static_cast<std::size_t>(j)]));
    double s = 0.0;
    for (int j = 0; j < k; ++j) s += std::exp(z[static_cast<std::size_t>(j)] - m);
    out[b] = std::log(s) + m - z[static_cast<std::size_t>(labels[b])];
  }
  return out;
}

}  // namespace

void emn_pgd(const ModelState& surrogate, const ImageBatch& batch, Tensor<float>& delta, const EmnConfig& cfg) {
  cfg.validate();
  require(delta.shape() == batch.pixels.shape(), "delta shape does not match the batch");
  const auto net = make_network<float>(surrogate.arch, surrogate.head_classes);
  const Tensor<float> targets = one_hot<float>(batch.labels, surrogate.head_classes);
  const float eps = static_cast<float>(cfg.epsilon.value()), step = static_cast<float>(cfg.pgd_step_size);
  if (step == 0.0f) return;
  for (int s = 0; s < cfg.pgd_steps; ++s) {
    const LossGrad<float> lg = loss_and_grad<float>(*net, surrogate.params, add_clip(batch.pixels, delta), targets, true);
    if (!std::isfinite(lg.loss)) throw NonFiniteError("non-finite loss during PGD", -1);
    for (std::size_t i = 0; i < delta.size(); ++i) {
      const float g = lg.ginput[i];
      const float sgn = g > 0.0f ? 1.0f : (g < 0.0f ? -1.0f : 0.0f);
      const float x = batch.pixels[i];
      const float moved = std::clamp(x + delta[i] - step * sgn, 0.0f, 1.0f) - x;
      delta[i] = std::clamp(moved, -eps, eps);
    }
  }
}

EmnResult emn_craft(const SplitDataset& data, const ModelState& surrogate, const EmnConfig& cfg,
                    const EmnProgress& progress) {
  cfg.validate();
  require(surrogate.head_classes == data.class_count,
          "surrogate head has " + std::to_string(surrogate.head_classes) + " outputs but data has " +
              std::to_string(data.class_count) + " classes");
  const ImageBatch& train = data.train;
  const int n = train.size();
  const auto net = make_network<float>(surrogate.arch, surrogate.head_classes);
  EmnResult res;
  res.surrogate = surrogate;
  Tensor<float> delta(train.pixels.shape());
  const Rng root(cfg.seed);
  std::vector<int> order(static_cast<std::size_t>(n));
  int cursor = n;
  Rng rng = root.fork(0);

  for (int alt = 0; alt < cfg.alternations; ++alt) {
    for (int s = 0; s < cfg.train_steps; ++s) {
      if (cursor + cfg.batch_size > n) {
        for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
        rng.shuffle(order);
        cursor = 0;
      }
      const auto idx = std::span(order).subspan(static_cast<std::size_t>(cursor),
                                                static_cast<std::size_t>(std::min(cfg.batch_size, n)));
      cursor += cfg.batch_size;
      ImageBatch batch = gather(train, idx);
      for (std::size_t b = 0; b < idx.size(); ++b) {
        auto px = batch.pixels.row(static_cast<int>(b));
        const auto d = delta.row(idx[b]);
        for (std::size_t i = 0; i < px.size(); ++i) px[i] = std::clamp(px[i] + d[i], 0.0f, 1.0f);
      }
      const LossGrad<float> lg = loss_and_grad<float>(*net, res.surrogate.params, batch.pixels,
                                                      one_hot<float>(batch.labels, surrogate.head_classes), false);
      if (!std::isfinite(lg.loss)) throw NonFiniteError("non-finite surrogate loss", alt);
      for (std::size_t i = 0; i < lg.gparams.size(); ++i)
        res.surrogate.params[i] -= static_cast<float>(cfg.train_lr) * lg.gparams[i];
    }
    for (int lo = 0; lo < n; lo += cfg.batch_size) {
      const int hi = std::min(n, lo + cfg.batch_size);
      std::vector<int> idx(static_cast<std::size_t>(hi - lo));
      for (int i = lo; i < hi; ++i) idx[static_cast<std::size_t>(i - lo)] = i;
      const ImageBatch batch = gather(train, idx);
      Tensor<float> d(batch.pixels.shape());
      const std::size_t inner = d.shape().inner();
      std::copy_n(delta.data() + static_cast<std::size_t>(lo) * inner, d.size(), d.data());
      emn_pgd(res.surrogate, batch, d, cfg);
      std::copy_n(d.data(), d.size(), delta.data() + static_cast<std::size_t>(lo) * inner);
    }
    const double acc = accuracy(res.surrogate, ImageBatch{add_clip(train.pixels, delta), train.labels});
    res.perturbed_accuracy.push_back(acc);
    if (progress) progress(alt + 1, acc);
    if (acc > cfg.stop_accuracy) break;
  }

  // Min-min guard on the final surrogate.
  for (int lo = 0; lo < n; lo += 256) {
    const int hi = std::min(n, lo + 256);
    std::vector<int> idx(static_cast<std::size_t>(hi - lo));
    for (int i = lo; i < hi; ++i) idx[static_cast<std::size_t>(i - lo)] = i;
    const ImageBatch batch = gather(train, idx);
    Tensor<float> d(batch.pixels.shape());
    const std::size_t inner = d.shape().inner();
    std::copy_n(delta.data() + static_cast<std::size_t>(lo) * inner, d.size(), d.data());
    const auto clean = sample_losses(*net, res.surrogate.params, batch.pixels, batch.labels);
    const auto pert = sample_losses(*net, res.surrogate.params, add_clip(batch.pixels, d), batch.labels);
    for (int i = lo; i < hi; ++i)
      if (!(pert[static_cast<std::size_t>(i - lo)] <= clean[static_cast<std::size_t>(i - lo)])) {
        auto row = delta.row(i);
        std::fill(row.begin(), row.end(), 0.0f);
      }
  }

  nlohmann::json meta = cfg.to_json();
  meta["dataset"] = data.id;
  meta["surrogate_provenance"] = surrogate.provenance.str();
  meta["method"] = "emn";
  res.deltas = SampleDeltas{std::move(delta), cfg.epsilon, sha256_hex(meta.dump())};
  return res;
}

}  // namespace uex
