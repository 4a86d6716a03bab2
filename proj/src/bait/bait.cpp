#include "uex/bait/bait.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "uex/core/archive.hpp"
#include "uex/core/digest.hpp"

namespace uex {

std::string to_string(TargetMode mode) {
  switch (mode) {
    case TargetMode::hard_negative: return "hard_negative";
    case TargetMode::random: return "random";
    case TargetMode::most_dissimilar: return "most_dissimilar";
  }
  return "?";
}

TargetMode parse_target_mode(const std::string& s) {
  if (s == "hard_negative") return TargetMode::hard_negative;
  if (s == "random") return TargetMode::random;
  if (s == "most_dissimilar") return TargetMode::most_dissimilar;
  throw InvalidArgument("unknown target mode '" + s + "'");
}

void CurriculumSchedule::validate() const {
  for (int e : stage_epochs) require(e >= 1, "every curriculum stage needs at least one epoch");
}

int CurriculumSchedule::stage(int epoch) const {
  require(epoch >= 0, "epoch must be non-negative");
  if (epoch < stage_epochs[0]) return 1;
  if (epoch < stage_epochs[0] + stage_epochs[1]) return 2;
  return 3;
}

void CraftConfig::validate() const {
  require(alpha > 0.0, "alpha must be positive");
  require(beta >= 0.0, "beta must be non-negative");
  require(unroll_n >= 0, "unroll_n must be non-negative");
  require(epsilon.positive(), "epsilon must be positive");
  require(batch_size >= 1, "batch size must be positive");
  require(generator_width >= 1 && residual_blocks >= 0, "bad generator size");
  require(bank_momentum >= 0.0 && bank_momentum < 1.0, "bank momentum must lie in [0, 1)");
}

nlohmann::json CraftConfig::to_json() const {
  return {{"alpha", alpha},
          {"beta", beta},
          {"unroll_n", unroll_n},
          {"epsilon", epsilon.str()},
          {"batch_size", batch_size},
          {"seed", seed},
          {"second_order", second_order},
          {"mode", mode == CraftMode::generator ? "generator" : "direct_bank"},
          {"generator_width", generator_width},
          {"residual_blocks", residual_blocks},
          {"bank_momentum", bank_momentum}};
}

CraftConfig CraftConfig::from_json(const nlohmann::json& j) {
  CraftConfig c;
  c.alpha = j.value("alpha", c.alpha);
  c.beta = j.value("beta", c.beta);
  c.unroll_n = j.value("unroll_n", c.unroll_n);
  if (j.contains("epsilon")) c.epsilon = Rational::parse(j.at("epsilon").get<std::string>());
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.second_order = j.value("second_order", c.second_order);
  const std::string mode = j.value("mode", std::string("generator"));
  require(mode == "generator" || mode == "direct_bank", "unknown craft mode '" + mode + "'");
  c.mode = mode == "generator" ? CraftMode::generator : CraftMode::direct_bank;
  c.generator_width = j.value("generator_width", c.generator_width);
  c.residual_blocks = j.value("residual_blocks", c.residual_blocks);
  c.bank_momentum = j.value("bank_momentum", c.bank_momentum);
  return c;
}

namespace {

template <class T>
T forward_loss(const Network<T>& net, std::span<const T> theta, const Tensor<T>& x, const Tensor<T>& targets) {
  const Tape<T> tape = net.forward(theta, x);
  return softmax_cross_entropy<T>(tape.logits, targets, nullptr);
}

// Tangents of (grad_theta L, grad_x L) along parameter direction v.
template <class T>
void hessian_vector(const Network<Dual<T>>& dnet, std::span<const T> theta, const Tensor<T>& x,
                    const Tensor<T>& targets, std::span<const T> v, std::vector<T>& h_theta, Tensor<T>& h_x) {
  std::vector<Dual<T>> p(theta.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = Dual<T>(theta[i], v[i]);
  const Tensor<Dual<T>> dx = tensor_cast<Dual<T>>(x);
  const Tensor<Dual<T>> dt = tensor_cast<Dual<T>>(targets);
  const LossGrad<Dual<T>> lg = loss_and_grad<Dual<T>>(dnet, p, dx, dt, true);
  h_theta.resize(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) h_theta[i] = lg.gparams[i].d;
  h_x = Tensor<T>(x.shape());
  for (std::size_t i = 0; i < h_x.size(); ++i) h_x[i] = lg.ginput[i].d;
}

// clip(x_b + deltas[cls_b]) and the pass-through mask of the clip.
template <class T>
Tensor<T> perturb(const Tensor<T>& x, std::span<const int> cls, const Tensor<T>& deltas, std::vector<unsigned char>* mask) {
  require(x.shape().inner() == deltas.shape().inner(), "perturbation shape " + deltas.shape().str() +
                                                           " does not match images " + x.shape().str());
  require(x.dim(0) == static_cast<int>(cls.size()), "one class per image required");
  Tensor<T> out(x.shape());
  const std::size_t inner = x.shape().inner();
  if (mask) mask->assign(out.size(), 0);
  for (std::size_t b = 0; b < cls.size(); ++b) {
    const int k = cls[b];
    require(k >= 0 && k < deltas.dim(0), "class " + std::to_string(k) + " has no perturbation");
    const auto d = deltas.row(k);
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t o = b * inner + i;
      const T v = x[o] + d[i];
      out[o] = v < T(0) ? T(0) : (v > T(1) ? T(1) : v);
      if (mask) (*mask)[o] = !(v < T(0)) && !(v > T(1));
    }
  }
  return out;
}

template <class T>
void scatter_classwise(const Tensor<T>& g, std::span<const int> cls, const std::vector<unsigned char>& mask, Tensor<T>& out) {
  const std::size_t inner = g.shape().inner();
  for (std::size_t b = 0; b < cls.size(); ++b) {
    auto dst = out.row(cls[b]);
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t o = b * inner + i;
      if (mask[o]) dst[i] += g[o];
    }
  }
}

template <class T>
bool finite(T v) {
  return std::isfinite(static_cast<double>(v));
}

}  // namespace

template <class T>
MetaGradient<T> meta_gradient(const Network<T>& net, const Network<Dual<T>>& dnet, std::span<const T> theta,
                              const Tensor<T>& u, const Tensor<T>& inner_targets, const Tensor<T>& w,
                              const Tensor<T>& outer_targets, T alpha, int steps, bool second_order) {
  require(steps >= 0, "unroll steps must be non-negative");
  MetaGradient<T> out;
  bool first = true;
  auto grad = [&](const std::vector<T>& th) {
    LossGrad<T> lg = loss_and_grad<T>(net, th, u, inner_targets, false);
    if (first) out.inner_loss = lg.loss;
    first = false;
    if (!finite(lg.loss)) throw NonFiniteError("non-finite inner loss", -1);
    return lg.gparams;
  };
  const auto traj = unroll_trajectory(std::vector<T>(theta.begin(), theta.end()), grad, static_cast<double>(alpha), steps);
  if (steps == 0) out.inner_loss = forward_loss<T>(net, theta, u, inner_targets);

  LossGrad<T> outer = loss_and_grad<T>(net, traj.back(), w, outer_targets, true);
  if (!finite(outer.loss)) throw NonFiniteError("non-finite outer loss", -1);
  out.outer_loss = outer.loss;
  out.grad_outer_input = std::move(outer.ginput);
  out.grad_inner_input = Tensor<T>(u.shape());
  if (second_order) {
    std::vector<T> g = std::move(outer.gparams);
    std::vector<T> h_theta;
    Tensor<T> h_u;
    for (int s = steps - 1; s >= 0; --s) {
      hessian_vector<T>(dnet, traj[static_cast<std::size_t>(s)], u, inner_targets, g, h_theta, h_u);
      for (std::size_t i = 0; i < h_u.size(); ++i) out.grad_inner_input[i] -= alpha * h_u[i];
      if (s > 0)
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= alpha * h_theta[i];
    }
  }
  out.theta_unrolled = traj.back();
  return out;
}

template <class T>
BankGradient<T> bank_meta_gradient(const Network<T>& net, const Network<Dual<T>>& dnet, std::span<const T> theta,
                                   const Tensor<T>& x, std::span<const int> labels, std::span<const int> targets,
                                   const Tensor<T>& deltas, T alpha, int steps, bool second_order) {
  const int k = net.classes();
  std::vector<unsigned char> mask_u, mask_w;
  const Tensor<T> u = perturb(x, labels, deltas, &mask_u);
  const Tensor<T> w = perturb(x, targets, deltas, &mask_w);
  MetaGradient<T> mg = meta_gradient<T>(net, dnet, theta, u, one_hot<T>(labels, k), w, one_hot<T>(targets, k), alpha,
                                        steps, second_order);
  BankGradient<T> out;
  out.outer_loss = mg.outer_loss;
  out.inner_loss = mg.inner_loss;
  out.grad = Tensor<T>(deltas.shape());
  scatter_classwise(mg.grad_inner_input, labels, mask_u, out.grad);
  scatter_classwise(mg.grad_outer_input, targets, mask_w, out.grad);
  out.theta_unrolled = std::move(mg.theta_unrolled);
  return out;
}

template <class T>
T bank_outer_loss(const Network<T>& net, std::span<const T> theta, const Tensor<T>& x, std::span<const int> labels,
                  std::span<const int> targets, const Tensor<T>& deltas, T alpha, int steps) {
  const int k = net.classes();
  const Tensor<T> u = perturb<T>(x, labels, deltas, nullptr);
  const Tensor<T> w = perturb<T>(x, targets, deltas, nullptr);
  const Tensor<T> yt = one_hot<T>(labels, k);
  auto grad = [&](const std::vector<T>& th) { return loss_and_grad<T>(net, th, u, yt, false).gparams; };
  const auto traj = unroll_trajectory(std::vector<T>(theta.begin(), theta.end()), grad, static_cast<double>(alpha), steps);
  return forward_loss<T>(net, traj.back(), w, one_hot<T>(targets, k));
}

#define UEX_INSTANTIATE(T)                                                                                          \
  template MetaGradient<T> meta_gradient<T>(const Network<T>&, const Network<Dual<T>>&, std::span<const T>,         \
                                            const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                                            T, int, bool);                                                           \
  template BankGradient<T> bank_meta_gradient<T>(const Network<T>&, const Network<Dual<T>>&, std::span<const T>,    \
                                                 const Tensor<T>&, std::span<const int>, std::span<const int>,       \
                                                 const Tensor<T>&, T, int, bool);                                    \
  template T bank_outer_loss<T>(const Network<T>&, std::span<const T>, const Tensor<T>&, std::span<const int>,      \
                                std::span<const int>, const Tensor<T>&, T, int);

UEX_INSTANTIATE(float)
UEX_INSTANTIATE(double)

#undef UEX_INSTANTIATE

UnrolledState inner_unroll(const ModelState& theta, const Tensor<float>& class_deltas, const ImageBatch& batch,
                           double alpha, int steps) {
  require(steps >= 0, "unroll steps must be non-negative");
  const auto net = make_network<float>(theta.arch, theta.head_classes);
  const Tensor<float> u = perturb<float>(batch.pixels, batch.labels, class_deltas, nullptr);
  const Tensor<float> yt = one_hot<float>(batch.labels, theta.head_classes);
  UnrolledState out;
  bool first = true;
  auto grad = [&](const std::vector<float>& th) {
    LossGrad<float> lg = loss_and_grad<float>(*net, th, u, yt, false);
    if (!std::isfinite(lg.loss)) throw NonFiniteError("non-finite inner loss", -1);
    if (first) out.inner_loss = lg.loss;
    first = false;
    return lg.gparams;
  };
  out.trajectory = unroll_trajectory(theta.params, grad, alpha, steps);
  if (steps == 0) out.inner_loss = forward_loss<float>(*net, theta.params, u, yt);
  out.theta = theta;
  out.theta.params = out.trajectory.back();
  return out;
}

UnrolledState inner_unroll(const ModelState& theta, const PerturbationBank& bank, const ImageBatch& batch,
                           double alpha, int steps) {
  return inner_unroll(theta, bank.deltas, batch, alpha, steps);
}

ModelState surrogate_step(const ModelState& theta, const PerturbationBank& bank, const ImageBatch& batch,
                          double alpha) {
  if (alpha == 0.0) return theta;
  return inner_unroll(theta, bank, batch, alpha, 1).theta;
}

CraftState make_craft_state(const CraftConfig& cfg, int classes, int channels, int height, int width) {
  cfg.validate();
  CraftState st{PerturbationBank::zeros(classes, channels, height, width, cfg.epsilon), std::nullopt, std::nullopt};
  if (cfg.mode == CraftMode::generator) {
    const GeneratorConfig gc{channels, height, width, cfg.generator_width, cfg.residual_blocks};
    st.generator.emplace(gc, Rng(cfg.seed).fork(fnv1a("generator")).seed());
    st.generator_opt.emplace(st.generator->params().size(), cfg.beta);
  }
  return st;
}

OuterStepResult outer_step(CraftState& state, const ModelState& theta, const ImageBatch& batch,
                           std::span<const int> targets, const CraftConfig& cfg) {
  const int k = theta.head_classes;
  require(static_cast<int>(targets.size()) == batch.size(), "one target per sample required");
  for (int b = 0; b < batch.size(); ++b)
    require(targets[static_cast<std::size_t>(b)] != batch.labels[static_cast<std::size_t>(b)],
            "target equals the ground-truth class for sample " + std::to_string(b));
  require(state.bank.class_count() == k, "bank class count does not match the surrogate head");
  const auto net = make_network<float>(theta.arch, k);
  OuterStepResult out;

  if (cfg.beta == 0.0) {
    const UnrolledState un = inner_unroll(theta, state.bank, batch, cfg.alpha, cfg.unroll_n);
    out.inner_loss = un.inner_loss;
    const Tensor<float> w = perturb<float>(batch.pixels, targets, state.bank.deltas, nullptr);
    out.outer_loss = forward_loss<float>(*net, un.theta.params, w, one_hot<float>(targets, k));
    out.theta_unrolled = un.theta;
    return out;
  }

  const auto dnet = make_network<Dual<float>>(theta.arch, k);
  const double eps = cfg.epsilon.value();
  const std::size_t inner = batch.pixels.shape().inner();

  if (cfg.mode == CraftMode::direct_bank) {
    BankGradient<float> bg = bank_meta_gradient<float>(*net, *dnet, theta.params, batch.pixels, batch.labels, targets,
                                                       state.bank.deltas, static_cast<float>(cfg.alpha), cfg.unroll_n,
                                                       cfg.second_order);
    for (std::size_t i = 0; i < bg.grad.size(); ++i)
      state.bank.deltas[i] -= static_cast<float>(cfg.beta) * bg.grad[i];
    project_linf(state.bank.deltas.span(), eps);
    out.outer_loss = bg.outer_loss;
    out.inner_loss = bg.inner_loss;
    out.theta_unrolled = theta;
    out.theta_unrolled.params = std::move(bg.theta_unrolled);
    return out;
  }

  require(state.generator.has_value(), "generator mode needs a generator");
  Generator& gen = *state.generator;
  Generator::Tape tape;
  const Tensor<float> d = gen.forward(batch.pixels, eps, true, &tape);

  // Class prototypes: batch mean of G(x) per class, bank entry where absent.
  Tensor<float> proto = state.bank.deltas;
  std::vector<int> count(static_cast<std::size_t>(k), 0);
  for (int y : batch.labels) ++count[static_cast<std::size_t>(y)];
  for (int c = 0; c < k; ++c)
    if (count[static_cast<std::size_t>(c)]) std::fill(proto.row(c).begin(), proto.row(c).end(), 0.0f);
  for (int b = 0; b < batch.size(); ++b) {
    const int y = batch.labels[static_cast<std::size_t>(b)];
    auto dst = proto.row(y);
    const auto src = d.row(b);
    const float inv = 1.0f / static_cast<float>(count[static_cast<std::size_t>(y)]);
    for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i] * inv;
  }

  BankGradient<float> bg = bank_meta_gradient<float>(*net, *dnet, theta.params, batch.pixels, batch.labels, targets,
                                                     proto, static_cast<float>(cfg.alpha), cfg.unroll_n,
                                                     cfg.second_order);
  Tensor<float> grad_d(d.shape());
  for (int b = 0; b < batch.size(); ++b) {
    const int y = batch.labels[static_cast<std::size_t>(b)];
    const auto src = bg.grad.row(y);
    auto dst = grad_d.row(b);
    const float inv = 1.0f / static_cast<float>(count[static_cast<std::size_t>(y)]);
    for (std::size_t i = 0; i < inner; ++i) dst[i] = src[i] * inv;
  }
  const std::vector<float> gparams = gen.backward(tape, grad_d);
  state.generator_opt->step(gen.params(), gparams);
  state.bank = aggregate_classwise(d, batch.labels, std::move(state.bank), cfg.bank_momentum);

  out.outer_loss = bg.outer_loss;
  out.inner_loss = bg.inner_loss;
  out.theta_unrolled = theta;
  out.theta_unrolled.params = std::move(bg.theta_unrolled);
  return out;
}

std::string craft_digest(const CraftConfig& cfg, const CurriculumSchedule& schedule, const ModelState& surrogate,
                         const SplitDataset& data) {
  nlohmann::json j = cfg.to_json();
  j["stage_epochs"] = schedule.stage_epochs;
  j["stage_modes"] = {to_string(schedule.modes[0]), to_string(schedule.modes[1]), to_string(schedule.modes[2])};
  j["dataset"] = data.id;
  j["surrogate_provenance"] = surrogate.provenance.str();
  j["surrogate_sha256"] = sha256_hex(std::span(reinterpret_cast<const unsigned char*>(surrogate.params.data()),
                                               surrogate.params.size() * sizeof(float)));
  return sha256_hex(j.dump());
}

CraftResult craft(const CraftConfig& cfg, const ModelState& surrogate, const CurriculumSchedule& schedule,
                  const SplitDataset& data, const CraftProgress& progress) {
  cfg.validate();
  schedule.validate();
  require(surrogate.head_classes == data.class_count,
          "surrogate head has " + std::to_string(surrogate.head_classes) + " outputs but data has " +
              std::to_string(data.class_count) + " classes");
  require(data.class_count >= 2, "crafting needs at least two classes");
  const ImageBatch& train = data.train;
  CraftState state = make_craft_state(cfg, data.class_count, train.channels(), train.height(), train.width());
  state.bank.digest = craft_digest(cfg, schedule, surrogate, data);
  const auto net = make_network<float>(surrogate.arch, surrogate.head_classes);

  CraftResult res;
  ModelState theta = surrogate;
  const int n = train.size();
  std::vector<int> order(static_cast<std::size_t>(n));
  const Rng root(cfg.seed);
  for (int epoch = 0; epoch < schedule.total_epochs(); ++epoch) {
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng rng = root.fork(static_cast<std::uint64_t>(epoch) + 1);
    rng.shuffle(order);
    const TargetMode mode = schedule.mode(epoch);
    double outer_sum = 0.0, inner_sum = 0.0;
    int steps = 0;
    try {
      for (int lo = 0; lo < n; lo += cfg.batch_size) {
        const int hi = std::min(n, lo + cfg.batch_size);
        const ImageBatch batch =
            gather(train, std::span(order).subspan(static_cast<std::size_t>(lo), static_cast<std::size_t>(hi - lo)));
        const Tape<float> clean = net->forward(theta.params, batch.pixels);
        const std::vector<int> targets = select_targets(clean.logits, batch.labels, mode, rng);
        const OuterStepResult o = outer_step(state, theta, batch, targets, cfg);
        theta = surrogate_step(theta, state.bank, batch, cfg.alpha);
        if (!theta.all_finite()) throw NonFiniteError("surrogate weights became non-finite", epoch);
        outer_sum += o.outer_loss;
        inner_sum += o.inner_loss;
        ++steps;
      }
    } catch (const NonFiniteError& e) {
      if (e.epoch() >= 0) throw;
      throw NonFiniteError("crafting diverged", epoch);
    }
    CraftLogRow row;
    row.epoch = epoch + 1;
    row.stage = schedule.stage(epoch);
    row.outer_loss = steps ? outer_sum / steps : 0.0;
    row.inner_loss = steps ? inner_sum / steps : 0.0;
    row.acc_perturbed_train = accuracy(theta, apply_bank(train, state.bank, train.labels));
    row.acc_clean_train = accuracy(theta, train);
    res.log.push_back(row);
    if (progress) progress(row);
  }
  res.bank = std::move(state.bank);
  res.surrogate = std::move(theta);
  return res;
}

void write_craft_log(const std::filesystem::path& path, std::span<const CraftLogRow> log) {
  std::ostringstream out;
  out.precision(10);
  out << "epoch,stage,outer_loss,inner_loss,acc_perturbed_train,acc_clean_train\n";
  for (const auto& r : log)
    out << r.epoch << ',' << r.stage << ',' << r.outer_loss << ',' << r.inner_loss << ',' << r.acc_perturbed_train << ','
        << r.acc_clean_train << '\n';
  write_file(path, out.str());
}

std::vector<CraftLogRow> read_craft_log(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  if (!std::getline(in, line) || line.rfind("epoch,stage,outer_loss", 0) != 0)
    throw IoError(path.string() + ": not a craft log");
  std::vector<CraftLogRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    CraftLogRow r;
    char c1, c2, c3, c4, c5;
    std::istringstream ls(line);
    if (!(ls >> r.epoch >> c1 >> r.stage >> c2 >> r.outer_loss >> c3 >> r.inner_loss >> c4 >> r.acc_perturbed_train >> c5 >>
          r.acc_clean_train))
      throw IoError(path.string() + ": malformed row '" + line + "'");
    rows.push_back(r);
  }
  return rows;
}

}  // namespace uex
