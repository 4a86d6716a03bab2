#include "uex/models/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "uex/core/archive.hpp"

namespace uex {

Adam::Adam(std::size_t size, double lr, double beta1, double beta2, double eps)
    : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), m_(size, 0.0), v_(size, 0.0) {}

void Adam::step(std::span<float> params, std::span<const float> grads,
                std::span<const std::pair<std::size_t, std::size_t>> ranges) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (const auto& [lo, hi] : ranges)
    for (std::size_t i = lo; i < hi; ++i) {
      const double g = grads[i];
      m_[i] = b1_ * m_[i] + (1.0 - b1_) * g;
      v_[i] = b2_ * v_[i] + (1.0 - b2_) * g * g;
      params[i] -= static_cast<float>(lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_));
    }
}

void Adam::step(std::span<float> params, std::span<const float> grads) {
  const std::pair<std::size_t, std::size_t> all{0, params.size()};
  step(params, grads, std::span(&all, 1));
}

UpdateTrace normalize_trace_with(UpdateTrace trace, double normalizer) {
  const std::size_t groups = trace.groups.size();
  trace.cumulative.assign(trace.delta.size(), std::vector<double>(groups, 0.0));
  for (std::size_t t = 0; t < trace.delta.size(); ++t)
    for (std::size_t k = 0; k < groups; ++k)
      trace.cumulative[t][k] = trace.delta[t][k] + (t ? trace.cumulative[t - 1][k] : 0.0);
  trace.normalizer = normalizer;
  trace.normalized = trace.cumulative;
  for (auto& row : trace.normalized)
    for (auto& v : row) v = normalizer > 0.0 ? v / normalizer : 0.0;
  return trace;
}

UpdateTrace normalize_trace(UpdateTrace trace) {
  trace = normalize_trace_with(std::move(trace), 0.0);
  double m = 0.0;
  if (!trace.cumulative.empty())
    for (double v : trace.cumulative.back()) m = std::max(m, v);
  return normalize_trace_with(std::move(trace), m);
}

double total_update(const UpdateTrace& trace) {
  double s = 0.0;
  if (!trace.cumulative.empty())
    for (double v : trace.cumulative.back()) s += v;
  return s;
}

void write_trace_csv(const std::filesystem::path& path, const UpdateTrace& trace) {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,group,delta_l2,v,v_norm\n";
  for (std::size_t t = 0; t < trace.delta.size(); ++t)
    for (std::size_t k = 0; k < trace.groups.size(); ++k)
      out << t + 1 << ',' << trace.groups[k] << ',' << trace.delta[t][k] << ',' << trace.cumulative[t][k] << ','
          << trace.normalized[t][k] << '\n';
  write_file(path, out.str());
}

UpdateTrace read_trace_csv(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  if (!std::getline(in, line) || line.rfind("epoch,group,delta_l2", 0) != 0)
    throw IoError(path.string() + ": not an update-trace CSV");
  UpdateTrace trace;
  std::map<std::string, std::size_t> gidx;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string epoch, group, delta;
    if (!std::getline(row, epoch, ',') || !std::getline(row, group, ',') || !std::getline(row, delta, ','))
      throw IoError(path.string() + ": malformed row '" + line + "'");
    std::size_t t = 0;
    double d = 0.0;
    try {
      t = static_cast<std::size_t>(std::stoul(epoch));
      d = std::stod(delta);
    } catch (const std::exception&) {
      throw IoError(path.string() + ": malformed row '" + line + "'");
    }
    if (t == 0) throw IoError(path.string() + ": epochs are 1-based");
    if (!gidx.count(group)) {
      gidx[group] = trace.groups.size();
      trace.groups.push_back(group);
    }
    if (trace.delta.size() < t) trace.delta.resize(t);
    auto& r = trace.delta[t - 1];
    if (r.size() < trace.groups.size()) r.resize(trace.groups.size(), 0.0);
    r[gidx[group]] = d;
  }
  if (trace.delta.empty()) throw IoError(path.string() + ": trace is empty");
  for (auto& r : trace.delta) r.resize(trace.groups.size(), 0.0);
  return normalize_trace(std::move(trace));
}

namespace {

constexpr int kEvalChunk = 256;

Tensor<float> slice_rows(const Tensor<float>& t, int lo, int hi) {
  std::vector<int> dims = t.shape().dims();
  dims[0] = hi - lo;
  const std::size_t inner = t.shape().inner();
  Tensor<float> out{Shape(dims)};
  std::copy_n(t.data() + static_cast<std::size_t>(lo) * inner, static_cast<std::size_t>(hi - lo) * inner, out.data());
  return out;
}

void check_labels(const ImageBatch& b, int classes, const char* what) {
  for (int y : b.labels)
    require(y >= 0 && y < classes, std::string("head has ") + std::to_string(classes) + " outputs but " + what +
                                       " contains label " + std::to_string(y));
}

}  // namespace

std::vector<int> predict(const ModelState& model, const Tensor<float>& pixels) {
  const auto net = make_network<float>(model.arch, model.head_classes);
  std::vector<int> out;
  const int n = pixels.dim(0);
  for (int lo = 0; lo < n; lo += kEvalChunk) {
    const int hi = std::min(n, lo + kEvalChunk);
    const Tape<float> tape = net->forward(model.params, slice_rows(pixels, lo, hi));
    const int k = model.head_classes;
    for (int i = 0; i < hi - lo; ++i) {
      const float* z = tape.logits.data() + static_cast<long>(i) * k;
      out.push_back(static_cast<int>(std::max_element(z, z + k) - z));
    }
  }
  return out;
}

double accuracy(const ModelState& model, const ImageBatch& data) {
  if (data.size() == 0) return 0.0;
  const auto pred = predict(model, data.pixels);
  int hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == data.labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

Tensor<float> extract_features(const ModelState& model, const Tensor<float>& pixels) {
  const auto net = make_network<float>(model.arch, model.head_classes);
  const int n = pixels.dim(0);
  Tensor<float> out;
  std::vector<float> all;
  int width = 0;
  for (int lo = 0; lo < n; lo += kEvalChunk) {
    const int hi = std::min(n, lo + kEvalChunk);
    const Tape<float> tape = net->forward(model.params, slice_rows(pixels, lo, hi));
    width = tape.features.dim(1);
    all.insert(all.end(), tape.features.vec().begin(), tape.features.vec().end());
  }
  return Tensor<float>(Shape{n, width}, std::move(all));
}

FinetuneResult finetune(const ModelState& model, const ImageBatch& train, const ImageBatch& test,
                        const TrainingMask& mask, const TrainConfig& cfg) {
  require(cfg.epochs >= 0, "epochs must be non-negative");
  require(cfg.batch_size >= 1, "batch size must be positive");
  require(cfg.lr >= 0.0, "learning rate must be non-negative");
  check_labels(train, model.head_classes, "training data");
  check_labels(test, model.head_classes, "test data");
  const auto net = make_network<float>(model.arch, model.head_classes);
  const ParamLayout layout = net->layout();

  FinetuneResult res;
  res.state = model;
  res.trace.groups = layout.groups();
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  for (const auto& g : res.trace.groups)
    if (mask.trainable(g)) ranges.push_back(layout.group_range(g));

  auto& params = res.state.params;
  Adam adam(params.size(), cfg.lr);
  Rng rng(cfg.seed);
  const int n = train.size();
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<float> before = params;
    rng.shuffle(order);
    double loss_sum = 0.0;
    int steps = 0;
    for (int lo = 0; lo < n; lo += cfg.batch_size) {
      const int hi = std::min(n, lo + cfg.batch_size);
      ImageBatch batch = gather(train, std::span(order).subspan(static_cast<std::size_t>(lo), static_cast<std::size_t>(hi - lo)));
      Tensor<float> targets = one_hot<float>(batch.labels, model.head_classes);
      if (cfg.transform) cfg.transform(batch.pixels, targets, rng);
      const LossGrad<float> lg = loss_and_grad<float>(*net, params, batch.pixels, targets, false);
      if (!std::isfinite(lg.loss)) throw NonFiniteError("non-finite training loss", epoch);
      loss_sum += lg.loss;
      ++steps;
      if (cfg.optimizer == OptimizerKind::adam) {
        adam.step(params, lg.gparams, ranges);
      } else {
        for (const auto& [a, b] : ranges)
          for (std::size_t i = a; i < b; ++i) params[i] -= static_cast<float>(cfg.lr) * lg.gparams[i];
      }
    }
    std::vector<double> row;
    for (const auto& g : res.trace.groups) {
      const auto [a, b] = layout.group_range(g);
      double s = 0.0;
      for (std::size_t i = a; i < b; ++i) {
        const double d = static_cast<double>(params[i]) - static_cast<double>(before[i]);
        s += d * d;
      }
      row.push_back(std::sqrt(s));
    }
    res.trace.delta.push_back(std::move(row));
    res.curves.train_loss.push_back(steps ? loss_sum / steps : 0.0);
    if (cfg.track_curves) {
      res.curves.train_accuracy.push_back(accuracy(res.state, train));
      res.curves.test_accuracy.push_back(accuracy(res.state, test));
    }
  }
  res.trace = normalize_trace(std::move(res.trace));
  return res;
}

FinetuneResult finetune(const ModelState& model, const PoisonMix& data, const ImageBatch& test,
                        const TrainingMask& mask, const TrainConfig& cfg) {
  return finetune(model, data.samples, test, mask, cfg);
}

FinetuneResult finetune(const ModelState& model, const SplitDataset& data, const TrainingMask& mask,
                        const TrainConfig& cfg) {
  require(model.head_classes == data.class_count,
          "head has " + std::to_string(model.head_classes) + " outputs but data has " +
              std::to_string(data.class_count) + " classes");
  return finetune(model, data.train, data.test, mask, cfg);
}

PretrainResult pretrain(const ModelState& model, const SplitDataset& prior, const TrainConfig& cfg) {
  require(model.head_classes == prior.class_count,
          "head has " + std::to_string(model.head_classes) + " outputs but prior split has " +
              std::to_string(prior.class_count) + " classes");
  TrainConfig c = cfg;
  c.track_curves = false;
  FinetuneResult r = finetune(model, prior, TrainingMask::all_trainable(model), c);
  PretrainResult out;
  out.state = std::move(r.state);
  if (cfg.epochs > 0) out.state.provenance = Provenance{prior.id};
  out.test_accuracy = accuracy(out.state, prior.test);
  return out;
}

}  // namespace uex
