#include "uex/eval/eval.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <memory>
#include <sstream>

#include "uex/core/archive.hpp"
#include "uex/core/error.hpp"

namespace uex {

namespace {

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// Sample standard deviation; 0 for a single repeat.
double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

std::string source_digest(const PerturbationSource& src) {
  return std::visit([](const auto& s) { return s.digest; }, src);
}

void check_source_shape(const PerturbationSource& src, const SplitDataset& data) {
  const ImageBatch& t = data.train;
  if (const auto* b = std::get_if<PerturbationBank>(&src)) {
    require(b->class_count() == data.class_count, "bank has " + std::to_string(b->class_count()) +
                                                      " classes but the data has " + std::to_string(data.class_count));
    require(b->channels() == t.channels() && b->height() == t.height() && b->width() == t.width(),
            "bank image shape does not match the data");
  } else {
    const auto& d = std::get<SampleDeltas>(src);
    require(d.count() == t.size(), "per-sample delta count does not match the training set");
    require(d.deltas.dim(1) == t.channels() && d.deltas.dim(2) == t.height() && d.deltas.dim(3) == t.width(),
            "per-sample delta shape does not match the data");
  }
}

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

std::string victim_label(const nlohmann::json& v) {
  std::string s = v.value("arch", "?") + "/" + v.value("provenance", "?");
  const auto add = [&](const char* key, const char* tag) {
    if (!v.contains(key) || v[key].empty()) return;
    s += std::string(" ") + tag + ":";
    bool first = true;
    for (const auto& g : v[key]) {
      s += (first ? "" : ",") + g.get<std::string>();
      first = false;
    }
  };
  add("replaced", "rand");
  add("frozen", "frz");
  return s;
}

}  // namespace

nlohmann::json VictimSpec::descriptor() const {
  return {{"arch", arch.id},
          {"provenance", prior ? prior->provenance.str() : std::string("random")},
          {"replaced", replaced},
          {"frozen", frozen},
          {"epochs", train.epochs},
          {"lr", train.lr},
          {"batch_size", train.batch_size},
          {"optimizer", train.optimizer == OptimizerKind::adam ? "adam" : "sgd"}};
}

ModelState build_victim(const VictimSpec& spec, int classes, std::uint64_t seed) {
  ModelState m = spec.prior ? build_model(spec.arch, classes, FromState{&*spec.prior, seed})
                            : build_model(spec.arch, classes, RandomInit{seed});
  if (!spec.replaced.empty()) m = replace_layers_random(m, spec.replaced, seed ^ 0x5eedULL);
  return m;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json curves_j = nlohmann::json::array();
  for (const auto& c : curves)
    curves_j.push_back({{"train_accuracy", c.train_accuracy}, {"test_accuracy", c.test_accuracy}, {"train_loss", c.train_loss}});
  return {{"label", label},
          {"clean_test_accuracy", clean_test_accuracy},
          {"clean_test_sd", clean_test_sd},
          {"perturbed_train_accuracy", perturbed_train_accuracy},
          {"perturbed_train_sd", perturbed_train_sd},
          {"clean_test_runs", clean_test_runs},
          {"perturbed_train_runs", perturbed_train_runs},
          {"curves", curves_j},
          {"victim", victim},
          {"defense", defense},
          {"ratio", ratio},
          {"source_digest", source_digest},
          {"seeds", seeds},
          {"wall_seconds", wall_seconds}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  try {
    EvalReport r;
    r.label = j.at("label").get<std::string>();
    r.clean_test_accuracy = j.at("clean_test_accuracy").get<double>();
    r.clean_test_sd = j.at("clean_test_sd").get<double>();
    r.perturbed_train_accuracy = j.at("perturbed_train_accuracy").get<double>();
    r.perturbed_train_sd = j.at("perturbed_train_sd").get<double>();
    r.clean_test_runs = j.at("clean_test_runs").get<std::vector<double>>();
    r.perturbed_train_runs = j.at("perturbed_train_runs").get<std::vector<double>>();
    for (const auto& c : j.at("curves"))
      r.curves.push_back({c.at("train_accuracy").get<std::vector<double>>(), c.at("test_accuracy").get<std::vector<double>>(),
                          c.at("train_loss").get<std::vector<double>>()});
    r.victim = j.at("victim");
    r.defense = j.at("defense").get<std::string>();
    r.ratio = j.at("ratio").get<double>();
    r.source_digest = j.at("source_digest").get<std::string>();
    r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    r.wall_seconds = j.at("wall_seconds").get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed evaluation report: ") + e.what());
  }
}

EvalReport evaluate_unlearnability(const PerturbationSource* source, const VictimSpec& victim,
                                   const SplitDataset& data, const DefenseSpec& defense, double ratio, int repeats,
                                   std::uint64_t seed) {
  require(repeats >= 1, "repeats must be at least 1");
  require(ratio >= 0.0 && ratio <= 1.0, "poison ratio must lie in [0, 1]");
  defense.validate(data.train.height(), data.train.width());
  if (source) check_source_shape(*source, data);
  if (victim.prior)
    require(victim.prior->arch == victim.arch, "prior checkpoint architecture does not match the victim");

  const auto t0 = std::chrono::steady_clock::now();
  EvalReport rep;
  rep.victim = victim.descriptor();
  rep.defense = defense.str();
  rep.ratio = source ? ratio : 0.0;
  rep.source_digest = source ? source_digest(*source) : "";
  for (int r = 0; r < repeats; ++r) {
    const std::uint64_t s = seed + static_cast<std::uint64_t>(r);
    rep.seeds.push_back(s);
    const ModelState model = build_victim(victim, data.class_count, s);
    const TrainingMask mask = freeze_layers(model, victim.frozen);
    ImageBatch train = data.train;
    if (source) train = mix_poison(data, *source, ratio, s).samples;
    TrainConfig cfg = victim.train;
    cfg.seed = s;
    DefenseSpec d = defense;
    d.seed = s;
    cfg.transform = make_defense_transform(d);
    FinetuneResult fr = finetune(model, train, data.test, mask, cfg);
    rep.clean_test_runs.push_back(accuracy(fr.state, data.test));
    rep.perturbed_train_runs.push_back(accuracy(fr.state, train));
    rep.curves.push_back(std::move(fr.curves));
    rep.traces.push_back(std::move(fr.trace));
  }
  rep.clean_test_accuracy = mean_of(rep.clean_test_runs);
  rep.clean_test_sd = sd_of(rep.clean_test_runs);
  rep.perturbed_train_accuracy = mean_of(rep.perturbed_train_runs);
  rep.perturbed_train_sd = sd_of(rep.perturbed_train_runs);
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

std::string to_string(AblationMode mode) {
  return mode == AblationMode::progressive_replace ? "progressive_replace" : "freeze_each";
}

AblationMode parse_ablation_mode(const std::string& s) {
  if (s == "progressive_replace") return AblationMode::progressive_replace;
  if (s == "freeze_each") return AblationMode::freeze_each;
  throw InvalidArgument("unknown ablation mode '" + s + "'");
}

std::vector<std::string> body_groups(const ArchSpec& arch) {
  std::vector<std::string> g = make_layout(arch, 2).groups();
  g.erase(std::remove(g.begin(), g.end(), std::string("head")), g.end());
  return g;
}

std::vector<EvalReport> run_prior_ablation(const PerturbationSource* source, const SplitDataset& data,
                                           const VictimSpec& base, AblationMode mode, const DefenseSpec& defense,
                                           double ratio, int repeats, std::uint64_t seed) {
  const std::vector<std::string> body = body_groups(base.arch);
  require(!body.empty(), "victim has no named body groups");
  std::vector<EvalReport> out;
  if (mode == AblationMode::progressive_replace) {
    for (std::size_t k = 0; k <= body.size(); ++k) {
      VictimSpec v = base;
      v.replaced.assign(body.end() - static_cast<long>(k), body.end());
      EvalReport r = evaluate_unlearnability(source, v, data, defense, ratio, repeats, seed);
      r.label = k == 0 ? "replace:none" : "replace:" + v.replaced.front() + (k > 1 ? "-" + v.replaced.back() : "");
      out.push_back(std::move(r));
    }
  } else {
    for (const auto& g : body) {
      VictimSpec v = base;
      v.frozen = {g};
      EvalReport r = evaluate_unlearnability(source, v, data, defense, ratio, repeats, seed);
      r.label = "freeze:" + g;
      out.push_back(std::move(r));
    }
  }
  return out;
}

void write_report(const std::filesystem::path& path, const EvalReport& report) {
  write_file(path, report.to_json().dump(2) + "\n");
}

EvalReport read_report(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  return EvalReport::from_json(j);
}

void write_curves_csv(const std::filesystem::path& path, const EvalReport& report) {
  std::ostringstream out;
  out.precision(10);
  out << "repeat,epoch,train_accuracy,test_accuracy,train_loss\n";
  for (std::size_t r = 0; r < report.curves.size(); ++r) {
    const Curves& c = report.curves[r];
    for (std::size_t e = 0; e < c.train_loss.size(); ++e) {
      out << r << ',' << e + 1 << ',';
      if (e < c.train_accuracy.size()) out << c.train_accuracy[e];
      out << ',';
      if (e < c.test_accuracy.size()) out << c.test_accuracy[e];
      out << ',' << c.train_loss[e] << '\n';
    }
  }
  write_file(path, out.str());
}

std::string render_summary_table(std::span<const EvalReport> reports) {
  std::vector<std::array<std::string, 6>> rows{{"label", "victim", "defense", "ratio", "clean test", "perturbed train"}};
  for (const auto& r : reports)
    rows.push_back({r.label.empty() ? "-" : r.label, victim_label(r.victim), r.defense, fixed(r.ratio, 2),
                    fixed(100.0 * r.clean_test_accuracy, 2) + " +- " + fixed(100.0 * r.clean_test_sd, 2),
                    fixed(100.0 * r.perturbed_train_accuracy, 2) + " +- " + fixed(100.0 * r.perturbed_train_sd, 2)});
  std::array<std::size_t, 6> w{};
  for (const auto& row : rows)
    for (std::size_t c = 0; c < row.size(); ++c) w[c] = std::max(w[c], row[c].size());
  std::string out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::string line;
    for (std::size_t c = 0; c < rows[i].size(); ++c) {
      const std::string& cell = rows[i][c];
      const std::string pad(w[c] - cell.size(), ' ');
      line += (c < 3 ? cell + pad : pad + cell) + (c + 1 < rows[i].size() ? "  " : "");
    }
    out += line + "\n";
    if (i == 0) {
      std::size_t total = 0;
      for (std::size_t c = 0; c < w.size(); ++c) total += w[c] + (c + 1 < w.size() ? 2 : 0);
      out += std::string(total, '-') + "\n";
    }
  }
  return out;
}

std::string render_summary_csv(std::span<const EvalReport> reports) {
  std::ostringstream out;
  out.precision(10);
  out << "label,victim,defense,ratio,clean_test_mean,clean_test_sd,perturbed_train_mean,perturbed_train_sd,repeats\n";
  for (const auto& r : reports)
    out << r.label << ',' << victim_label(r.victim) << ',' << r.defense << ',' << r.ratio << ',' << r.clean_test_accuracy
        << ',' << r.clean_test_sd << ',' << r.perturbed_train_accuracy << ',' << r.perturbed_train_sd << ','
        << r.clean_test_runs.size() << '\n';
  return out.str();
}

void export_features(const ModelState& model, const ImageBatch& data, const std::filesystem::path& path) {
  const Tensor<float> f = extract_features(model, data.pixels);
  const int n = f.dim(0), d = f.dim(1);
  std::ostringstream out;
  out.precision(9);
  for (int j = 0; j < d; ++j) out << 'f' << j << ',';
  out << "label\n";
  for (int i = 0; i < n; ++i) {
    const auto row = f.row(i);
    for (int j = 0; j < d; ++j) out << row[static_cast<std::size_t>(j)] << ',';
    out << data.labels[static_cast<std::size_t>(i)] << '\n';
  }
  write_file(path, out.str());
}

double silhouette(const Tensor<float>& features, std::span<const int> labels) {
  require(features.shape().rank() == 2, "features must be [N, D]");
  const int n = features.dim(0), d = features.dim(1);
  require(static_cast<int>(labels.size()) == n, "one label per feature row required");
  if (n == 0) return 0.0;
  const int k = *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<int> count(static_cast<std::size_t>(k), 0);
  for (int l : labels) {
    require(l >= 0, "labels must be non-negative");
    ++count[static_cast<std::size_t>(l)];
  }
  std::vector<double> s(static_cast<std::size_t>(n), 0.0);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) {
    const int li = labels[static_cast<std::size_t>(i)];
    if (count[static_cast<std::size_t>(li)] < 2) continue;
    std::vector<double> sum(static_cast<std::size_t>(k), 0.0);
    const auto a = features.row(i);
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      const auto b = features.row(j);
      double dd = 0.0;
      for (int c = 0; c < d; ++c) {
        const double diff = static_cast<double>(a[static_cast<std::size_t>(c)]) - b[static_cast<std::size_t>(c)];
        dd += diff * diff;
      }
      sum[static_cast<std::size_t>(labels[static_cast<std::size_t>(j)])] += std::sqrt(dd);
    }
    const double ai = sum[static_cast<std::size_t>(li)] / (count[static_cast<std::size_t>(li)] - 1);
    double bi = -1.0;
    for (int c = 0; c < k; ++c) {
      if (c == li || count[static_cast<std::size_t>(c)] == 0) continue;
      const double m = sum[static_cast<std::size_t>(c)] / count[static_cast<std::size_t>(c)];
      if (bi < 0.0 || m < bi) bi = m;
    }
    if (bi < 0.0) continue;
    const double den = std::max(ai, bi);
    s[static_cast<std::size_t>(i)] = den > 0.0 ? (bi - ai) / den : 0.0;
  }
  double total = 0.0;
  for (double v : s) total += v;
  return total / n;
}

}  // namespace uex
