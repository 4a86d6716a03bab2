#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "uex/bait/bait.hpp"
#include "uex/cli/cli.hpp"
#include "uex/core/archive.hpp"
#include "uex/core/digest.hpp"
#include "uex/core/parallel.hpp"
#include "uex/emn/emn.hpp"
#include "uex/eval/eval.hpp"

using namespace uex;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// Desk-scale settings.
constexpr int kSize = 32;
constexpr int kPriorEpochs = 20;
constexpr int kVictimEpochs = 12;
constexpr int kRepeats = 5;
constexpr int kSweepRepeats = 2;
constexpr std::uint64_t kSeed = 0;
constexpr double kCraftBeta = 100.0;
constexpr int kStageEpochs = 5;

// Pass thresholds.
constexpr double kCleanFloor = 0.90;
constexpr double kPoisonTrainFloor = 0.90;
constexpr double kPoisonTestCeiling = 0.35;
constexpr double kRuntimeCeilingSeconds = 3.0 * 3600.0;
constexpr double kEmnGap = 0.10;
constexpr double kSweepStepTolerance = 0.05;
constexpr double kRandomEndpointCeiling = 0.25;
constexpr double kMetaGradTolerance = 1e-4;
constexpr double kMetaGradSeconds = 60.0;
constexpr int kPropertyCases = 10000;
constexpr double kUpdateRatioCeiling = 0.5;
constexpr double kSurrogatePerturbedFloor = 0.85;
constexpr double kSurrogateCleanSlack = 0.15;
constexpr double kRatioTolerance = 0.03;
constexpr double kDefenseGap = 0.30;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(double v, int digits = 3) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v;
  return s.str();
}

struct Verdict {
  int id;
  bool pass;
  std::string detail;
};

class Ledger {
 public:
  void record(int id, bool pass, const std::string& detail) {
    verdicts_.push_back({id, pass, detail});
    std::cerr << "[criterion " << id << "] " << (pass ? "PASS" : "FAIL") << " " << detail << "\n";
  }
  void print(std::ostream& out) {
    std::sort(verdicts_.begin(), verdicts_.end(), [](const Verdict& a, const Verdict& b) { return a.id < b.id; });
    for (const auto& v : verdicts_)
      out << "criterion " << v.id << ": " << (v.pass ? "PASS" : "FAIL") << "  " << v.detail << "\n";
  }
  bool all_pass() const {
    return std::all_of(verdicts_.begin(), verdicts_.end(), [](const Verdict& v) { return v.pass; });
  }
  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& v : verdicts_) j.push_back({{"criterion", v.id}, {"pass", v.pass}, {"detail", v.detail}});
    return j;
  }

 private:
  std::vector<Verdict> verdicts_;
};

void progress(const std::string& what, Clock::time_point start) {
  std::cerr << "[" << fmt(seconds_since(start), 0) << "s] " << what << std::endl;
}

cli::DataSpec desk_data(const std::string& name) {
  cli::DataSpec d;
  d.name = name;
  d.size = kSize;
  d.seed = kSeed;
  return d;
}

ArchSpec desk_arch() {
  ArchSpec a;
  a.height = a.width = kSize;
  return a;
}

TrainConfig victim_train() {
  TrainConfig t;
  t.epochs = kVictimEpochs;
  return t;
}

double final_train_accuracy(const EvalReport& r) { return r.perturbed_train_accuracy; }

// ---- oracle criteria ----

void criterion4(Ledger& ledger) {
  const auto t0 = Clock::now();
  ArchSpec a;
  a.id = "linear";
  a.channels = 1;
  a.height = 4;
  a.width = 3;
  const auto net = make_network<double>(a, 3);
  const auto dnet = make_network<Dual<double>>(a, 3);
  const ModelState m = build_model(a, 3, RandomInit{1});
  const std::vector<double> theta(m.params.begin(), m.params.end());
  Rng rng(5);
  Tensor<double> x(Shape{6, 1, 4, 3});
  for (auto& v : x.vec()) v = rng.uniform(0.2, 0.8);
  const std::vector<int> y{0, 1, 2, 0, 1, 2}, t{1, 2, 0, 2, 0, 1};
  Tensor<double> d(Shape{3, 1, 4, 3});
  for (auto& v : d.vec()) v = rng.uniform(-0.05, 0.05);
  const BankGradient<double> g = bank_meta_gradient<double>(*net, *dnet, theta, x, y, t, d, 0.5, 1, true);
  double worst = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double o = d[i], h = 1e-6;
    d[i] = o + h;
    const double lp = bank_outer_loss<double>(*net, theta, x, y, t, d, 0.5, 1);
    d[i] = o - h;
    const double lm = bank_outer_loss<double>(*net, theta, x, y, t, d, 0.5, 1);
    d[i] = o;
    const double fd = (lp - lm) / (2.0 * h);
    worst = std::max(worst, std::abs(fd - g.grad[i]) / std::max(std::abs(fd), 1e-3));
  }
  const double secs = seconds_since(t0);
  ledger.record(4, worst <= kMetaGradTolerance && secs < kMetaGradSeconds && m.params.size() <= 50,
                "params " + std::to_string(m.params.size()) + ", max rel err " + fmt(worst, 9) + " (<= 1e-4), " +
                    fmt(secs, 2) + "s");
}

void criterion5(Ledger& ledger) {
  Rng rng(21);
  int agree = 0;
  for (int c = 0; c < kPropertyCases; ++c) {
    const int b = 1 + rng.below(8), k = 2 + rng.below(9);
    Tensor<double> logits(Shape{b, k});
    for (auto& v : logits.vec()) v = static_cast<double>(rng.below(5)) - 2.0;  // many ties
    std::vector<int> gt(static_cast<std::size_t>(b));
    for (auto& g : gt) g = rng.below(k);
    const TargetMode mode = rng.below(2) == 0 ? TargetMode::hard_negative : TargetMode::most_dissimilar;
    const std::vector<int> got = select_targets(logits, gt, mode, rng);
    bool ok = true;
    for (int i = 0; i < b; ++i) {
      int best = -1;
      for (int j = 0; j < k; ++j) {
        if (j == gt[static_cast<std::size_t>(i)]) continue;
        const double v = logits.row(i)[static_cast<std::size_t>(j)];
        if (best < 0) {
          best = j;
          continue;
        }
        const double w = logits.row(i)[static_cast<std::size_t>(best)];
        if (mode == TargetMode::hard_negative ? v > w : v < w) best = j;
      }
      ok = ok && got[static_cast<std::size_t>(i)] == best;
    }
    agree += ok;
  }
  ledger.record(5, agree == kPropertyCases,
                std::to_string(agree) + "/" + std::to_string(kPropertyCases) + " cases agree with brute force");
}

void criterion6(Ledger& ledger) {
  Rng rng(31);
  int fails = 0;
  for (int c = 0; c < kPropertyCases; ++c) {
    const double eps = rng.uniform(1e-4, 0.5);
    std::vector<float> d(static_cast<std::size_t>(1 + rng.below(16)));
    for (auto& v : d) v = static_cast<float>(rng.uniform(-2.0, 2.0));
    project_linf(d, eps);
    std::vector<float> again = d;
    project_linf(again, eps);
    bool ok = again == d;
    for (float v : d) ok = ok && std::abs(v) <= static_cast<float>(eps);
    fails += !ok;
  }
  int gen_cases = 0;
  const Rational budgets[] = {{8, 255}, {16, 255}, {1, 255}, {1, 10}};
  for (int gi = 0; gen_cases < kPropertyCases; ++gi) {
    Generator g(GeneratorConfig{3, 8, 8, 2, 1}, static_cast<std::uint64_t>(gi));
    for (auto& p : g.params()) p *= static_cast<float>(rng.uniform(0.5, 50.0));
    const Rational eps = budgets[gi % 4];
    Tensor<float> x(Shape{50, 3, 8, 8});
    for (auto& v : x.vec()) v = static_cast<float>(rng.uniform());
    const Tensor<float> out = generate(g, x, eps);
    for (int i = 0; i < 50; ++i, ++gen_cases) {
      bool ok = true;
      for (float v : out.row(i)) ok = ok && std::abs(v) <= static_cast<float>(eps.value());
      fails += !ok;
    }
  }
  const Rational eps{8, 255};
  PerturbationBank bank = PerturbationBank::zeros(4, 1, 3, 3, eps);
  for (int c = 0; c < kPropertyCases; ++c) {
    const int n = 1 + rng.below(6);
    Tensor<float> d(Shape{n, 1, 3, 3});
    for (auto& v : d.vec()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (auto& l : labels) l = rng.below(4);
    bank = aggregate_classwise(d, labels, std::move(bank), rng.uniform(0.0, 0.99));
    fails += !bank.within_budget();
  }
  PerturbationBank pb = PerturbationBank::zeros(3, 1, 4, 4, eps);
  for (int c = 0; c < kPropertyCases; ++c) {
    if (c % 100 == 0)
      for (auto& v : pb.deltas.vec()) v = static_cast<float>(rng.uniform(-eps.value(), eps.value()));
    ImageBatch b;
    b.pixels = Tensor<float>(Shape{1, 1, 4, 4});
    for (auto& v : b.pixels.vec()) v = static_cast<float>(rng.below(3) == 0 ? rng.below(2) : rng.uniform());
    b.labels = {rng.below(3)};
    const ImageBatch out = apply_bank(b, pb, b.labels);
    bool ok = true;
    for (float v : out.pixels.vec()) ok = ok && v >= 0.0f && v <= 1.0f;
    fails += !ok;
  }
  ledger.record(6, fails == 0,
                std::to_string(4 * kPropertyCases) + " property cases over 4 properties, " + std::to_string(fails) +
                    " violations");
}

bool trace_ok(const UpdateTrace& t) {
  double top = 0.0;
  for (std::size_t k = 0; k < t.groups.size(); ++k)
    for (int e = 0; e < t.epochs(); ++e) {
      const double v = t.normalized[static_cast<std::size_t>(e)][k];
      if (!(v >= 0.0 && v <= 1.0)) return false;
      if (e > 0 && v < t.normalized[static_cast<std::size_t>(e - 1)][k]) return false;
      top = std::max(top, v);
    }
  return t.normalizer == 0.0 || top == 1.0;
}

bool worked_examples_ok() {
  UpdateTrace one;
  one.groups = {"g"};
  one.delta = {{1}, {1}, {1}, {1}};
  const UpdateTrace n1 = normalize_trace(one);
  bool ok = n1.normalizer == 4.0;
  const double expect[] = {0.25, 0.5, 0.75, 1.0};
  for (int t = 0; t < 4; ++t) ok = ok && n1.normalized[static_cast<std::size_t>(t)][0] == expect[t];
  UpdateTrace two;
  two.groups = {"a", "b"};
  two.delta = {{1, 3}, {1, 1}};
  const UpdateTrace n2 = normalize_trace(two);
  ok = ok && n2.normalized[1][0] == 0.5 && n2.normalized[1][1] == 1.0 && n2.normalized[0][1] == 0.75;
  UpdateTrace zero;
  zero.groups = {"a"};
  zero.delta = {{0}, {0}};
  const UpdateTrace nz = normalize_trace(zero);
  ok = ok && nz.normalized[0][0] == 0.0 && nz.normalized[1][0] == 0.0;
  return ok && normalize_trace_with(one, 8.0).normalized[3][0] == 0.5;
}

// ---- determinism ----

std::vector<std::string> run_pipeline(const fs::path& dir) {
  const std::vector<std::string> data{"--size", "8", "--train-per-class", "12", "--test-per-class", "4",
                                      "--deterministic"};
  auto call = [&](std::vector<std::string> args) {
    args.insert(args.begin(), "uex");
    args.insert(args.end(), data.begin(), data.end());
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    if (code != 0) throw Error("pipeline step '" + args[1] + "' failed: " + err.str());
  };
  const std::string ck = (dir / "prior.ckpt").string(), bank = (dir / "bank.uex").string(),
                    emn = (dir / "emn.uex").string();
  call({"pretrain", "--out", ck, "--epochs", "2", "--base-width", "4", "--seed", "1"});
  call({"craft", "--method", "bait", "--surrogate", ck, "--out", bank, "--stages", "1,1,1", "--mode", "direct_bank",
        "--beta", "100", "--seed", "2"});
  call({"craft", "--method", "bait", "--surrogate", ck, "--out", (dir / "gen.uex").string(), "--stages", "1,1,1",
        "--gen-width", "2", "--res-blocks", "1", "--seed", "2"});
  call({"craft", "--method", "emn", "--out", emn, "--alternations", "2", "--train-steps", "2", "--base-width", "4",
        "--seed", "3"});
  call({"eval", "--victim", "pretrained:" + ck, "--bank", bank, "--repeats", "2", "--epochs", "2", "--defense",
        "mixup:1", "--seed", "4", "--out-dir", (dir / "eval").string()});
  call({"ablate", "--mode", "progressive_replace", "--victim", "pretrained:" + ck, "--bank", emn, "--repeats", "1",
        "--epochs", "1", "--seed", "5", "--out-dir", (dir / "ablate").string()});
  std::vector<std::string> digests;
  for (const char* f : {"prior.ckpt", "bank.uex", "bank.uex.log.csv", "gen.uex", "emn.uex", "eval/report.curves.csv",
                        "eval/report.trace0.csv", "eval/summary.csv", "ablate/summary.csv"})
    digests.push_back(sha256_file(dir / f));
  return digests;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("Desk-scale acceptance run: one PASS/FAIL line per criterion");
  std::string out_dir;
  bool strict = false;
  app.add_option("--out-dir", out_dir, "Also write artifacts and a JSON verdict here");
  app.add_flag("--strict", strict, "Exit non-zero when any criterion fails");
  CLI11_PARSE(app, argc, argv);

  set_deterministic(true);
  const auto start = Clock::now();
  Ledger ledger;
  try {
    criterion4(ledger);
    criterion5(ledger);
    criterion6(ledger);
    progress("oracle criteria done", start);

    const SplitDataset prior = desk_data("glyphs-prior").load();
    const SplitDataset down = desk_data("glyphs-downstream").load();
    TrainConfig pc;
    pc.epochs = kPriorEpochs;
    pc.seed = kSeed;
    const PretrainResult pre = pretrain(build_model(desk_arch(), prior.class_count, RandomInit{kSeed}), prior, pc);
    progress("prior test accuracy " + fmt(pre.test_accuracy), start);

    VictimSpec pretrained;
    pretrained.arch = desk_arch();
    pretrained.prior = pre.state;
    pretrained.train = victim_train();
    VictimSpec scratch;
    scratch.arch = desk_arch();
    scratch.train = victim_train();

    const EvalReport clean = evaluate_unlearnability(nullptr, pretrained, down, {}, 1.0, kRepeats, kSeed);
    progress("clean pretrained victim " + fmt(clean.clean_test_accuracy), start);

    CraftConfig cc;
    cc.mode = CraftMode::direct_bank;
    cc.beta = kCraftBeta;
    cc.seed = kSeed;
    CurriculumSchedule schedule;
    schedule.stage_epochs = {kStageEpochs, kStageEpochs, kStageEpochs};
    const ModelState surrogate = build_model(pre.state.arch, down.class_count, FromState{&pre.state, kSeed + 1});
    const CraftResult crafted = craft(cc, surrogate, schedule, down, [&](const CraftLogRow& r) {
      progress("craft epoch " + std::to_string(r.epoch) + " perturbed " + fmt(r.acc_perturbed_train) + " clean " +
                   fmt(r.acc_clean_train),
               start);
    });
    const PerturbationSource bait = crafted.bank;
    const EvalReport poisoned = evaluate_unlearnability(&bait, pretrained, down, {}, 1.0, kRepeats, kSeed);
    progress("BAIT pretrained victim " + fmt(poisoned.clean_test_accuracy), start);
    const double runtime = seconds_since(start);
    ledger.record(1,
                  clean.clean_test_accuracy >= kCleanFloor && final_train_accuracy(poisoned) >= kPoisonTrainFloor &&
                      poisoned.clean_test_accuracy <= kPoisonTestCeiling && runtime <= kRuntimeCeilingSeconds,
                  "clean " + fmt(clean.clean_test_accuracy) + " (>= 0.90), BAIT perturbed-train " +
                      fmt(final_train_accuracy(poisoned)) + " (>= 0.90), BAIT clean-test " +
                      fmt(poisoned.clean_test_accuracy) + " +- " + fmt(poisoned.clean_test_sd) + " (<= 0.35), " +
                      fmt(runtime, 0) + "s");

    EmnConfig ec;
    ec.seed = kSeed;
    const ModelState emn_surrogate = build_model(desk_arch(), down.class_count, RandomInit{kSeed + 2});
    const EmnResult emn = emn_craft(down, emn_surrogate, ec);
    const PerturbationSource emn_src = emn.deltas;
    const EvalReport emn_report = evaluate_unlearnability(&emn_src, pretrained, down, {}, 1.0, kRepeats, kSeed);
    progress("EMN pretrained victim " + fmt(emn_report.clean_test_accuracy), start);
    ledger.record(2, poisoned.clean_test_accuracy <= emn_report.clean_test_accuracy - kEmnGap,
                  "BAIT " + fmt(poisoned.clean_test_accuracy) + " vs EMN " + fmt(emn_report.clean_test_accuracy) +
                      " (gap " + fmt(emn_report.clean_test_accuracy - poisoned.clean_test_accuracy) +
                      ", needs >= 0.10), 5 seeds");

    const std::vector<EvalReport> sweep = run_prior_ablation(&bait, down, pretrained, AblationMode::progressive_replace,
                                                             {}, 1.0, kSweepRepeats, kSeed);
    bool monotone = true;
    std::string path;
    for (std::size_t i = 0; i < sweep.size(); ++i) {
      path += (i ? " " : "") + fmt(sweep[i].clean_test_accuracy);
      if (i > 0 && sweep[i].clean_test_accuracy > sweep[i - 1].clean_test_accuracy + kSweepStepTolerance)
        monotone = false;
    }
    const double endpoint = sweep.back().clean_test_accuracy;
    progress("prior-removal sweep " + path, start);
    ledger.record(3, monotone && endpoint <= kRandomEndpointCeiling,
                  "sweep " + path + " (step tol 0.05), random endpoint " + fmt(endpoint) + " (<= 0.25)");

    const EvalReport random_clean = evaluate_unlearnability(nullptr, scratch, down, {}, 1.0, kSweepRepeats, kSeed);
    const EvalReport random_bait = evaluate_unlearnability(&bait, scratch, down, {}, 1.0, kSweepRepeats, kSeed);
    double clean_total = 0.0, bait_total = 0.0;
    for (int r = 0; r < kSweepRepeats; ++r) {
      const double m = random_clean.traces[static_cast<std::size_t>(r)].normalizer;
      clean_total += total_update(normalize_trace_with(random_clean.traces[static_cast<std::size_t>(r)], m));
      bait_total += total_update(normalize_trace_with(random_bait.traces[static_cast<std::size_t>(r)], m));
    }
    const double update_ratio = bait_total / clean_total;

    const EvalReport half = evaluate_unlearnability(&bait, pretrained, down, {}, 0.5, kRepeats, kSeed);
    const double r0 = clean.clean_test_accuracy, r5 = half.clean_test_accuracy, r1 = poisoned.clean_test_accuracy;
    ledger.record(9, r5 <= r0 + kRatioTolerance && r1 <= r5 + kRatioTolerance,
                  "ratio 0 / 0.5 / 1: " + fmt(r0) + " / " + fmt(r5) + " / " + fmt(r1) + " (tol 0.03)");
    progress("ratio sweep done", start);

    std::vector<EvalReport> defended;
    std::string defense_line;
    bool defenses_hold = true;
    for (const char* d : {"cutout:8", "mixup:1", "jpeg:50"}) {
      defended.push_back(
          evaluate_unlearnability(&bait, pretrained, down, DefenseSpec::parse(d), 1.0, kSweepRepeats, kSeed));
      const double acc = defended.back().clean_test_accuracy;
      defenses_hold = defenses_hold && acc <= clean.clean_test_accuracy - kDefenseGap;
      defense_line += std::string(d) + " " + fmt(acc) + ", ";
      progress(std::string("defense ") + d + " " + fmt(acc), start);
    }

    std::vector<const EvalReport*> all{&clean, &poisoned, &emn_report, &random_clean, &random_bait, &half};
    for (const auto& r : sweep) all.push_back(&r);
    for (const auto& r : defended) all.push_back(&r);
    int runs = 0, bad_traces = 0;
    for (const EvalReport* r : all)
      for (const auto& t : r->traces) {
        ++runs;
        bad_traces += !trace_ok(t);
      }
    const bool examples = worked_examples_ok();
    ledger.record(7, examples && bad_traces == 0 && update_ratio <= kUpdateRatioCeiling,
                  std::string("worked examples ") + (examples ? "exact" : "WRONG") + ", " + std::to_string(runs) +
                      " finetune traces checked, " + std::to_string(bad_traces) +
                      " invalid, random-victim BAIT/clean total update " + fmt(update_ratio) + " (<= 0.5)");

    double stage_p = 0.0, stage_c = 0.0;
    int stage_rows = 0;
    for (const auto& row : crafted.log)
      if (row.stage == 3) {
        stage_p += row.acc_perturbed_train;
        stage_c += row.acc_clean_train;
        ++stage_rows;
      }
    stage_p /= stage_rows;
    stage_c /= stage_rows;
    const double chance = 1.0 / down.class_count;
    ledger.record(8, stage_p >= kSurrogatePerturbedFloor && stage_c <= chance + kSurrogateCleanSlack,
                  "final-stage mean surrogate perturbed-train " + fmt(stage_p) + " (>= 0.85), clean-train " +
                      fmt(stage_c) + " (<= " + fmt(chance + kSurrogateCleanSlack, 2) + ")");

    const fs::path a = fs::temp_directory_path() / "uex_acceptance_a", b = fs::temp_directory_path() / "uex_acceptance_b";
    fs::remove_all(a);
    fs::remove_all(b);
    fs::create_directories(a);
    fs::create_directories(b);
    const std::vector<std::string> da = run_pipeline(a), db = run_pipeline(b);
    fs::remove_all(a);
    fs::remove_all(b);
    const EvalReport rerun = evaluate_unlearnability(&bait, pretrained, down, {}, 1.0, 1, kSeed);
    const bool reproducible = da == db && rerun.clean_test_runs[0] == poisoned.clean_test_runs[0] &&
                              rerun.perturbed_train_runs[0] == poisoned.perturbed_train_runs[0];
    ledger.record(10, defenses_hold && reproducible,
                  defense_line + "clean " + fmt(clean.clean_test_accuracy) + " (each <= clean - 0.30); " +
                      std::to_string(da.size()) + " pipeline artifacts " + (da == db ? "bit-identical" : "DIFFER") +
                      " across reruns, desk victim rerun " +
                      (rerun.clean_test_runs[0] == poisoned.clean_test_runs[0] ? "identical" : "DIFFERS"));

    if (!out_dir.empty()) {
      fs::create_directories(out_dir);
      save_checkpoint(fs::path(out_dir) / "prior.ckpt", pre.state);
      save_bank(fs::path(out_dir) / "bait_bank.uex", crafted.bank);
      write_craft_log(fs::path(out_dir) / "bait_bank.log.csv", crafted.log);
      std::vector<EvalReport> table{clean, poisoned, emn_report, half, random_clean, random_bait};
      table[0].label = "clean";
      table[1].label = "bait";
      table[2].label = "emn";
      table[3].label = "bait-ratio-0.5";
      table[4].label = "random-clean";
      table[5].label = "random-bait";
      for (const auto& r : sweep) table.push_back(r);
      for (const auto& r : defended) {
        table.push_back(r);
        table.back().label = "bait-" + r.defense;
      }
      write_file(fs::path(out_dir) / "summary.txt", render_summary_table(table));
      write_file(fs::path(out_dir) / "summary.csv", render_summary_csv(table));
      write_file(fs::path(out_dir) / "verdict.json",
                 nlohmann::json{{"criteria", ledger.to_json()}, {"wall_seconds", seconds_since(start)}}.dump(2));
    }
  } catch (const std::exception& e) {
    std::cerr << "acceptance run aborted: " << e.what() << "\n";
    ledger.print(std::cout);
    return 1;
  }
  ledger.print(std::cout);
  std::cout << "total " << fmt(seconds_since(start), 0) << "s\n";
  return strict && !ledger.all_pass() ? 1 : 0;
}
