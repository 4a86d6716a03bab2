#include "uex/cli/cli.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "uex/bait/bait.hpp"
#include "uex/core/archive.hpp"
#include "uex/core/digest.hpp"
#include "uex/core/error.hpp"
#include "uex/core/parallel.hpp"
#include "uex/emn/emn.hpp"
#include "uex/eval/eval.hpp"
#include "uex/io/plot.hpp"

namespace uex::cli {

namespace fs = std::filesystem;

nlohmann::json DataSpec::to_json() const {
  return {{"name", name},
          {"root", root.string()},
          {"size", size},
          {"classes", classes},
          {"train_per_class", train_per_class},
          {"test_per_class", test_per_class},
          {"prior_classes", prior_classes},
          {"downstream_classes", downstream_classes},
          {"seed", seed}};
}

DataSpec DataSpec::from_json(const nlohmann::json& j) {
  DataSpec d;
  d.name = j.value("name", d.name);
  d.root = j.value("root", d.root.string());
  d.size = j.value("size", d.size);
  d.classes = j.value("classes", d.classes);
  d.train_per_class = j.value("train_per_class", d.train_per_class);
  d.test_per_class = j.value("test_per_class", d.test_per_class);
  d.prior_classes = j.value("prior_classes", d.prior_classes);
  d.downstream_classes = j.value("downstream_classes", d.downstream_classes);
  d.seed = j.value("seed", d.seed);
  return d;
}

SplitDataset DataSpec::load() const {
  std::string base = name, side;
  if (const auto dash = name.find('-'); dash != std::string::npos) {
    base = name.substr(0, dash);
    side = name.substr(dash + 1);
  }
  require(base == "glyphs" || base == "cifar10", "unknown dataset '" + name + "'");
  require(side.empty() || side == "prior" || side == "downstream", "unknown split '" + side + "' in '" + name + "'");
  require(size >= 8, "image size must be at least 8");
  if (base == "cifar10") {
    require(!root.empty(), "cifar10 needs --data-root");
    if (!fs::is_directory(root)) throw IoError("data root " + root.string() + " does not exist");
  }
  LoadOptions o;
  o.height = o.width = size;
  o.class_count = classes;
  o.train_per_class = train_per_class;
  o.test_per_class = test_per_class;
  o.seed = seed;
  SplitDataset all = load_dataset(base, root, o);
  if (side.empty()) return all;
  auto [prior, down] = make_disjoint_prior_split(all, prior_classes, downstream_classes, seed);
  return side == "prior" ? prior : down;
}

void ExperimentManifest::add_input(const fs::path& p) { inputs.emplace_back(p.string(), sha256_file(p)); }

void ExperimentManifest::add_output(const fs::path& p) { outputs.emplace_back(p.string(), sha256_file(p)); }

nlohmann::json ExperimentManifest::to_json() const {
  auto files = [](const auto& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& [path, sha] : v) a.push_back({{"path", path}, {"sha256", sha}});
    return a;
  };
  return {{"command", command},     {"config", config},
          {"inputs", files(inputs)}, {"outputs", files(outputs)},
          {"seeds", seeds},         {"version", toolkit_version()},
          {"deterministic", deterministic}, {"wall_seconds", wall_seconds}};
}

void write_manifest(const fs::path& path, const ExperimentManifest& m) { write_file(path, m.to_json().dump(2) + "\n"); }

FileLock::FileLock(const fs::path& dir) {
  const fs::path p = (dir.empty() ? fs::path(".") : dir) / ".uex.lock";
  fd_ = ::open(p.c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
  if (fd_ < 0) throw IoError("cannot open lock file " + p.string());
  if (::flock(fd_, LOCK_EX) != 0) {
    ::close(fd_);
    throw IoError("cannot lock " + p.string());
  }
}

FileLock::~FileLock() {
  if (fd_ >= 0) {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ','))
    if (!cur.empty()) out.push_back(cur);
  return out;
}

std::array<int, 3> parse_stages(const std::string& s) {
  const auto parts = split_list(s);
  require(parts.size() == 3, "--stages needs three comma-separated epoch counts, got '" + s + "'");
  std::array<int, 3> out{};
  for (std::size_t i = 0; i < 3; ++i) {
    try {
      std::size_t used = 0;
      out[i] = std::stoi(parts[i], &used);
      require(used == parts[i].size(), "bad stage length '" + parts[i] + "'");
    } catch (const std::logic_error&) {
      throw InvalidArgument("bad stage length '" + parts[i] + "'");
    }
  }
  return out;
}

const char* toolkit_version() { return UEX_VERSION; }

namespace {

struct InvariantFailure : Error {
  using Error::Error;
};

using Clock = std::chrono::steady_clock;

nlohmann::json load_config(const std::string& path) {
  if (path.empty()) return nlohmann::json::object();
  try {
    nlohmann::json j = nlohmann::json::parse(read_file(path));
    require(j.is_object(), "config file must hold a JSON object");
    return j;
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(path + ": " + e.what());
  }
}

nlohmann::json section(const nlohmann::json& cfg, const char* key) {
  return cfg.contains(key) ? cfg.at(key) : nlohmann::json::object();
}

nlohmann::json train_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},
          {"lr", t.lr},
          {"batch_size", t.batch_size},
          {"seed", t.seed},
          {"optimizer", t.optimizer == OptimizerKind::adam ? "adam" : "sgd"}};
}

TrainConfig train_from_json(const nlohmann::json& j, TrainConfig t) {
  t.epochs = j.value("epochs", t.epochs);
  t.lr = j.value("lr", t.lr);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.seed = j.value("seed", t.seed);
  const std::string opt = j.value("optimizer", std::string(t.optimizer == OptimizerKind::adam ? "adam" : "sgd"));
  require(opt == "adam" || opt == "sgd", "unknown optimizer '" + opt + "'");
  t.optimizer = opt == "adam" ? OptimizerKind::adam : OptimizerKind::sgd;
  return t;
}

template <class T>
void override_if(const CLI::Option* o, T& dst, const T& v) {
  if (o->count() > 0) dst = v;
}

// Options shared by every data-consuming verb.
struct DataOpts {
  DataSpec spec;
  std::string root;
  std::vector<CLI::Option*> opts;

  void add(CLI::App* app, const std::string& default_name) {
    spec.name = default_name;
    opts = {app->add_option("--data", spec.name, "glyphs[-prior|-downstream] or cifar10[-prior|-downstream]"),
            app->add_option("--data-root", root, "Directory holding the dataset files"),
            app->add_option("--size", spec.size, "Image side length"),
            app->add_option("--classes", spec.classes, "Synthetic class count"),
            app->add_option("--train-per-class", spec.train_per_class),
            app->add_option("--test-per-class", spec.test_per_class),
            app->add_option("--prior-classes", spec.prior_classes),
            app->add_option("--downstream-classes", spec.downstream_classes),
            app->add_option("--data-seed", spec.seed)};
  }

  DataSpec resolve(const nlohmann::json& cfg) const {
    DataSpec d = DataSpec::from_json(section(cfg, "data"));
    if (!cfg.contains("data") || !cfg.at("data").contains("name")) d.name = spec.name;
    override_if(opts[0], d.name, spec.name);
    if (opts[1]->count()) d.root = root;
    override_if(opts[2], d.size, spec.size);
    override_if(opts[3], d.classes, spec.classes);
    override_if(opts[4], d.train_per_class, spec.train_per_class);
    override_if(opts[5], d.test_per_class, spec.test_per_class);
    override_if(opts[6], d.prior_classes, spec.prior_classes);
    override_if(opts[7], d.downstream_classes, spec.downstream_classes);
    override_if(opts[8], d.seed, spec.seed);
    return d;
  }
};

struct TrainOpts {
  TrainConfig cfg;
  std::string optimizer = "adam";
  std::vector<CLI::Option*> opts;

  void add(CLI::App* app, int epochs) {
    cfg.epochs = epochs;
    opts = {app->add_option("--epochs", cfg.epochs), app->add_option("--lr", cfg.lr),
            app->add_option("--batch", cfg.batch_size), app->add_option("--optimizer", optimizer)->check(CLI::IsMember({"adam", "sgd"}))};
  }

  TrainConfig resolve(const nlohmann::json& cfg_json) const {
    TrainConfig base;
    base.epochs = cfg.epochs;
    TrainConfig t = train_from_json(section(cfg_json, "train"), base);
    override_if(opts[0], t.epochs, cfg.epochs);
    override_if(opts[1], t.lr, cfg.lr);
    override_if(opts[2], t.batch_size, cfg.batch_size);
    if (opts[3]->count()) t.optimizer = optimizer == "adam" ? OptimizerKind::adam : OptimizerKind::sgd;
    require(t.epochs >= 0 && t.batch_size >= 1 && t.lr >= 0.0, "invalid training settings");
    return t;
  }
};

struct Common {
  std::string config;
  bool dry_run = false;
  bool deterministic = false;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;

  void add(CLI::App* app) {
    app->add_option("--config", config, "JSON file; keys mirror the configuration field names")->check(CLI::ExistingFile);
    app->add_flag("--dry-run", dry_run, "Validate and print the resolved configuration without writing anything");
    app->add_flag("--deterministic", deterministic, "Single-threaded math kernels");
    seed_opt = app->add_option("--seed", seed, "Root seed");
  }
};

ArchSpec arch_for(const std::string& id, int base_width, const ImageBatch& b) {
  ArchSpec a;
  a.id = id;
  a.base_width = base_width;
  a.channels = b.channels();
  a.height = b.height();
  a.width = b.width();
  return a;
}

void require_file(const std::string& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw IoError(what + " '" + p + "' does not exist");
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

fs::path sibling(const fs::path& p, const std::string& suffix) { return fs::path(p.string() + suffix); }

void check_unit(double v, const std::string& what) {
  if (!(v >= 0.0 && v <= 1.0)) throw InvariantFailure(what + " outside [0, 1]: " + std::to_string(v));
}

void check_trace(const UpdateTrace& t, const std::string& what) {
  double top = 0.0;
  for (std::size_t k = 0; k < t.groups.size(); ++k)
    for (int e = 0; e < t.epochs(); ++e) {
      const double v = t.normalized[static_cast<std::size_t>(e)][k];
      check_unit(v, what + " normalized update");
      if (e > 0 && v < t.normalized[static_cast<std::size_t>(e - 1)][k])
        throw InvariantFailure(what + " normalized update decreases in group " + t.groups[k]);
      top = std::max(top, v);
    }
  if (t.normalizer > 0.0 && std::abs(top - 1.0) > 1e-12) throw InvariantFailure(what + " normalized update peaks below 1");
}

struct VictimOpts {
  std::string victim = "random";
  std::string arch = "rn-mini";
  int base_width = 8;
  std::string replace, freeze;

  void add(CLI::App* app) {
    app->add_option("--victim", victim, "pretrained:CHECKPOINT or random");
    app->add_option("--arch", arch, "Architecture for random victims");
    app->add_option("--base-width", base_width, "Width for random victims");
    app->add_option("--replace", replace, "Comma-separated groups re-drawn at random");
    app->add_option("--freeze", freeze, "Comma-separated groups kept fixed");
  }

  VictimSpec resolve(const ImageBatch& shape, ExperimentManifest* m) const {
    VictimSpec v;
    if (victim.rfind("pretrained:", 0) == 0) {
      const std::string path = victim.substr(11);
      require_file(path, "checkpoint");
      v.prior = load_checkpoint(path);
      v.arch = v.prior->arch;
      require(v.arch.channels == shape.channels() && v.arch.height == shape.height() && v.arch.width == shape.width(),
              "checkpoint input shape does not match the data");
      if (m) m->add_input(path);
    } else {
      require(victim == "random", "--victim must be 'random' or 'pretrained:PATH'");
      v.arch = arch_for(arch, base_width, shape);
    }
    v.replaced = split_list(replace);
    v.frozen = split_list(freeze);
    const ParamLayout layout = make_layout(v.arch, 2);
    for (const auto& g : v.replaced) require(layout.has_group(g), "unknown group '" + g + "'");
    for (const auto& g : v.frozen) require(layout.has_group(g), "unknown group '" + g + "'");
    return v;
  }
};

struct Context {
  std::ostream& out;
  std::ostream& err;
};

// ---- pretrain ----

struct PretrainCmd {
  Common common;
  DataOpts data;
  TrainOpts train;
  std::string arch = "rn-mini";
  int base_width = 8;
  std::string out;

  void add(CLI::App& root) {
    CLI::App* app = root.add_subcommand("pretrain", "Train a backbone on the prior split");
    common.add(app);
    data.add(app, "glyphs-prior");
    train.add(app, 12);
    app->add_option("--arch", arch)->check(CLI::IsMember(known_architectures()));
    app->add_option("--base-width", base_width);
    app->add_option("--out", out, "Checkpoint path")->required();
  }

  int run(Context& ctx) {
    const auto t0 = Clock::now();
    const nlohmann::json cfgj = load_config(common.config);
    const DataSpec ds = data.resolve(cfgj);
    TrainConfig tc = train.resolve(cfgj);
    tc.seed = common.seed_opt->count() ? common.seed : section(cfgj, "train").value("seed", common.seed);
    ExperimentManifest m;
    m.command = "pretrain";
    m.config = {{"data", ds.to_json()}, {"train", train_json(tc)}, {"arch", arch}, {"base_width", base_width}};
    m.seeds = {tc.seed};
    m.deterministic = common.deterministic;
    const SplitDataset prior = ds.load();
    const ArchSpec a = arch_for(arch, base_width, prior.train);
    if (common.dry_run) {
      ctx.out << m.to_json().dump(2) << "\n";
      return 0;
    }
    ensure_parent(out);
    FileLock lock(fs::path(out).parent_path());
    const PretrainResult r = pretrain(build_model(a, prior.class_count, RandomInit{tc.seed}), prior, tc);
    if (!r.state.all_finite()) throw InvariantFailure("pretrained weights are not finite");
    save_checkpoint(out, r.state);
    m.add_output(out);
    m.config["test_accuracy"] = r.test_accuracy;
    m.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    write_manifest(sibling(out, ".manifest.json"), m);
    ctx.out << "prior test accuracy " << r.test_accuracy << "\n" << "wrote " << out << "\n";
    return 0;
  }
};

// ---- craft ----

struct CraftCmd {
  Common common;
  DataOpts data;
  std::string method = "bait";
  std::string surrogate = "random";
  std::string arch = "rn-mini";
  int base_width = 8;
  std::string out, log;
  // bait
  std::string stages = "30,30,30";
  double alpha = 0.1, beta = 0.001;
  int unroll = 1, batch = 64, gen_width = 64, res_blocks = 8;
  std::string eps = "8/255", mode = "generator";
  bool first_order = false;
  // emn
  int pgd_steps = 10, alternations = 10, train_steps = 10;
  std::string pgd_step = "0.8/255";
  double train_lr = 0.1, stop_accuracy = 0.99;
  std::map<std::string, CLI::Option*> o;

  void add(CLI::App& root) {
    CLI::App* app = root.add_subcommand("craft", "Craft a perturbation bank (bait) or per-sample deltas (emn)");
    common.add(app);
    data.add(app, "glyphs-downstream");
    o["method"] = app->add_option("--method", method)->check(CLI::IsMember({"bait", "emn"}));
    app->add_option("--surrogate", surrogate, "Checkpoint path or 'random'");
    app->add_option("--arch", arch);
    app->add_option("--base-width", base_width);
    app->add_option("--out", out, "Output archive")->required();
    app->add_option("--log", log, "Craft log CSV (default: OUT.log.csv)");
    o["stages"] = app->add_option("--stages", stages, "Epochs per curriculum stage, e.g. 30,30,30");
    o["alpha"] = app->add_option("--alpha", alpha);
    o["beta"] = app->add_option("--beta", beta);
    o["unroll"] = app->add_option("--unroll", unroll);
    o["batch"] = app->add_option("--batch", batch);
    o["eps"] = app->add_option("--eps", eps, "Budget as a rational, e.g. 8/255");
    o["mode"] = app->add_option("--mode", mode)->check(CLI::IsMember({"generator", "direct_bank"}));
    o["gen_width"] = app->add_option("--gen-width", gen_width);
    o["res_blocks"] = app->add_option("--res-blocks", res_blocks);
    o["first_order"] = app->add_flag("--first-order", first_order);
    o["pgd_steps"] = app->add_option("--pgd-steps", pgd_steps);
    o["pgd_step"] = app->add_option("--pgd-step", pgd_step, "PGD step as a rational");
    o["alternations"] = app->add_option("--alternations", alternations);
    o["train_steps"] = app->add_option("--train-steps", train_steps);
    o["train_lr"] = app->add_option("--train-lr", train_lr);
    o["stop_accuracy"] = app->add_option("--stop-accuracy", stop_accuracy);
  }

  CraftConfig bait_config(const nlohmann::json& cfgj) const {
    CraftConfig c = CraftConfig::from_json(section(cfgj, "craft"));
    override_if(o.at("alpha"), c.alpha, alpha);
    override_if(o.at("beta"), c.beta, beta);
    override_if(o.at("unroll"), c.unroll_n, unroll);
    override_if(o.at("batch"), c.batch_size, batch);
    if (o.at("eps")->count()) c.epsilon = Rational::parse(eps);
    if (o.at("mode")->count()) c.mode = mode == "generator" ? CraftMode::generator : CraftMode::direct_bank;
    override_if(o.at("gen_width"), c.generator_width, gen_width);
    override_if(o.at("res_blocks"), c.residual_blocks, res_blocks);
    if (first_order) c.second_order = false;
    if (common.seed_opt->count()) c.seed = common.seed;
    c.validate();
    return c;
  }

  EmnConfig emn_config(const nlohmann::json& cfgj) const {
    EmnConfig c = EmnConfig::from_json(section(cfgj, "emn"));
    if (o.at("eps")->count()) c.epsilon = Rational::parse(eps);
    override_if(o.at("pgd_steps"), c.pgd_steps, pgd_steps);
    if (o.at("pgd_step")->count()) c.pgd_step_size = Rational::parse(pgd_step).value();
    override_if(o.at("alternations"), c.alternations, alternations);
    override_if(o.at("train_steps"), c.train_steps, train_steps);
    override_if(o.at("train_lr"), c.train_lr, train_lr);
    override_if(o.at("stop_accuracy"), c.stop_accuracy, stop_accuracy);
    override_if(o.at("batch"), c.batch_size, batch);
    if (common.seed_opt->count()) c.seed = common.seed;
    c.validate();
    return c;
  }

  int run(Context& ctx) {
    const auto t0 = Clock::now();
    const nlohmann::json cfgj = load_config(common.config);
    std::string meth = cfgj.value("method", method);
    override_if(o.at("method"), meth, method);
    require(meth == "bait" || meth == "emn", "unknown method '" + meth + "'");
    const DataSpec ds = data.resolve(cfgj);
    ExperimentManifest m;
    m.command = "craft";
    m.deterministic = common.deterministic;
    m.config = {{"method", meth}, {"data", ds.to_json()}, {"surrogate", surrogate}};
    std::optional<CraftConfig> bc;
    std::optional<EmnConfig> ec;
    CurriculumSchedule sched;
    if (meth == "bait") {
      bc = bait_config(cfgj);
      if (cfgj.contains("stage_epochs")) sched.stage_epochs = cfgj.at("stage_epochs").get<std::array<int, 3>>();
      if (o.at("stages")->count()) sched.stage_epochs = parse_stages(stages);
      sched.validate();
      m.config["craft"] = bc->to_json();
      m.config["stage_epochs"] = sched.stage_epochs;
      m.seeds = {bc->seed};
    } else {
      ec = emn_config(cfgj);
      m.config["emn"] = ec->to_json();
      m.seeds = {ec->seed};
    }
    const SplitDataset down = ds.load();
    ModelState base;
    if (surrogate == "random") {
      base = build_model(arch_for(arch, base_width, down.train), down.class_count, RandomInit{m.seeds[0] + 1});
    } else {
      require_file(surrogate, "surrogate checkpoint");
      const ModelState ck = load_checkpoint(surrogate);
      m.add_input(surrogate);
      base = build_model(ck.arch, down.class_count, FromState{&ck, m.seeds[0] + 1});
    }
    require(base.arch.height == down.train.height() && base.arch.channels == down.train.channels(),
            "surrogate input shape does not match the data");
    if (common.dry_run) {
      ctx.out << m.to_json().dump(2) << "\n";
      return 0;
    }
    ensure_parent(out);
    FileLock lock(fs::path(out).parent_path());
    const fs::path log_path = log.empty() ? sibling(out, ".log.csv") : fs::path(log);
    ensure_parent(log_path);
    if (bc) {
      const CraftResult r = craft(*bc, base, sched, down, [&](const CraftLogRow& row) {
        ctx.err << "epoch " << row.epoch << " stage " << row.stage << " outer " << row.outer_loss << " acc(perturbed) "
                << row.acc_perturbed_train << " acc(clean) " << row.acc_clean_train << "\n";
      });
      if (!r.bank.within_budget()) throw InvariantFailure("bank exceeds its budget");
      save_bank(out, r.bank);
      write_craft_log(log_path, r.log);
      m.config["digest"] = r.bank.digest;
    } else {
      const EmnResult r = emn_craft(down, base, *ec, [&](int a, double acc) {
        ctx.err << "alternation " << a << " acc(perturbed) " << acc << "\n";
      });
      if (!r.deltas.within_budget()) throw InvariantFailure("deltas exceed their budget");
      save_sample_deltas(out, r.deltas);
      std::ostringstream csv;
      csv << "alternation,acc_perturbed_train\n";
      for (std::size_t i = 0; i < r.perturbed_accuracy.size(); ++i) csv << i + 1 << ',' << r.perturbed_accuracy[i] << '\n';
      write_file(log_path, csv.str());
      m.config["digest"] = r.deltas.digest;
    }
    m.add_output(out);
    m.add_output(log_path);
    m.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    write_manifest(sibling(out, ".manifest.json"), m);
    ctx.out << "wrote " << out << "\n";
    return 0;
  }
};

// ---- eval / ablate ----

struct EvalCmd {
  Common common;
  DataOpts data;
  TrainOpts train;
  VictimOpts victim;
  std::string bank, defense = "none", out_dir, ablation = "progressive_replace";
  double ratio = 1.0;
  int repeats = 5;
  bool ablate = false;
  CLI::Option *ratio_o = nullptr, *repeats_o = nullptr, *defense_o = nullptr;

  void add(CLI::App& root, bool is_ablate) {
    ablate = is_ablate;
    CLI::App* app = is_ablate ? root.add_subcommand("ablate", "Prior ablation: progressive replacement or single freezing")
                              : root.add_subcommand("eval", "Finetune victims on poisoned data and report clean accuracy");
    common.add(app);
    data.add(app, "glyphs-downstream");
    train.add(app, 12);
    victim.add(app);
    app->add_option("--bank", bank, "Bank or per-sample delta archive; omit for clean training");
    defense_o = app->add_option("--defense", defense, "none, cutout:M, mixup:B, cutmix:B or jpeg:Q");
    ratio_o = app->add_option("--ratio", ratio, "Share of training samples perturbed");
    repeats_o = app->add_option("--repeats", repeats);
    app->add_option("--out-dir", out_dir, "Report directory")->required();
    if (is_ablate)
      app->add_option("--mode", ablation)->check(CLI::IsMember({"progressive_replace", "freeze_each"}));
  }

  int run(Context& ctx) {
    const auto t0 = Clock::now();
    const nlohmann::json cfgj = load_config(common.config);
    const DataSpec ds = data.resolve(cfgj);
    const TrainConfig tc = train.resolve(cfgj);
    DefenseSpec def = cfgj.contains("defense") ? DefenseSpec::from_json(cfgj.at("defense")) : DefenseSpec{};
    if (defense_o->count()) def = DefenseSpec::parse(defense);
    double r = cfgj.value("ratio", ratio);
    override_if(ratio_o, r, ratio);
    int reps = cfgj.value("repeats", repeats);
    override_if(repeats_o, reps, repeats);
    const std::uint64_t seed = common.seed_opt->count() ? common.seed : cfgj.value("seed", common.seed);
    require(reps >= 1, "repeats must be at least 1");
    require(r >= 0.0 && r <= 1.0, "ratio must lie in [0, 1]");

    ExperimentManifest m;
    m.command = ablate ? "ablate" : "eval";
    m.deterministic = common.deterministic;
    const SplitDataset down = ds.load();
    def.validate(down.train.height(), down.train.width());
    VictimSpec v = victim.resolve(down.train, &m);
    v.train = tc;
    std::optional<PerturbationSource> src;
    if (!bank.empty()) {
      require_file(bank, "perturbation archive");
      src = load_source(bank);
      m.add_input(bank);
    }
    for (int i = 0; i < reps; ++i) m.seeds.push_back(seed + static_cast<std::uint64_t>(i));
    m.config = {{"data", ds.to_json()},     {"train", train_json(tc)}, {"victim", v.descriptor()},
                {"defense", def.to_json()}, {"ratio", r},               {"repeats", reps},
                {"seed", seed},             {"bank", bank}};
    if (ablate) m.config["mode"] = ablation;
    if (common.dry_run) {
      ctx.out << m.to_json().dump(2) << "\n";
      return 0;
    }
    fs::create_directories(out_dir);
    FileLock lock(out_dir);
    const PerturbationSource* sp = src ? &*src : nullptr;
    std::vector<EvalReport> reports;
    if (ablate) {
      reports = run_prior_ablation(sp, down, v, parse_ablation_mode(ablation), def, r, reps, seed);
    } else {
      reports.push_back(evaluate_unlearnability(sp, v, down, def, r, reps, seed));
      reports.back().label = src ? "poisoned" : "clean";
    }
    for (const auto& rep : reports) {
      check_unit(rep.clean_test_accuracy, "clean test accuracy");
      check_unit(rep.perturbed_train_accuracy, "perturbed train accuracy");
      for (std::size_t i = 0; i < rep.traces.size(); ++i) check_trace(rep.traces[i], rep.label);
      const fs::path stem = fs::path(out_dir) / (ablate ? "report_" + rep.label : std::string("report"));
      std::string safe = stem.string();
      for (auto& ch : safe)
        if (ch == ':') ch = '_';
      write_report(safe + ".json", rep);
      write_curves_csv(safe + ".curves.csv", rep);
      m.add_output(safe + ".json");
      m.add_output(safe + ".curves.csv");
      for (std::size_t i = 0; i < rep.traces.size(); ++i) {
        const fs::path tp = safe + ".trace" + std::to_string(i) + ".csv";
        write_trace_csv(tp, rep.traces[i]);
        m.add_output(tp);
      }
    }
    const std::string table = render_summary_table(reports);
    write_file(fs::path(out_dir) / "summary.txt", table);
    write_file(fs::path(out_dir) / "summary.csv", render_summary_csv(reports));
    m.add_output(fs::path(out_dir) / "summary.txt");
    m.add_output(fs::path(out_dir) / "summary.csv");
    m.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    write_manifest(fs::path(out_dir) / "manifest.json", m);
    ctx.out << table;
    return 0;
  }
};

// ---- diagnose ----

struct DiagnoseCmd {
  Common common;
  std::vector<std::string> traces;
  std::string craft_log, bank, out_dir;
  int scale = 16;

  void add(CLI::App& root) {
    CLI::App* app = root.add_subcommand("diagnose", "Plot update traces, craft logs and banks");
    common.add(app);
    app->add_option("--trace", traces, "Update-trace CSV files; plotted on one shared normalizer");
    app->add_option("--craft-log", craft_log, "Craft log CSV");
    app->add_option("--bank", bank, "Bank archive to render as a tile grid");
    app->add_option("--scale", scale, "Bank grid upscaling factor");
    app->add_option("--out-dir", out_dir)->required();
  }

  int run(Context& ctx) {
    const auto t0 = Clock::now();
    require(!traces.empty() || !craft_log.empty() || !bank.empty(), "diagnose needs --trace, --craft-log or --bank");
    ExperimentManifest m;
    m.command = "diagnose";
    m.deterministic = common.deterministic;
    m.config = {{"traces", traces}, {"craft_log", craft_log}, {"bank", bank}, {"scale", scale}};
    std::vector<UpdateTrace> loaded;
    for (const auto& t : traces) {
      require_file(t, "trace");
      loaded.push_back(read_trace_csv(t));
      require(loaded.back().epochs() > 0 && !loaded.back().groups.empty(), t + ": empty trace");
      m.add_input(t);
    }
    std::vector<CraftLogRow> rows;
    if (!craft_log.empty()) {
      require_file(craft_log, "craft log");
      rows = read_craft_log(craft_log);
      require(!rows.empty(), craft_log + ": empty craft log");
      m.add_input(craft_log);
    }
    std::optional<PerturbationBank> b;
    if (!bank.empty()) {
      require_file(bank, "bank");
      b = load_bank(bank);
      m.add_input(bank);
    }
    if (common.dry_run) {
      ctx.out << m.to_json().dump(2) << "\n";
      return 0;
    }
    fs::create_directories(out_dir);
    FileLock lock(out_dir);
    const fs::path dir(out_dir);
    if (!loaded.empty()) {
      double M = 0.0;
      for (const auto& t : loaded) M = std::max(M, t.normalizer);
      std::ostringstream csv;
      csv.precision(10);
      csv << "trace,epoch,group,v_norm\n";
      std::vector<Series> series;
      for (std::size_t i = 0; i < loaded.size(); ++i) {
        const UpdateTrace t = normalize_trace_with(loaded[i], M);
        for (std::size_t k = 0; k < t.groups.size(); ++k) {
          Series s;
          s.color = palette(series.size());
          for (int e = 0; e < t.epochs(); ++e) {
            const double v = t.normalized[static_cast<std::size_t>(e)][k];
            check_unit(v, "normalized update");
            s.y.push_back(v);
            csv << i << ',' << e + 1 << ',' << t.groups[k] << ',' << v << '\n';
          }
          series.push_back(std::move(s));
        }
      }
      write_png(dir / "trace.png", render_line_plot(series, 0.0, 1.0));
      write_file(dir / "trace.csv", csv.str());
      m.add_output(dir / "trace.png");
      m.add_output(dir / "trace.csv");
    }
    if (!rows.empty()) {
      Series pert{{}, palette(0)}, clean{{}, palette(1)};
      std::ostringstream csv;
      csv.precision(10);
      csv << "epoch,stage,acc_perturbed_train,acc_clean_train\n";
      for (const auto& r : rows) {
        check_unit(r.acc_perturbed_train, "perturbed train accuracy");
        check_unit(r.acc_clean_train, "clean train accuracy");
        pert.y.push_back(r.acc_perturbed_train);
        clean.y.push_back(r.acc_clean_train);
        csv << r.epoch << ',' << r.stage << ',' << r.acc_perturbed_train << ',' << r.acc_clean_train << '\n';
      }
      write_png(dir / "craft_accuracy.png", render_line_plot({pert, clean}, 0.0, 1.0));
      write_file(dir / "craft_accuracy.csv", csv.str());
      m.add_output(dir / "craft_accuracy.png");
      m.add_output(dir / "craft_accuracy.csv");
    }
    if (b) {
      write_png(dir / "bank_grid.png", render_bank_grid(*b, scale));
      m.add_output(dir / "bank_grid.png");
    }
    m.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    write_manifest(dir / "manifest.json", m);
    for (const auto& [p, sha] : m.outputs) ctx.out << "wrote " << p << "\n";
    return 0;
  }
};

// ---- export-features ----

struct ExportCmd {
  Common common;
  DataOpts data;
  std::string model, split = "test", out;

  void add(CLI::App& root) {
    CLI::App* app = root.add_subcommand("export-features", "Write penultimate-layer features as CSV");
    common.add(app);
    data.add(app, "glyphs-downstream");
    app->add_option("--model", model, "Checkpoint")->required();
    app->add_option("--split", split)->check(CLI::IsMember({"train", "test"}));
    app->add_option("--out", out)->required();
  }

  int run(Context& ctx) {
    const auto t0 = Clock::now();
    const nlohmann::json cfgj = load_config(common.config);
    const DataSpec ds = data.resolve(cfgj);
    ExperimentManifest m;
    m.command = "export-features";
    m.deterministic = common.deterministic;
    m.config = {{"data", ds.to_json()}, {"model", model}, {"split", split}};
    require_file(model, "checkpoint");
    const ModelState st = load_checkpoint(model);
    m.add_input(model);
    const SplitDataset d = ds.load();
    const ImageBatch& b = split == "test" ? d.test : d.train;
    require(st.arch.channels == b.channels() && st.arch.height == b.height() && st.arch.width == b.width(),
            "checkpoint input shape does not match the data");
    if (common.dry_run) {
      ctx.out << m.to_json().dump(2) << "\n";
      return 0;
    }
    ensure_parent(out);
    FileLock lock(fs::path(out).parent_path());
    export_features(st, b, out);
    const double s = silhouette(extract_features(st, b.pixels), b.labels);
    m.config["silhouette"] = s;
    m.add_output(out);
    m.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    write_manifest(sibling(out, ".manifest.json"), m);
    ctx.out << "silhouette " << s << "\nwrote " << out << "\n";
    return 0;
  }
};

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Unlearnable-example crafting and evaluation toolkit", "uex"};
  app.set_version_flag("--version", toolkit_version());
  app.require_subcommand(1);
  PretrainCmd pretrain_cmd;
  CraftCmd craft_cmd;
  EvalCmd eval_cmd, ablate_cmd;
  DiagnoseCmd diagnose_cmd;
  ExportCmd export_cmd;
  pretrain_cmd.add(app);
  craft_cmd.add(app);
  eval_cmd.add(app, false);
  ablate_cmd.add(app, true);
  diagnose_cmd.add(app);
  export_cmd.add(app);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }
  Context ctx{out, err};
  const std::string verb = app.get_subcommands().front()->get_name();
  auto with_mode = [&](Common& c, auto&& fn) {
    set_deterministic(c.deterministic);
    const int rc = fn();
    set_deterministic(false);
    return rc;
  };
  try {
    if (verb == "pretrain") return with_mode(pretrain_cmd.common, [&] { return pretrain_cmd.run(ctx); });
    if (verb == "craft") return with_mode(craft_cmd.common, [&] { return craft_cmd.run(ctx); });
    if (verb == "eval") return with_mode(eval_cmd.common, [&] { return eval_cmd.run(ctx); });
    if (verb == "ablate") return with_mode(ablate_cmd.common, [&] { return ablate_cmd.run(ctx); });
    if (verb == "diagnose") return with_mode(diagnose_cmd.common, [&] { return diagnose_cmd.run(ctx); });
    return with_mode(export_cmd.common, [&] { return export_cmd.run(ctx); });
  } catch (const InvariantFailure& e) {
    set_deterministic(false);
    err << "invariant violated: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    set_deterministic(false);
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    set_deterministic(false);
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const nlohmann::json::exception& e) {
    set_deterministic(false);
    err << "error: bad configuration: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace uex::cli
