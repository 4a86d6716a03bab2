#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "uex/data/dataset.hpp"
#include "uex/eval/defense.hpp"
#include "uex/generator/bank.hpp"
#include "uex/models/model_state.hpp"
#include "uex/models/training.hpp"

namespace uex {

/// How a victim is built for each repeat: the body comes from `prior` (or a
/// random init when absent), `replaced` groups are re-drawn at random and
/// `frozen` groups stay fixed during finetuning. The head is always fresh.
struct VictimSpec {
  ArchSpec arch;
  std::optional<ModelState> prior;
  std::vector<std::string> replaced;
  std::vector<std::string> frozen;
  TrainConfig train;

  nlohmann::json descriptor() const;
};

ModelState build_victim(const VictimSpec& spec, int classes, std::uint64_t seed);

struct EvalReport {
  std::string label;
  double clean_test_accuracy = 0.0;  // mean over repeats
  double clean_test_sd = 0.0;
  double perturbed_train_accuracy = 0.0;
  double perturbed_train_sd = 0.0;
  std::vector<double> clean_test_runs;
  std::vector<double> perturbed_train_runs;
  std::vector<Curves> curves;
  std::vector<UpdateTrace> traces;
  nlohmann::json victim;
  std::string defense = "none";
  double ratio = 0.0;
  std::string source_digest;  // empty for clean training
  std::vector<std::uint64_t> seeds;
  double wall_seconds = 0.0;

  /// Everything except the per-epoch traces.
  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

/// Victims finetuned on the data with a `ratio` share of samples perturbed by
/// `source` (clean training when null). Repeat r uses seed + r for the
/// victim, the poison mix, the batch order and the defense.
EvalReport evaluate_unlearnability(const PerturbationSource* source, const VictimSpec& victim,
                                   const SplitDataset& data, const DefenseSpec& defense, double ratio, int repeats,
                                   std::uint64_t seed);

enum class AblationMode { progressive_replace, freeze_each };

std::string to_string(AblationMode mode);
AblationMode parse_ablation_mode(const std::string& s);

/// Body groups (every group but the head) in network order.
std::vector<std::string> body_groups(const ArchSpec& arch);

/// progressive_replace: replaced suffixes {}, {last}, ..., {all body groups}.
/// freeze_each: one report per singly frozen body group.
std::vector<EvalReport> run_prior_ablation(const PerturbationSource* source, const SplitDataset& data,
                                           const VictimSpec& base, AblationMode mode, const DefenseSpec& defense,
                                           double ratio, int repeats, std::uint64_t seed);

void write_report(const std::filesystem::path& path, const EvalReport& report);
EvalReport read_report(const std::filesystem::path& path);
/// CSV: repeat,epoch,train_accuracy,test_accuracy,train_loss (epochs 1-based).
void write_curves_csv(const std::filesystem::path& path, const EvalReport& report);
/// Aligned columns: label, victim, defense, ratio, clean test (mean +- sd), perturbed train.
std::string render_summary_table(std::span<const EvalReport> reports);
/// The same rows as CSV.
std::string render_summary_csv(std::span<const EvalReport> reports);

/// CSV with header f0..f{D-1},label; one row per sample.
void export_features(const ModelState& model, const ImageBatch& data, const std::filesystem::path& path);
/// Mean silhouette coefficient under Euclidean distance. Samples in singleton clusters score 0.
double silhouette(const Tensor<float>& features, std::span<const int> labels);

}  // namespace uex
