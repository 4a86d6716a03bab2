#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "uex/core/rng.hpp"
#include "uex/data/dataset.hpp"
#include "uex/models/model_state.hpp"
#include "uex/models/network.hpp"

namespace uex {

/// Adaptive moment estimation over a flat parameter vector.
class Adam {
 public:
  explicit Adam(std::size_t size, double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  /// Updates params[i] for indices inside `ranges` only.
  void step(std::span<float> params, std::span<const float> grads,
            std::span<const std::pair<std::size_t, std::size_t>> ranges);
  void step(std::span<float> params, std::span<const float> grads);
  double lr() const { return lr_; }

 private:
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
  std::vector<double> m_, v_;
};

/// Per-epoch, per-group L2 parameter changes and their cumulative,
/// globally max-normalised form.
struct UpdateTrace {
  std::vector<std::string> groups;
  std::vector<std::vector<double>> delta;       // [epoch][group] ||dtheta||_2
  std::vector<std::vector<double>> cumulative;  // v
  std::vector<std::vector<double>> normalized;  // v / M
  double normalizer = 0.0;                      // M

  int epochs() const { return static_cast<int>(delta.size()); }
};

/// v_t = sum_{i<=t} delta_i per group; M = max_k v_T; v~ = v / M (all zero if M == 0).
UpdateTrace normalize_trace(UpdateTrace trace);
/// Same, with an externally chosen normaliser so several runs share one scale.
UpdateTrace normalize_trace_with(UpdateTrace trace, double normalizer);
/// Sum over groups of the final cumulative update v_T.
double total_update(const UpdateTrace& trace);

/// CSV: epoch,group,delta_l2,v,v_norm (epochs 1-based).
void write_trace_csv(const std::filesystem::path& path, const UpdateTrace& trace);
UpdateTrace read_trace_csv(const std::filesystem::path& path);

/// Rewrites a training batch before the step (augmentation defenses).
/// `targets` holds soft labels [B, K] and may be replaced by mixed targets.
using BatchTransform = std::function<void(Tensor<float>& pixels, Tensor<float>& targets, Rng& rng)>;

enum class OptimizerKind { adam, sgd };

struct TrainConfig {
  int epochs = 10;
  double lr = 1e-3;
  int batch_size = 64;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::adam;
  BatchTransform transform;  // optional
  bool track_curves = true;
};

struct Curves {
  std::vector<double> train_accuracy;  // on the data trained on, untransformed
  std::vector<double> test_accuracy;   // clean test split
  std::vector<double> train_loss;
};

struct FinetuneResult {
  ModelState state;
  UpdateTrace trace;
  Curves curves;
};

struct PretrainResult {
  ModelState state;
  double test_accuracy = 0.0;
};

/// Trains every trainable group; frozen groups are left bit-identical.
FinetuneResult finetune(const ModelState& model, const ImageBatch& train, const ImageBatch& test,
                        const TrainingMask& mask, const TrainConfig& cfg);
FinetuneResult finetune(const ModelState& model, const PoisonMix& data, const ImageBatch& test,
                        const TrainingMask& mask, const TrainConfig& cfg);
FinetuneResult finetune(const ModelState& model, const SplitDataset& data, const TrainingMask& mask,
                        const TrainConfig& cfg);

/// Full training on the prior split; provenance becomes pretrained(prior.id).
PretrainResult pretrain(const ModelState& model, const SplitDataset& prior, const TrainConfig& cfg);

/// Argmax predictions, evaluated in chunks.
std::vector<int> predict(const ModelState& model, const Tensor<float>& pixels);
double accuracy(const ModelState& model, const ImageBatch& data);

/// Penultimate-layer features [N, D].
Tensor<float> extract_features(const ModelState& model, const Tensor<float>& pixels);

}  // namespace uex
