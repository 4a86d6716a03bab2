#pragma once

#include <cstdint>
#include <functional>

#include "json.hpp"
#include "uex/core/rational.hpp"
#include "uex/data/dataset.hpp"
#include "uex/generator/bank.hpp"
#include "uex/models/model_state.hpp"

namespace uex {

/// Error-minimizing noise: alternate surrogate training and per-sample PGD
/// that lowers the true-label loss.
struct EmnConfig {
  Rational epsilon{8, 255};
  int pgd_steps = 10;
  double pgd_step_size = 0.8 / 255.0;
  int alternations = 10;
  int train_steps = 10;  // surrogate batches per alternation
  double train_lr = 0.1;
  int batch_size = 64;
  double stop_accuracy = 0.99;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static EmnConfig from_json(const nlohmann::json& j);
};

/// delta <- clip(x + delta - step * sign(grad), 0, 1) - x, clamped to [-eps, eps],
/// repeated pgd_steps times on the true-label loss.
void emn_pgd(const ModelState& surrogate, const ImageBatch& batch, Tensor<float>& delta, const EmnConfig& cfg);

struct EmnResult {
  SampleDeltas deltas;
  ModelState surrogate;
  std::vector<double> perturbed_accuracy;  // after each alternation
};

using EmnProgress = std::function<void(int alternation, double perturbed_accuracy)>;

/// Every returned delta satisfies loss(x + delta) <= loss(x) on the final
/// surrogate; deltas that fail this are reset to zero.
EmnResult emn_craft(const SplitDataset& data, const ModelState& surrogate, const EmnConfig& cfg,
                    const EmnProgress& progress = {});

}  // namespace uex
