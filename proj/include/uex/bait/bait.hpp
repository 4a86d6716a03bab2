#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "uex/core/dual.hpp"
#include "uex/core/rational.hpp"
#include "uex/core/rng.hpp"
#include "uex/core/tensor.hpp"
#include "uex/data/dataset.hpp"
#include "uex/generator/bank.hpp"
#include "uex/generator/generator.hpp"
#include "uex/models/model_state.hpp"
#include "uex/models/network.hpp"
#include "uex/models/training.hpp"

namespace uex {

enum class TargetMode { hard_negative, random, most_dissimilar };

std::string to_string(TargetMode mode);
TargetMode parse_target_mode(const std::string& s);

/// Three consecutive stages; epochs are 0-based.
struct CurriculumSchedule {
  std::array<int, 3> stage_epochs{30, 30, 30};
  std::array<TargetMode, 3> modes{TargetMode::hard_negative, TargetMode::random, TargetMode::most_dissimilar};

  void validate() const;
  int total_epochs() const { return stage_epochs[0] + stage_epochs[1] + stage_epochs[2]; }
  /// 1, 2 or 3.
  int stage(int epoch) const;
  TargetMode mode(int epoch) const { return modes[static_cast<std::size_t>(stage(epoch) - 1)]; }
};

/// One target per row, never the ground truth. Ties go to the lowest class index.
template <class T>
std::vector<int> select_targets(const Tensor<T>& logits, std::span<const int> gt, TargetMode mode, Rng& rng) {
  require(logits.shape().rank() == 2, "logits must be [B, K]");
  const int b = logits.dim(0), k = logits.dim(1);
  require(k >= 2, "target selection needs at least two classes");
  require(static_cast<int>(gt.size()) == b, "one ground-truth label per row required");
  std::vector<int> out(static_cast<std::size_t>(b));
  for (int i = 0; i < b; ++i) {
    const int y = gt[static_cast<std::size_t>(i)];
    require(y >= 0 && y < k, "label " + std::to_string(y) + " out of range");
    const auto row = logits.row(i);
    int best = -1;
    if (mode == TargetMode::random) {
      const int r = rng.below(k - 1);
      best = r < y ? r : r + 1;
    } else {
      for (int j = 0; j < k; ++j) {
        if (j == y) continue;
        if (best < 0 || (mode == TargetMode::hard_negative ? row[static_cast<std::size_t>(j)] > row[static_cast<std::size_t>(best)]
                                                           : row[static_cast<std::size_t>(j)] < row[static_cast<std::size_t>(best)]))
          best = j;
      }
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

enum class CraftMode { generator, direct_bank };

struct CraftConfig {
  double alpha = 0.1;   // inner and surrogate step size
  double beta = 0.001;  // outer step size
  int unroll_n = 1;
  Rational epsilon{8, 255};
  int batch_size = 64;
  std::uint64_t seed = 0;
  bool second_order = true;
  CraftMode mode = CraftMode::generator;
  int generator_width = 64;
  int residual_blocks = 8;
  double bank_momentum = 0.9;

  void validate() const;
  nlohmann::json to_json() const;
  static CraftConfig from_json(const nlohmann::json& j);
};

/// theta_0 .. theta_N with theta_{n+1} = theta_n - alpha * grad(theta_n).
template <class V, class Grad>
std::vector<V> unroll_trajectory(V theta, Grad&& grad, double alpha, int steps) {
  require(steps >= 0, "unroll steps must be non-negative");
  std::vector<V> traj{std::move(theta)};
  for (int s = 0; s < steps; ++s) {
    V next = traj.back();
    const auto g = grad(traj.back());
    for (std::size_t i = 0; i < next.size(); ++i) next[i] -= static_cast<typename V::value_type>(alpha) * g[i];
    traj.push_back(std::move(next));
  }
  return traj;
}

/// Gradient of the outer loss CE(f_{theta_N}(w), outer targets) where theta_N is
/// `steps` descent steps on CE(f_theta(u), inner targets). The inner-input
/// gradient flows through the unroll (Hessian-vector products) and is zero
/// when `second_order` is off.
template <class T>
struct MetaGradient {
  T outer_loss{};
  T inner_loss{};
  Tensor<T> grad_inner_input;
  Tensor<T> grad_outer_input;
  std::vector<T> theta_unrolled;
};

template <class T>
MetaGradient<T> meta_gradient(const Network<T>& net, const Network<Dual<T>>& dnet, std::span<const T> theta,
                              const Tensor<T>& u, const Tensor<T>& inner_targets, const Tensor<T>& w,
                              const Tensor<T>& outer_targets, T alpha, int steps, bool second_order);

/// Class-wise perturbation form: u_b = clip(x_b + delta_{y_b}), w_b = clip(x_b + delta_{t_b}).
template <class T>
struct BankGradient {
  T outer_loss{};
  T inner_loss{};
  Tensor<T> grad;  // [K, C, H, W]
  std::vector<T> theta_unrolled;
};

template <class T>
BankGradient<T> bank_meta_gradient(const Network<T>& net, const Network<Dual<T>>& dnet, std::span<const T> theta,
                                   const Tensor<T>& x, std::span<const int> labels, std::span<const int> targets,
                                   const Tensor<T>& deltas, T alpha, int steps, bool second_order);

/// The outer objective itself, for checking the gradient above.
template <class T>
T bank_outer_loss(const Network<T>& net, std::span<const T> theta, const Tensor<T>& x, std::span<const int> labels,
                  std::span<const int> targets, const Tensor<T>& deltas, T alpha, int steps);

/// Surrogate advanced along the inner objective; the trajectory is what the
/// second-order outer gradient differentiates through.
struct UnrolledState {
  ModelState theta;
  std::vector<std::vector<float>> trajectory;  // theta_0 .. theta_N
  double inner_loss = 0.0;
};

UnrolledState inner_unroll(const ModelState& theta, const Tensor<float>& class_deltas, const ImageBatch& batch,
                           double alpha, int steps);
UnrolledState inner_unroll(const ModelState& theta, const PerturbationBank& bank, const ImageBatch& batch,
                           double alpha, int steps);

/// One descent step on (x + delta_y, y).
ModelState surrogate_step(const ModelState& theta, const PerturbationBank& bank, const ImageBatch& batch,
                          double alpha);

/// Mutable crafting state: the bank, plus the generator and its optimizer in generator mode.
struct CraftState {
  PerturbationBank bank;
  std::optional<Generator> generator;
  std::optional<Adam> generator_opt;
};

CraftState make_craft_state(const CraftConfig& cfg, int classes, int channels, int height, int width);

struct OuterStepResult {
  double outer_loss = 0.0;
  double inner_loss = 0.0;
  ModelState theta_unrolled;
};

/// Unrolls from `theta`, then takes one step on the generator (Adam) or the
/// bank (projected descent) toward the targets, evaluated through the unrolled
/// weights. In generator mode the class deltas are the batch means of G(x) per
/// class (bank entries for absent classes) and the bank is refreshed with the
/// pre-step outputs. beta = 0 leaves the state untouched.
OuterStepResult outer_step(CraftState& state, const ModelState& theta, const ImageBatch& batch,
                           std::span<const int> targets, const CraftConfig& cfg);

struct CraftLogRow {
  int epoch = 0;  // 1-based
  int stage = 0;
  double outer_loss = 0.0;
  double inner_loss = 0.0;
  double acc_perturbed_train = 0.0;
  double acc_clean_train = 0.0;
};

struct CraftResult {
  PerturbationBank bank;
  std::vector<CraftLogRow> log;
  ModelState surrogate;
};

using CraftProgress = std::function<void(const CraftLogRow&)>;

std::string craft_digest(const CraftConfig& cfg, const CurriculumSchedule& schedule, const ModelState& surrogate,
                         const SplitDataset& data);

CraftResult craft(const CraftConfig& cfg, const ModelState& surrogate, const CurriculumSchedule& schedule,
                  const SplitDataset& data, const CraftProgress& progress = {});

void write_craft_log(const std::filesystem::path& path, std::span<const CraftLogRow> log);
std::vector<CraftLogRow> read_craft_log(const std::filesystem::path& path);

}  // namespace uex
