#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "uex/core/rational.hpp"
#include "uex/core/tensor.hpp"
#include "uex/generator/bank.hpp"
#include "uex/models/layout.hpp"

namespace uex {

/// Encoder-decoder perturbation generator: six 3x3 conv stages (InstanceNorm,
/// ReLU), residual blocks (reflection pad, conv, BatchNorm), five 3x3
/// transposed-conv stages (InstanceNorm, ReLU) and a final 6x6 stride-2
/// transposed conv squashed by eps * tanh.
struct GeneratorConfig {
  int channels = 3;
  int height = 32;
  int width = 32;
  int base_width = 64;  // down path base_width -> 2x -> 4x, mirrored on the way up
  int residual_blocks = 8;
};

class Generator {
 public:
  struct Op;
  /// Per-pass activations needed by backward.
  struct Tape {
    std::vector<Tensor<float>> inputs;
    std::vector<Tensor<float>> aux;
    Tensor<float> squashed;  // tanh output
    double epsilon = 0.0;
  };

  Generator(const GeneratorConfig& cfg, std::uint64_t seed);
  ~Generator();
  Generator(const Generator&);
  Generator& operator=(const Generator&);
  Generator(Generator&&) noexcept;
  Generator& operator=(Generator&&) noexcept;

  const GeneratorConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }
  std::vector<float>& params() { return params_; }
  const std::vector<float>& params() const { return params_; }
  const std::vector<float>& running_stats() const { return running_; }

  /// Per-sample deltas [B, C, H, W] in [-eps, eps]. Training mode uses batch
  /// statistics in the BatchNorm layers and updates their running averages;
  /// inference mode uses the running averages and is a pure function.
  Tensor<float> forward(const Tensor<float>& x, double epsilon, bool train, Tape* tape = nullptr);

  /// Parameter gradient for d(loss)/d(delta).
  std::vector<float> backward(const Tape& tape, const Tensor<float>& grad_delta) const;

  /// Zeroes the last transposed conv (weights and bias).
  void zero_output_layer();

 private:
  GeneratorConfig cfg_;
  ParamLayout layout_;
  std::vector<Op> ops_;
  std::vector<float> params_;
  std::vector<float> running_;  // BatchNorm running mean/var
};

/// Inference-mode generation; every entry lands in [-eps, eps].
Tensor<float> generate(Generator& gen, const Tensor<float>& images, const Rational& epsilon);

/// Elementwise clamp to [-eps, eps]. Idempotent.
void project_linf(std::span<float> delta, double epsilon);
Tensor<float> project_linf(Tensor<float> delta, double epsilon);

/// For each class present in `labels`: bank_k <- project(m * bank_k + (1-m) * mean of
/// that class's sample deltas). Absent classes are left untouched.
PerturbationBank aggregate_classwise(const Tensor<float>& per_sample, std::span<const int> labels,
                                     PerturbationBank bank, double momentum);

}  // namespace uex
