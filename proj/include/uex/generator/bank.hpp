#pragma once

#include <filesystem>
#include <string>
#include <variant>

#include "uex/core/rational.hpp"
#include "uex/core/tensor.hpp"

namespace uex {

/// Class-wise perturbations delta_k, k = 0..K-1, each bounded by epsilon in L-inf.
struct PerturbationBank {
  Tensor<float> deltas;  // [K, C, H, W]
  Rational epsilon;
  std::string digest;  // crafting config digest

  static PerturbationBank zeros(int classes, int channels, int height, int width, Rational eps);

  int class_count() const { return deltas.dim(0); }
  int channels() const { return deltas.dim(1); }
  int height() const { return deltas.dim(2); }
  int width() const { return deltas.dim(3); }
  std::span<const float> delta(int k) const { return deltas.row(k); }
  /// max_k ||delta_k||_inf
  float linf() const;
  bool within_budget() const;
};

/// Per-sample perturbations, index-aligned with a dataset's training split.
struct SampleDeltas {
  Tensor<float> deltas;  // [N, C, H, W]
  Rational epsilon;
  std::string digest;

  int count() const { return deltas.dim(0); }
  float linf() const;
  bool within_budget() const;
};

/// Either kind of crafted artifact; the evaluation side accepts both.
using PerturbationSource = std::variant<PerturbationBank, SampleDeltas>;

/// The perturbation a training sample receives from its own source.
std::span<const float> own_delta(const PerturbationSource& src, int sample_index, int label);
const Rational& source_epsilon(const PerturbationSource& src);

/// Bank file: archive manifest {kind:"bank", class_count, epsilon:"8/255", C, H, W, digest}
/// with a class-major float payload.
void save_bank(const std::filesystem::path& path, const PerturbationBank& bank);
PerturbationBank load_bank(const std::filesystem::path& path);

/// Per-sample delta file: manifest {kind:"sample_deltas", count, epsilon, shape, digest}.
void save_sample_deltas(const std::filesystem::path& path, const SampleDeltas& d);
SampleDeltas load_sample_deltas(const std::filesystem::path& path);

/// Loads whichever kind the archive holds.
PerturbationSource load_source(const std::filesystem::path& path);

}  // namespace uex
