#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "uex/core/tensor.hpp"
#include "uex/generator/bank.hpp"

namespace uex {

/// Images in [0, 1] (NCHW) with 0-based class labels.
struct ImageBatch {
  Tensor<float> pixels;
  std::vector<int> labels;

  int size() const { return static_cast<int>(labels.size()); }
  int channels() const { return pixels.dim(1); }
  int height() const { return pixels.dim(2); }
  int width() const { return pixels.dim(3); }
};

struct SplitDataset {
  std::string id;  // provenance tag, e.g. "synthetic-glyphs/prior:s0"
  ImageBatch train;
  ImageBatch test;
  int class_count = 0;
  std::vector<std::vector<int>> per_class_index;  // train indices per class
  std::vector<int> source_classes;                // original class id of each label
};

struct LoadOptions {
  int height = 32;
  int width = 32;
  // Synthetic set only.
  int class_count = 10;
  int train_per_class = 500;
  int test_per_class = 100;
  std::uint64_t seed = 0;
};

/// Registered ids: "synthetic-glyphs" (procedural, no files) and "cifar10"
/// (CIFAR-10 binary batches under `root`).
SplitDataset load_dataset(const std::string& name, const std::filesystem::path& root,
                          const LoadOptions& opts);

/// Procedural shapes: each class is a (shape, texture) pair rendered with random
/// pose, colours, and background noise.
SplitDataset make_glyph_dataset(const LoadOptions& opts);

SplitDataset load_cifar10(const std::filesystem::path& root, int height, int width);

/// Splits into two datasets over disjoint class sets. Labels are re-indexed in
/// ascending original class id order within each side.
std::pair<SplitDataset, SplitDataset> make_disjoint_prior_split(const SplitDataset& dataset,
                                                                int prior_classes,
                                                                int downstream_classes,
                                                                std::uint64_t seed);

/// Rebuilds per_class_index from the train labels.
void index_classes(SplitDataset& ds);

ImageBatch gather(const ImageBatch& from, std::span<const int> indices);

/// clip(x + delta_{assignment[b]}, 0, 1); labels pass through.
ImageBatch apply_bank(const ImageBatch& batch, const PerturbationBank& bank,
                      std::span<const int> assignment);

/// Training set with exactly floor(ratio * N) samples carrying their own perturbation.
struct PoisonMix {
  ImageBatch samples;
  std::vector<bool> perturbed;
  double ratio = 0.0;

  int perturbed_count() const;
};

PoisonMix mix_poison(const SplitDataset& clean, const PerturbationSource& source, double ratio,
                     std::uint64_t seed);

/// CSV with columns index,class,perturbed_flag.
void write_poison_manifest(const std::filesystem::path& path, const PoisonMix& mix);

}  // namespace uex
