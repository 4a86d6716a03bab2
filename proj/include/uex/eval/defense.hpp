#pragma once

#include <cstdint>
#include <span>
#include <string>

#include "json.hpp"
#include "uex/core/rng.hpp"
#include "uex/core/tensor.hpp"
#include "uex/models/training.hpp"

namespace uex {

enum class DefenseKind { none, cutout, cutmix, mixup, jpeg };

/// Training-time data transform a victim may use against poisons.
struct DefenseSpec {
  DefenseKind kind = DefenseKind::none;
  int mask_size = 8;        // cutout square side; cutmix uses a random box instead
  double beta_param = 1.0;  // lambda ~ Beta(beta_param, beta_param)
  int quality = 75;         // jpeg
  std::uint64_t seed = 0;

  void validate(int height, int width) const;
  /// "none", "cutout:8", "mixup:1", "cutmix:1", "jpeg:50".
  std::string str() const;
  static DefenseSpec parse(const std::string& s);
  nlohmann::json to_json() const;
  static DefenseSpec from_json(const nlohmann::json& j);
};

/// Zeroes the size x size square with top-left (top, left) in every channel of one CHW image.
void cutout_image(std::span<float> image, int channels, int height, int width, int top, int left, int size);
/// lambda * a + (1 - lambda) * b.
void mixup_images(std::span<float> out, std::span<const float> a, std::span<const float> b, double lambda);
/// Copies box [top, top+bh) x [left, left+bw) of `src` into `dst`; returns the uncovered fraction.
double cutmix_images(std::span<float> dst, std::span<const float> src, int channels, int height, int width, int top,
                     int left, int bh, int bw);
/// Baseline JPEG encode/decode of every image (1 or 3 channels), without
/// chroma subsampling.
Tensor<float> jpeg_roundtrip(const Tensor<float>& pixels, int quality);

/// Applies the defense to a batch. Mixing defenses pair each image with a
/// seeded permutation of the batch and mix the soft targets with (lambda, 1 - lambda).
void apply_defense(Tensor<float>& pixels, Tensor<float>& targets, const DefenseSpec& spec, Rng& rng);

/// Batch transform for finetune(); empty for kind none. Draws from its own
/// stream seeded by spec.seed, independent of the batch order.
BatchTransform make_defense_transform(const DefenseSpec& spec);

}  // namespace uex
