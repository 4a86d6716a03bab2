#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "uex/models/layout.hpp"

namespace uex {

/// Where a model's body weights came from.
struct Provenance {
  std::string pretrained_on;  // split id; empty means random init

  bool pretrained() const { return !pretrained_on.empty(); }
  std::string str() const { return pretrained() ? "pretrained(" + pretrained_on + ")" : "random"; }
  static Provenance parse(const std::string& s);
  friend bool operator==(const Provenance&, const Provenance&) = default;
};

/// Weights of a surrogate or victim, grouped by the layout's named groups.
struct ModelState {
  ArchSpec arch;
  int head_classes = 0;
  Provenance provenance;
  std::vector<float> params;

  ParamLayout layout() const { return make_layout(arch, head_classes); }
  std::span<const float> group(const std::string& name) const;
  std::span<float> group(const std::string& name);
  bool all_finite() const;
};

struct RandomInit {
  std::uint64_t seed = 0;
};

/// Keep the body of `state`; rebuild the head for the requested class count.
struct FromState {
  const ModelState* state = nullptr;
  std::uint64_t head_seed = 0;
};

using ModelInit = std::variant<RandomInit, FromState>;

ModelState build_model(const ArchSpec& arch, int classes, const ModelInit& init);

/// Re-draws the named groups from the architecture's init distribution; every
/// other group is copied bit-for-bit.
ModelState replace_layers_random(const ModelState& model, std::span<const std::string> groups, std::uint64_t seed);

/// Per-group trainable flags covering every group exactly once.
class TrainingMask {
 public:
  static TrainingMask all_trainable(const ModelState& model);

  bool trainable(const std::string& group) const;
  const std::vector<std::pair<std::string, bool>>& flags() const { return flags_; }
  std::vector<std::string> frozen() const;
  void set(const std::string& group, bool trainable);

 private:
  std::vector<std::pair<std::string, bool>> flags_;
};

TrainingMask freeze_layers(const ModelState& model, std::span<const std::string> groups);

/// Checkpoint archive: manifest {kind:"checkpoint", arch_id, arch geometry,
/// head_classes, provenance, groups:[{name, arrays:[{name, shape}]}]} plus the
/// float32 parameters in layout order.
void save_checkpoint(const std::filesystem::path& path, const ModelState& model);
ModelState load_checkpoint(const std::filesystem::path& path);

}  // namespace uex
