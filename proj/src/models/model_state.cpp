#include "uex/models/model_state.hpp"

#include <algorithm>
#include <cmath>

#include "uex/core/archive.hpp"
#include "uex/core/error.hpp"
#include "uex/core/rng.hpp"

namespace uex {

namespace {

void init_entry(const ParamEntry& e, std::uint64_t seed, std::span<float> params) {
  auto dst = params.subspan(e.offset, e.size);
  if (e.init_std == 0.0f) {
    std::fill(dst.begin(), dst.end(), e.init_value);
    return;
  }
  Rng rng = Rng(seed).fork(fnv1a(e.name));
  for (auto& v : dst) v = static_cast<float>(rng.normal(0.0, e.init_std));
}

}  // namespace

Provenance Provenance::parse(const std::string& s) {
  if (s == "random") return {};
  const std::string pre = "pretrained(";
  if (s.rfind(pre, 0) == 0 && s.size() > pre.size() + 1 && s.back() == ')')
    return {s.substr(pre.size(), s.size() - pre.size() - 1)};
  throw InvalidArgument("bad provenance '" + s + "'");
}

std::span<const float> ModelState::group(const std::string& name) const {
  const auto [lo, hi] = layout().group_range(name);
  return std::span<const float>(params).subspan(lo, hi - lo);
}

std::span<float> ModelState::group(const std::string& name) {
  const auto [lo, hi] = layout().group_range(name);
  return std::span<float>(params).subspan(lo, hi - lo);
}

bool ModelState::all_finite() const {
  return std::all_of(params.begin(), params.end(), [](float v) { return std::isfinite(v); });
}

ModelState build_model(const ArchSpec& arch, int classes, const ModelInit& init) {
  ModelState m;
  m.arch = arch;
  m.head_classes = classes;
  const ParamLayout layout = make_layout(arch, classes);
  m.params.assign(layout.total(), 0.0f);
  if (const auto* r = std::get_if<RandomInit>(&init)) {
    for (const auto& e : layout.entries()) init_entry(e, r->seed, m.params);
    return m;
  }
  const auto& from = std::get<FromState>(init);
  require(from.state != nullptr, "from_state init needs a source model");
  require(from.state->arch == arch, "source model architecture differs from the requested one");
  m.provenance = from.state->provenance;
  const ParamLayout src = from.state->layout();
  for (const auto& e : layout.entries()) {
    if (e.group == "head") {
      init_entry(e, from.head_seed, m.params);
      continue;
    }
    const ParamEntry& s = src.entry(e.name);
    std::copy_n(from.state->params.begin() + static_cast<long>(s.offset), e.size,
                m.params.begin() + static_cast<long>(e.offset));
  }
  return m;
}

ModelState replace_layers_random(const ModelState& model, std::span<const std::string> groups, std::uint64_t seed) {
  const ParamLayout layout = model.layout();
  for (const auto& g : groups) require(layout.has_group(g), "unknown parameter group '" + g + "'");
  ModelState out = model;
  for (const auto& e : layout.entries())
    if (std::find(groups.begin(), groups.end(), e.group) != groups.end()) init_entry(e, seed, out.params);
  return out;
}

TrainingMask TrainingMask::all_trainable(const ModelState& model) {
  TrainingMask m;
  for (const auto& g : model.layout().groups()) m.flags_.emplace_back(g, true);
  return m;
}

bool TrainingMask::trainable(const std::string& group) const {
  for (const auto& [g, t] : flags_)
    if (g == group) return t;
  throw InvalidArgument("unknown parameter group '" + group + "'");
}

std::vector<std::string> TrainingMask::frozen() const {
  std::vector<std::string> out;
  for (const auto& [g, t] : flags_)
    if (!t) out.push_back(g);
  return out;
}

void TrainingMask::set(const std::string& group, bool trainable) {
  for (auto& [g, t] : flags_)
    if (g == group) {
      t = trainable;
      return;
    }
  throw InvalidArgument("unknown parameter group '" + group + "'");
}

TrainingMask freeze_layers(const ModelState& model, std::span<const std::string> groups) {
  TrainingMask m = TrainingMask::all_trainable(model);
  for (const auto& g : groups) m.set(g, false);
  return m;
}

void save_checkpoint(const std::filesystem::path& path, const ModelState& model) {
  const ParamLayout layout = model.layout();
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& g : layout.groups()) {
    nlohmann::json arrays = nlohmann::json::array();
    for (const auto& e : layout.entries())
      if (e.group == g) arrays.push_back({{"name", e.name}, {"shape", e.shape}});
    groups.push_back({{"name", g}, {"arrays", arrays}});
  }
  Archive a;
  a.manifest = {{"kind", "checkpoint"},
                {"arch_id", model.arch.id},
                {"input", {model.arch.channels, model.arch.height, model.arch.width}},
                {"base_width", model.arch.base_width},
                {"head_classes", model.head_classes},
                {"provenance", model.provenance.str()},
                {"groups", groups}};
  a.payload = model.params;
  write_archive(path, a);
}

ModelState load_checkpoint(const std::filesystem::path& path) {
  Archive a = read_archive(path);
  const auto& m = a.manifest;
  if (m.value("kind", "") != "checkpoint") throw IoError(path.string() + ": not a model checkpoint");
  ModelState s;
  try {
    s.arch.id = m.at("arch_id").get<std::string>();
    const auto input = m.at("input").get<std::vector<int>>();
    if (input.size() != 3) throw IoError(path.string() + ": bad input geometry");
    s.arch.channels = input[0];
    s.arch.height = input[1];
    s.arch.width = input[2];
    s.arch.base_width = m.at("base_width").get<int>();
    s.head_classes = m.at("head_classes").get<int>();
    s.provenance = Provenance::parse(m.at("provenance").get<std::string>());
    const ParamLayout layout = s.layout();
    if (layout.total() != a.payload.size()) throw IoError(path.string() + ": parameter count mismatch");
    std::size_t idx = 0;
    for (const auto& g : m.at("groups"))
      for (const auto& arr : g.at("arrays")) {
        if (idx >= layout.entries().size()) throw IoError(path.string() + ": manifest lists extra arrays");
        const auto& e = layout.entries()[idx++];
        if (arr.at("name").get<std::string>() != e.name || arr.at("shape").get<std::vector<int>>() != e.shape ||
            g.at("name").get<std::string>() != e.group)
          throw IoError(path.string() + ": manifest disagrees with architecture at " + e.name);
      }
    if (idx != layout.entries().size()) throw IoError(path.string() + ": manifest is missing arrays");
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": bad checkpoint manifest: " + e.what());
  } catch (const InvalidArgument& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  s.params = std::move(a.payload);
  if (!s.all_finite()) throw IoError(path.string() + ": non-finite parameters");
  return s;
}

}  // namespace uex
