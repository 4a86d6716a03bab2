#include "uex/generator/bank.hpp"

#include <algorithm>
#include <cmath>

#include "uex/core/archive.hpp"

namespace uex {

namespace {

float max_abs(const Tensor<float>& t) {
  float m = 0.0f;
  for (float v : t.vec()) m = std::max(m, std::abs(v));
  return m;
}

// Float budget check: the stored float32 delta may equal the float32 rounding of eps.
bool within(float linf, const Rational& eps) { return linf <= static_cast<float>(eps.value()); }

}  // namespace

PerturbationBank PerturbationBank::zeros(int classes, int channels, int height, int width, Rational eps) {
  require(classes >= 1, "bank needs at least one class");
  require(eps.positive(), "epsilon must be positive");
  return {Tensor<float>(Shape{classes, channels, height, width}), eps, ""};
}

float PerturbationBank::linf() const { return max_abs(deltas); }
bool PerturbationBank::within_budget() const { return within(linf(), epsilon); }
float SampleDeltas::linf() const { return max_abs(deltas); }
bool SampleDeltas::within_budget() const { return within(linf(), epsilon); }

std::span<const float> own_delta(const PerturbationSource& src, int sample_index, int label) {
  if (const auto* bank = std::get_if<PerturbationBank>(&src)) {
    require(label >= 0 && label < bank->class_count(), "label out of range for bank");
    return bank->delta(label);
  }
  const auto& d = std::get<SampleDeltas>(src);
  require(sample_index >= 0 && sample_index < d.count(), "sample index out of range for delta set");
  return d.deltas.row(sample_index);
}

const Rational& source_epsilon(const PerturbationSource& src) {
  return std::visit([](const auto& s) -> const Rational& { return s.epsilon; }, src);
}

void save_bank(const std::filesystem::path& path, const PerturbationBank& bank) {
  Archive a;
  a.manifest = {{"kind", "bank"},
                {"class_count", bank.class_count()},
                {"epsilon", bank.epsilon.str()},
                {"C", bank.channels()},
                {"H", bank.height()},
                {"W", bank.width()},
                {"digest", bank.digest}};
  a.payload = bank.deltas.vec();
  write_archive(path, a);
}

PerturbationBank load_bank(const std::filesystem::path& path) {
  Archive a = read_archive(path);
  const auto& m = a.manifest;
  if (m.value("kind", "") != "bank") throw IoError(path.string() + ": not a perturbation bank");
  try {
    const int k = m.at("class_count"), c = m.at("C"), h = m.at("H"), w = m.at("W");
    PerturbationBank bank{Tensor<float>(Shape{k, c, h, w}, std::move(a.payload)),
                          Rational::parse(m.at("epsilon").get<std::string>()), m.value("digest", "")};
    if (!bank.within_budget()) throw IoError(path.string() + ": bank violates its epsilon budget");
    return bank;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": bad bank manifest: " + e.what());
  } catch (const InvalidArgument& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void save_sample_deltas(const std::filesystem::path& path, const SampleDeltas& d) {
  Archive a;
  a.manifest = {{"kind", "sample_deltas"},
                {"count", d.count()},
                {"epsilon", d.epsilon.str()},
                {"shape", d.deltas.shape().dims()},
                {"digest", d.digest}};
  a.payload = d.deltas.vec();
  write_archive(path, a);
}

SampleDeltas load_sample_deltas(const std::filesystem::path& path) {
  Archive a = read_archive(path);
  const auto& m = a.manifest;
  if (m.value("kind", "") != "sample_deltas") throw IoError(path.string() + ": not a per-sample delta set");
  try {
    SampleDeltas d{Tensor<float>(Shape(m.at("shape").get<std::vector<int>>()), std::move(a.payload)),
                   Rational::parse(m.at("epsilon").get<std::string>()), m.value("digest", "")};
    if (d.count() != m.at("count").get<int>()) throw IoError(path.string() + ": count mismatch");
    if (!d.within_budget()) throw IoError(path.string() + ": deltas violate their epsilon budget");
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": bad delta manifest: " + e.what());
  } catch (const InvalidArgument& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

PerturbationSource load_source(const std::filesystem::path& path) {
  const std::string kind = read_archive(path).manifest.value("kind", "");
  if (kind == "bank") return load_bank(path);
  if (kind == "sample_deltas") return load_sample_deltas(path);
  throw IoError(path.string() + ": archive kind '" + kind + "' is not a perturbation artifact");
}

}  // namespace uex
