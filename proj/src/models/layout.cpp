#include "uex/models/layout.hpp"

#include <algorithm>
#include <cmath>

#include "uex/core/error.hpp"

namespace uex {

void ParamLayout::add(const std::string& group, const std::string& name, std::vector<int> shape, float init_std,
                      float init_value) {
  ParamEntry e;
  e.group = group;
  e.name = name;
  e.size = 1;
  for (int d : shape) e.size *= static_cast<std::size_t>(d);
  e.shape = std::move(shape);
  e.offset = total_;
  e.init_std = init_std;
  e.init_value = init_value;
  total_ += e.size;
  entries_.push_back(std::move(e));
}

std::vector<std::string> ParamLayout::groups() const {
  std::vector<std::string> out;
  for (const auto& e : entries_)
    if (out.empty() || out.back() != e.group) out.push_back(e.group);
  return out;
}

bool ParamLayout::has_group(const std::string& group) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const ParamEntry& e) { return e.group == group; });
}

std::pair<std::size_t, std::size_t> ParamLayout::group_range(const std::string& group) const {
  std::size_t lo = total_, hi = 0;
  for (const auto& e : entries_)
    if (e.group == group) {
      lo = std::min(lo, e.offset);
      hi = std::max(hi, e.offset + e.size);
    }
  if (lo > hi) throw InvalidArgument("unknown parameter group '" + group + "'");
  return {lo, hi};
}

const ParamEntry& ParamLayout::entry(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e;
  throw InvalidArgument("unknown parameter '" + name + "'");
}

namespace {

float he(int fan_in) { return std::sqrt(2.0f / static_cast<float>(fan_in)); }

// Conv followed by GroupNorm, so the conv carries no bias.
void add_conv_norm(ParamLayout& l, const std::string& group, const std::string& conv, const std::string& norm, int cin,
                   int cout, int k) {
  l.add(group, conv + ".weight", {cout, cin, k, k}, he(cin * k * k));
  l.add(group, norm + ".gamma", {cout}, 0.0f, 1.0f);
  l.add(group, norm + ".beta", {cout}, 0.0f);
}

}  // namespace

std::vector<std::string> known_architectures() { return {"rn-mini", "linear"}; }

ParamLayout make_layout(const ArchSpec& arch, int head_classes) {
  require(head_classes >= 1, "head needs at least one class");
  require(arch.channels >= 1 && arch.height >= 1 && arch.width >= 1, "bad input geometry");
  ParamLayout l;
  if (arch.id == "rn-mini") {
    require(arch.base_width >= 1, "rn-mini base width must be positive");
    require(arch.height >= 8 && arch.width >= 8, "rn-mini needs inputs of at least 8x8");
    const int w = arch.base_width;
    add_conv_norm(l, "stem", "stem.conv", "stem.gn", arch.channels, w, 3);
    const int widths[4] = {w, 2 * w, 4 * w, 8 * w};
    int cin = w;
    for (int b = 0; b < 4; ++b) {
      const std::string g = "block" + std::to_string(b + 1);
      add_conv_norm(l, g, g + ".conv1", g + ".gn1", cin, widths[b], 3);
      add_conv_norm(l, g, g + ".conv2", g + ".gn2", widths[b], widths[b], 3);
      if (b > 0) add_conv_norm(l, g, g + ".shortcut", g + ".gn_sc", cin, widths[b], 1);
      cin = widths[b];
    }
    l.add("head", "head.weight", {head_classes, cin}, std::sqrt(1.0f / static_cast<float>(cin)));
    l.add("head", "head.bias", {head_classes}, 0.0f);
  } else if (arch.id == "linear") {
    const int in = arch.channels * arch.height * arch.width;
    l.add("head", "head.weight", {head_classes, in}, std::sqrt(1.0f / static_cast<float>(in)));
    l.add("head", "head.bias", {head_classes}, 0.0f);
  } else {
    throw InvalidArgument("unknown architecture '" + arch.id + "'");
  }
  return l;
}

}  // namespace uex
