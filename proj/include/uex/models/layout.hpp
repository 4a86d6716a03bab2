#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace uex {

/// Architecture identity plus the input geometry it was built for.
struct ArchSpec {
  std::string id = "rn-mini";
  int channels = 3;
  int height = 32;
  int width = 32;
  int base_width = 8;

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

/// One named parameter array inside the flat parameter vector.
struct ParamEntry {
  std::string group;
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
  float init_std = 0.0f;    // normal(0, init_std)
  float init_value = 0.0f;  // constant fill when init_std is 0
};

/// Flat layout of a model's parameters. Entries of one group are contiguous
/// and groups appear in network order (stem, block1..4, head).
class ParamLayout {
 public:
  void add(const std::string& group, const std::string& name, std::vector<int> shape, float init_std,
           float init_value = 0.0f);

  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::size_t total() const { return total_; }
  std::vector<std::string> groups() const;
  bool has_group(const std::string& group) const;
  /// [begin, end) offsets of a group.
  std::pair<std::size_t, std::size_t> group_range(const std::string& group) const;
  const ParamEntry& entry(const std::string& name) const;

 private:
  std::vector<ParamEntry> entries_;
  std::size_t total_ = 0;
};

ParamLayout make_layout(const ArchSpec& arch, int head_classes);

/// Registered architecture ids.
std::vector<std::string> known_architectures();

}  // namespace uex
