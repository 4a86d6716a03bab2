#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "uex/data/dataset.hpp"

namespace uex::cli {

/// Which dataset and which side of the prior/downstream split a command uses.
/// Names: glyphs, glyphs-prior, glyphs-downstream, cifar10, cifar10-prior, cifar10-downstream.
struct DataSpec {
  std::string name = "glyphs-downstream";
  std::filesystem::path root;
  int size = 32;
  int classes = 10;
  int train_per_class = 300;
  int test_per_class = 100;
  int prior_classes = 5;
  int downstream_classes = 5;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static DataSpec from_json(const nlohmann::json& j);
  SplitDataset load() const;
};

/// Record written next to every command's outputs.
struct ExperimentManifest {
  std::string command;
  nlohmann::json config;
  std::vector<std::pair<std::string, std::string>> inputs;   // path, sha256
  std::vector<std::pair<std::string, std::string>> outputs;  // path, sha256
  std::vector<std::uint64_t> seeds;
  bool deterministic = false;
  double wall_seconds = 0.0;

  void add_input(const std::filesystem::path& p);
  void add_output(const std::filesystem::path& p);
  nlohmann::json to_json() const;
};

void write_manifest(const std::filesystem::path& path, const ExperimentManifest& m);

/// Exclusive advisory lock on `<dir>/.uex.lock`, held for the object's lifetime.
class FileLock {
 public:
  explicit FileLock(const std::filesystem::path& dir);
  ~FileLock();
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

 private:
  int fd_ = -1;
};

/// "30,30,30" -> {30, 30, 30}.
std::array<int, 3> parse_stages(const std::string& s);
/// "a,b,c" -> {"a", "b", "c"}; empty string -> {}.
std::vector<std::string> split_list(const std::string& s);

const char* toolkit_version();

/// Exit codes: 0 success, 1 runtime or validation error, 2 usage error,
/// 3 an output failed its invariant check.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace uex::cli
