#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace uex {

/// Self-describing binary container shared by checkpoints, perturbation banks
/// and per-sample delta sets:
///
///   8 bytes   magic "UEXARC01"
///   8 bytes   manifest length L, little-endian uint64
///   L bytes   JSON manifest (sorted keys)
///   4*P bytes float32 payload, little-endian, P = manifest["payload_floats"]
struct Archive {
  nlohmann::json manifest;
  std::vector<float> payload;
};

std::string encode_archive(const Archive& a);
Archive decode_archive(const std::string& bytes, const std::string& origin = "<memory>");

void write_archive(const std::filesystem::path& path, const Archive& a);
Archive read_archive(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace uex
