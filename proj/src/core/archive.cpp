#include "uex/core/archive.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "uex/core/error.hpp"

namespace uex {

namespace {

constexpr char kMagic[8] = {'U', 'E', 'X', 'A', 'R', 'C', '0', '1'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

}  // namespace

std::string encode_archive(const Archive& a) {
  nlohmann::json m = a.manifest;
  m["payload_floats"] = a.payload.size();
  const std::string text = m.dump();
  std::string out(kMagic, sizeof(kMagic));
  put_u64(out, text.size());
  out += text;
  const std::size_t base = out.size();
  out.resize(base + 4 * a.payload.size());
  for (std::size_t i = 0; i < a.payload.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(a.payload[i]);
    for (int b = 0; b < 4; ++b) out[base + 4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
  }
  return out;
}

Archive decode_archive(const std::string& bytes, const std::string& origin) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw IoError(origin + ": not a uex archive");
  const std::uint64_t len = get_u64(bytes, 8);
  if (len > bytes.size() - 16) throw IoError(origin + ": truncated manifest");
  Archive a;
  try {
    a.manifest = nlohmann::json::parse(bytes.substr(16, len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(origin + ": corrupt manifest: " + e.what());
  }
  const auto count = a.manifest.value("payload_floats", std::uint64_t{0});
  const std::size_t base = 16 + len;
  if (bytes.size() != base + 4 * count) throw IoError(origin + ": payload size mismatch");
  a.payload.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b)
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[base + 4 * i + b])) << (8 * b);
    a.payload[i] = std::bit_cast<float>(bits);
  }
  return a;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

void write_archive(const std::filesystem::path& path, const Archive& a) { write_file(path, encode_archive(a)); }

Archive read_archive(const std::filesystem::path& path) { return decode_archive(read_file(path), path.string()); }

}  // namespace uex
