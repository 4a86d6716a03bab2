#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace uex {

/// Stable 64-bit FNV-1a, used to derive per-name random streams.
constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) h = (h ^ static_cast<unsigned char>(c)) * 0x100000001b3ULL;
  return h;
}

/// Seeded generator used everywhere randomness appears. Streams derived with
/// `fork` are independent of how many draws the parent has made.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), eng_(mix(seed)) {}

  std::uint64_t seed() const { return seed_; }
  Rng fork(std::uint64_t salt) const { return Rng(mix(seed_ ^ mix(salt + 0x9e3779b97f4a7c15ULL))); }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(eng_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(eng_); }
  double normal(double mean = 0.0, double sd = 1.0) { return std::normal_distribution<double>(mean, sd)(eng_); }
  /// Uniform integer in [0, n).
  int below(int n) { return std::uniform_int_distribution<int>(0, n - 1)(eng_); }
  double beta(double a, double b) {
    const double x = std::gamma_distribution<double>(a, 1.0)(eng_);
    const double y = std::gamma_distribution<double>(b, 1.0)(eng_);
    return x / (x + y);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[static_cast<std::size_t>(below(static_cast<int>(i)))]);
  }

  std::mt19937_64& engine() { return eng_; }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::mt19937_64 eng_;
};

}  // namespace uex
