#pragma once

#include <cstdint>
#include <string>

namespace uex {

/// Exact non-negative rational used for the perturbation budget so manifests
/// never carry float drift ("8/255" stays "8/255").
struct Rational {
  std::int64_t num = 0;
  std::int64_t den = 1;

  /// Accepts "a/b", an integer, or a plain decimal such as "0.03125".
  static Rational parse(const std::string& text);

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  std::string str() const;
  bool positive() const { return num > 0; }
  friend bool operator==(const Rational&, const Rational&) = default;
};

}  // namespace uex
