#include "uex/core/rational.hpp"

#include <cctype>
#include <numeric>

#include "uex/core/error.hpp"

namespace uex {

namespace {

std::int64_t parse_int(const std::string& s, const std::string& whole) {
  if (s.empty() || s.size() > 15) throw InvalidArgument("bad rational '" + whole + "'");
  for (char c : s)
    if (!std::isdigit(static_cast<unsigned char>(c))) throw InvalidArgument("bad rational '" + whole + "'");
  return std::stoll(s);
}

Rational reduced(std::int64_t n, std::int64_t d) {
  if (d == 0) throw InvalidArgument("rational with zero denominator");
  const std::int64_t g = std::gcd(n, d);
  return {n / (g ? g : 1), d / (g ? g : 1)};
}

}  // namespace

Rational Rational::parse(const std::string& text) {
  if (text.empty()) throw InvalidArgument("empty rational");
  if (text[0] == '-') throw InvalidArgument("negative value '" + text + "'");
  if (const auto slash = text.find('/'); slash != std::string::npos)
    return reduced(parse_int(text.substr(0, slash), text), parse_int(text.substr(slash + 1), text));
  if (const auto dot = text.find('.'); dot != std::string::npos) {
    const std::string ip = text.substr(0, dot), fp = text.substr(dot + 1);
    std::int64_t den = 1;
    for (std::size_t i = 0; i < fp.size(); ++i) den *= 10;
    const std::int64_t whole = ip.empty() ? 0 : parse_int(ip, text);
    const std::int64_t frac = fp.empty() ? 0 : parse_int(fp, text);
    return reduced(whole * den + frac, den);
  }
  return {parse_int(text, text), 1};
}

std::string Rational::str() const {
  return den == 1 ? std::to_string(num) : std::to_string(num) + "/" + std::to_string(den);
}

}  // namespace uex
