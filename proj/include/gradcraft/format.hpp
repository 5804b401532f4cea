#pragma once

#include <charconv>
#include <cmath>
#include <span>
#include <string>
#include <system_error>

namespace gradcraft {

/// Shortest decimal text that parses back to exactly `x`.
inline std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  if (res.ec != std::errc{}) return std::to_string(x);
  return std::string(buf, res.ptr);
}

/// Space-separated shortest representations.
inline std::string format_doubles(std::span<const double> xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ' ';
    out += format_double(xs[i]);
  }
  return out;
}

}  // namespace gradcraft
