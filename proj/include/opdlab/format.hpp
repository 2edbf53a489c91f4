#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <string>

namespace opdlab {

// Shortest round-trip decimal form; identical bytes for identical doubles.
inline std::string format_real(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

// Fixed-point with `digits` decimals, for human-facing tables.
inline std::string format_fixed(double x, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, x);
  return buf;
}

}  // namespace opdlab
