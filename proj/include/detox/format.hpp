#pragma once

#include <charconv>
#include <optional>
#include <string>

namespace detox {

// Shortest decimal form that parses back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

// Empty field for a missing value.
inline std::string format_optional(const std::optional<double>& v) {
  return v ? format_double(*v) : std::string();
}

}  // namespace detox
