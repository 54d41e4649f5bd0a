#pragma once

#include <charconv>
#include <stdexcept>
#include <string>
#include <string_view>

namespace headprune {

/// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

/// Whole-string parse; throws std::invalid_argument on trailing garbage.
inline double parse_double(std::string_view s) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw std::invalid_argument("not a number: '" + std::string(s) + "'");
  return v;
}

}  // namespace headprune
