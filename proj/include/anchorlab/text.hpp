#pragma once

#include <charconv>
#include <cstdint>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "anchorlab/error.hpp"

namespace anchorlab::text {

/// Round-trip decimal form of a double: `%.17g` semantics.
inline std::string format_real(double value) {
  char buf[40];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value, std::chars_format::general, 17);
  if (ec != std::errc{}) fail(ErrorKind::invalid_input, "cannot format real");
  return std::string(buf, ptr);
}

inline std::string_view trim(std::string_view s) {
  const auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; };
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

inline double parse_real(std::string_view s) {
  s = trim(s);
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty())
    fail(ErrorKind::invalid_input, "not a number: '" + std::string(s) + "'");
  return value;
}

template <typename Int = std::int64_t>
Int parse_int(std::string_view s) {
  s = trim(s);
  Int value{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty())
    fail(ErrorKind::invalid_input, "not an integer: '" + std::string(s) + "'");
  return value;
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  for (;;) {
    const auto pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      parts.push_back(s.substr(start));
      return parts;
    }
    parts.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

/// Parses `key=value` and returns value, failing if the key does not match.
inline std::string_view expect_field(std::string_view token, std::string_view key) {
  token = trim(token);
  if (token.size() <= key.size() || token.substr(0, key.size()) != key || token[key.size()] != '=')
    fail(ErrorKind::invalid_input, "expected '" + std::string(key) + "=...', got '" + std::string(token) + "'");
  return token.substr(key.size() + 1);
}

}  // namespace anchorlab::text
