#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace anchorlab {

enum class ErrorKind {
  invalid_input,
  domain,
  degenerate_anchor,
  oracle_failure,
  invalid_config,
  undefined_metric,
  io,
};

inline constexpr std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::invalid_input: return "invalid_input";
    case ErrorKind::domain: return "domain";
    case ErrorKind::degenerate_anchor: return "degenerate_anchor";
    case ErrorKind::oracle_failure: return "oracle_failure";
    case ErrorKind::invalid_config: return "invalid_config";
    case ErrorKind::undefined_metric: return "undefined_metric";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

/// Single exception type for the library; `kind()` tells callers which
/// contract was broken.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

}  // namespace anchorlab
