#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <concepts>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "anchorlab/error.hpp"
#include "anchorlab/rng.hpp"
#include "anchorlab/text.hpp"

namespace anchorlab {

/// Token index into a vocabulary of size V.
using VocabId = std::size_t;

/// Identifies one conditioning prefix (a tree node).
struct ContextId {
  std::uint64_t value = 0;
  auto operator<=>(const ContextId&) const = default;
};

/// Lowest logit the tables will store; stands in for -inf without NaNs.
inline constexpr double kLogitFloor = -700.0;

/// A categorical distribution over the vocabulary. Construction validates
/// non-negativity and normalization (|sum - 1| <= 1e-9).
template <std::floating_point Real = double>
class BasicDist {
 public:
  BasicDist() = default;

  static BasicDist from_probs(std::vector<Real> probs) {
    if (probs.empty()) fail(ErrorKind::invalid_input, "empty distribution");
    Real total = 0;
    for (Real p : probs) {
      if (!std::isfinite(p) || p < 0) fail(ErrorKind::invalid_input, "probability must be finite and >= 0");
      total += p;
    }
    if (std::abs(total - Real(1)) > Real(1e-9)) fail(ErrorKind::invalid_input, "probabilities must sum to 1");
    BasicDist d;
    d.probs_ = std::move(probs);
    return d;
  }

  std::size_t size() const noexcept { return probs_.size(); }
  Real operator[](VocabId k) const { return probs_[k]; }
  std::span<const Real> probs() const noexcept { return probs_; }

  template <std::floating_point Other>
  BasicDist<Other> cast() const {
    std::vector<Other> p(probs_.begin(), probs_.end());
    return BasicDist<Other>::from_probs(std::move(p));
  }

  bool operator==(const BasicDist&) const = default;

 private:
  std::vector<Real> probs_;
};

using Dist = BasicDist<double>;

template <std::floating_point Real>
void require_finite(std::span<const Real> logits) {
  for (Real z : logits)
    if (!std::isfinite(z)) fail(ErrorKind::invalid_input, "non-finite logit");
}

/// Max-subtracted softmax.
template <std::floating_point Real>
BasicDist<Real> softmax(std::span<const Real> logits) {
  if (logits.empty()) fail(ErrorKind::invalid_input, "softmax of empty logit vector");
  require_finite(logits);
  const Real top = *std::max_element(logits.begin(), logits.end());
  std::vector<Real> p(logits.size());
  Real total = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - top);
    total += p[i];
  }
  for (Real& x : p) x /= total;
  return BasicDist<Real>::from_probs(std::move(p));
}

template <std::floating_point Real>
BasicDist<Real> softmax(const std::vector<Real>& logits) {
  return softmax(std::span<const Real>(logits));
}

/// log softmax(z)[token], computed as z_t - logsumexp(z).
template <std::floating_point Real>
Real log_softmax_at(std::span<const Real> logits, VocabId token) {
  if (token >= logits.size()) fail(ErrorKind::invalid_input, "token out of range");
  require_finite(logits);
  const Real top = *std::max_element(logits.begin(), logits.end());
  Real total = 0;
  for (Real z : logits) total += std::exp(z - top);
  return logits[token] - top - std::log(total);
}

/// Draws token i with probability dist[i] by inverting the cumulative sum.
template <std::floating_point Real>
VocabId sample_token(const BasicDist<Real>& dist, Rng& rng) {
  const double u = rng.uniform();
  double cumulative = 0.0;
  VocabId last_positive = 0;
  for (VocabId i = 0; i < dist.size(); ++i) {
    if (dist[i] <= 0) continue;
    cumulative += static_cast<double>(dist[i]);
    last_positive = i;
    if (u < cumulative) return i;
  }
  return last_positive;
}

/// Per-context logit vectors over a fixed vocabulary.
class LogitTable {
 public:
  using Entries = std::map<ContextId, std::vector<double>>;

  LogitTable() = default;
  explicit LogitTable(std::size_t vocab_size) : vocab_size_(vocab_size) {
    if (vocab_size == 0) fail(ErrorKind::invalid_input, "vocabulary size must be positive");
  }

  std::size_t vocab_size() const noexcept { return vocab_size_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  bool contains(ContextId ctx) const { return entries_.contains(ctx); }
  const Entries& entries() const noexcept { return entries_; }

  void set(ContextId ctx, std::vector<double> logits) {
    if (logits.size() != vocab_size_) fail(ErrorKind::invalid_input, "logit vector length != vocabulary size");
    require_finite(std::span<const double>(logits));
    entries_[ctx] = std::move(logits);
  }

  std::span<const double> logits(ContextId ctx) const {
    auto it = entries_.find(ctx);
    if (it == entries_.end()) fail(ErrorKind::invalid_input, "unknown context " + std::to_string(ctx.value));
    return it->second;
  }

  Dist dist(ContextId ctx) const { return softmax(logits(ctx)); }

  /// z <- max(z + scale * delta, kLogitFloor).
  void add(ContextId ctx, std::span<const double> delta, double scale) {
    auto it = entries_.find(ctx);
    if (it == entries_.end()) fail(ErrorKind::invalid_input, "unknown context " + std::to_string(ctx.value));
    if (delta.size() != vocab_size_) fail(ErrorKind::invalid_input, "delta length != vocabulary size");
    for (std::size_t k = 0; k < vocab_size_; ++k) {
      const double z = it->second[k] + scale * delta[k];
      if (!std::isfinite(z)) fail(ErrorKind::invalid_input, "update produced a non-finite logit");
      it->second[k] = std::max(z, kLogitFloor);
    }
  }

  bool operator==(const LogitTable&) const = default;

 private:
  std::size_t vocab_size_ = 0;
  Entries entries_;
};

/// Frozen deep copy of a LogitTable (pi_old, pi_ref).
class PolicySnapshot {
 public:
  PolicySnapshot() = default;
  explicit PolicySnapshot(LogitTable table) : table_(std::move(table)) {}

  const LogitTable& table() const noexcept { return table_; }
  Dist dist(ContextId ctx) const { return table_.dist(ctx); }
  std::size_t vocab_size() const noexcept { return table_.vocab_size(); }

 private:
  LogitTable table_;
};

inline PolicySnapshot snapshot(const LogitTable& policy) { return PolicySnapshot(policy); }

// Text format:
//   V=<int>
//   ctx=<id> z=<v0>,<v1>,...      (one per context, ascending id, %.17g)

inline void write_logit_table(std::ostream& os, const LogitTable& table) {
  os << "V=" << table.vocab_size() << '\n';
  for (const auto& [ctx, z] : table.entries()) {
    os << "ctx=" << ctx.value << " z=";
    for (std::size_t k = 0; k < z.size(); ++k) {
      if (k) os << ',';
      os << text::format_real(z[k]);
    }
    os << '\n';
  }
}

namespace detail {

inline LogitTable parse_logit_table_header(std::string_view line) {
  return LogitTable(text::parse_int<std::size_t>(text::expect_field(line, "V")));
}

inline void parse_logit_table_row(LogitTable& table, std::string_view line) {
  const auto space = line.find(' ');
  if (space == std::string_view::npos) fail(ErrorKind::invalid_input, "malformed context line: " + std::string(line));
  const auto id = text::parse_int<std::uint64_t>(text::expect_field(line.substr(0, space), "ctx"));
  const auto values = text::split(text::expect_field(line.substr(space + 1), "z"), ',');
  std::vector<double> z;
  z.reserve(values.size());
  for (auto v : values) z.push_back(text::parse_real(v));
  if (table.contains(ContextId{id})) fail(ErrorKind::invalid_input, "duplicate context " + std::to_string(id));
  table.set(ContextId{id}, std::move(z));
}

}  // namespace detail

/// Reads a table from `is`, consuming lines until EOF.
inline LogitTable read_logit_table(std::istream& is) {
  std::string line;
  while (std::getline(is, line) && text::trim(line).empty()) {
  }
  if (text::trim(line).empty()) fail(ErrorKind::invalid_input, "missing V= header");
  LogitTable table = detail::parse_logit_table_header(line);
  while (std::getline(is, line)) {
    if (text::trim(line).empty()) continue;
    detail::parse_logit_table_row(table, text::trim(line));
  }
  return table;
}

inline std::string to_text(const LogitTable& table) {
  std::ostringstream os;
  write_logit_table(os, table);
  return os.str();
}

inline LogitTable logit_table_from_text(const std::string& s) {
  std::istringstream is(s);
  return read_logit_table(is);
}

}  // namespace anchorlab
