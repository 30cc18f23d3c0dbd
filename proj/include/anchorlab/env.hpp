#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "anchorlab/anchor.hpp"
#include "anchorlab/error.hpp"
#include "anchorlab/policy.hpp"
#include "anchorlab/rng.hpp"
#include "anchorlab/text.hpp"

namespace anchorlab {

using TokenSequence = std::vector<VocabId>;

struct EnvConfig {
  std::size_t depth = 4;
  std::size_t branching = 8;
  std::size_t num_valid_leaves = 8;
  double ref_concentration = 1.5;  // logit bonus for children that lead to a valid leaf
  double ref_noise = 0.5;          // std-dev of Gaussian logit jitter
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const EnvConfig&) const = default;
};

namespace detail {

/// b^e, or 0 when the result would exceed `limit`.
inline std::uint64_t checked_pow(std::uint64_t b, std::size_t e, std::uint64_t limit = std::uint64_t{1} << 40) {
  std::uint64_t r = 1;
  for (std::size_t i = 0; i < e; ++i) {
    if (r > limit / b) return 0;
    r *= b;
  }
  return r;
}

}  // namespace detail

inline void EnvConfig::validate() const {
  if (depth < 1) fail(ErrorKind::invalid_config, "depth must be >= 1");
  if (branching < 2) fail(ErrorKind::invalid_config, "branching must be >= 2");
  const auto leaves = detail::checked_pow(branching, depth);
  if (leaves == 0 || leaves > (std::uint64_t{1} << 24))
    fail(ErrorKind::invalid_config, "tree too large: branching^depth must be <= 2^24");
  if (num_valid_leaves < 1) fail(ErrorKind::invalid_config, "num_valid_leaves must be >= 1");
  if (num_valid_leaves > leaves) fail(ErrorKind::invalid_config, "num_valid_leaves exceeds branching^depth");
  if (!(ref_concentration >= 0) || !std::isfinite(ref_concentration))
    fail(ErrorKind::invalid_config, "ref_concentration must be finite and >= 0");
  if (!(ref_noise >= 0) || !std::isfinite(ref_noise)) fail(ErrorKind::invalid_config, "ref_noise must be >= 0");
}

/// Depth-D, branching-B token tree. Node (context) ids are assigned level by
/// level: the node for prefix p of length d is sum_{i<d} B^i + base-B value of p.
/// The root is context 0.
class ReasoningTree {
 public:
  ReasoningTree(std::size_t depth, std::size_t branching, std::set<TokenSequence> valid_leaves, LogitTable ref_policy)
      : depth_(depth), branching_(branching), valid_leaves_(std::move(valid_leaves)), ref_(std::move(ref_policy)) {
    if (depth_ < 1 || branching_ < 2) fail(ErrorKind::invalid_input, "tree needs depth >= 1 and branching >= 2");
    const auto total = detail::checked_pow(branching_, depth_);
    if (total == 0) fail(ErrorKind::invalid_input, "tree too large");
    if (valid_leaves_.empty() || valid_leaves_.size() > total)
      fail(ErrorKind::invalid_input, "number of valid leaves out of range");
    for (const auto& leaf : valid_leaves_) {
      if (leaf.size() != depth_) fail(ErrorKind::invalid_input, "valid leaf has wrong length");
      for (VocabId t : leaf)
        if (t >= branching_) fail(ErrorKind::invalid_input, "valid leaf token out of range");
      for (std::size_t d = 0; d <= depth_; ++d) valid_prefixes_.insert(TokenSequence(leaf.begin(), leaf.begin() + d));
    }
    level_offset_.resize(depth_ + 1);
    std::uint64_t offset = 0, width = 1;
    for (std::size_t d = 0; d <= depth_; ++d) {
      level_offset_[d] = offset;
      offset += width;
      width *= branching_;
    }
    if (ref_.vocab_size() != branching_) fail(ErrorKind::invalid_input, "reference vocabulary != branching");
    for (std::uint64_t id = 0; id < num_contexts(); ++id) {
      if (!ref_.contains(ContextId{id})) fail(ErrorKind::invalid_input, "reference policy misses a context");
      const auto p = ref_.dist(ContextId{id});
      for (double x : p.probs())
        if (!(x > 0)) fail(ErrorKind::invalid_input, "reference policy must be strictly positive");
    }
  }

  std::size_t depth() const noexcept { return depth_; }
  std::size_t branching() const noexcept { return branching_; }
  std::size_t vocab_size() const noexcept { return branching_; }
  /// Number of internal nodes (prefixes of length < D).
  std::uint64_t num_contexts() const noexcept { return level_offset_[depth_]; }
  std::uint64_t num_leaves() const noexcept { return level_offset_[depth_] * (branching_ - 1) + 1; }
  const std::set<TokenSequence>& valid_leaves() const noexcept { return valid_leaves_; }
  const LogitTable& ref_policy() const noexcept { return ref_; }

  ContextId context_of(std::span<const VocabId> prefix) const {
    if (prefix.size() >= depth_) fail(ErrorKind::invalid_input, "prefix must be shorter than the depth");
    std::uint64_t index = 0;
    for (VocabId t : prefix) {
      if (t >= branching_) fail(ErrorKind::invalid_input, "token out of range");
      index = index * branching_ + t;
    }
    return ContextId{level_offset_[prefix.size()] + index};
  }

  std::size_t depth_of(ContextId ctx) const {
    for (std::size_t d = depth_; d-- > 0;)
      if (ctx.value >= level_offset_[d]) return d;
    return 0;
  }

  bool is_valid(std::span<const VocabId> tokens) const {
    return valid_leaves_.contains(TokenSequence(tokens.begin(), tokens.end()));
  }

  /// True iff some valid leaf extends `prefix`.
  bool leads_to_valid(std::span<const VocabId> prefix) const {
    return valid_prefixes_.contains(TokenSequence(prefix.begin(), prefix.end()));
  }

  bool operator==(const ReasoningTree& o) const {
    return depth_ == o.depth_ && branching_ == o.branching_ && valid_leaves_ == o.valid_leaves_ && ref_ == o.ref_;
  }

 private:
  std::size_t depth_;
  std::size_t branching_;
  std::set<TokenSequence> valid_leaves_;
  std::set<TokenSequence> valid_prefixes_;
  std::vector<std::uint64_t> level_offset_;
  LogitTable ref_;
};

namespace detail {

inline TokenSequence leaf_tokens(std::uint64_t index, std::size_t depth, std::size_t branching) {
  TokenSequence tokens(depth);
  for (std::size_t d = depth; d-- > 0;) {
    tokens[d] = static_cast<VocabId>(index % branching);
    index /= branching;
  }
  return tokens;
}

/// Calls fn(prefix) for every internal node in context-id order.
template <typename Fn>
void for_each_prefix(std::size_t depth, std::size_t branching, Fn&& fn) {
  for (std::size_t d = 0; d < depth; ++d) {
    const auto width = checked_pow(branching, d);
    for (std::uint64_t i = 0; i < width; ++i) fn(leaf_tokens(i, d, branching));
  }
}

}  // namespace detail

/// Picks `num_valid_leaves` distinct leaves uniformly (Floyd's sampling), then
/// gives every child that leads to a valid leaf a logit bonus of
/// `ref_concentration`, plus N(0, ref_noise^2) jitter on every logit.
inline ReasoningTree generate_tree(const EnvConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const std::uint64_t total = detail::checked_pow(cfg.branching, cfg.depth);
  std::set<std::uint64_t> chosen;
  for (std::uint64_t j = total - cfg.num_valid_leaves; j < total; ++j) {
    const std::uint64_t t = rng.below(j + 1);
    chosen.insert(chosen.contains(t) ? j : t);
  }
  std::set<TokenSequence> leaves;
  std::set<TokenSequence> prefixes;
  for (auto index : chosen) {
    auto leaf = detail::leaf_tokens(index, cfg.depth, cfg.branching);
    for (std::size_t d = 0; d <= cfg.depth; ++d) prefixes.insert(TokenSequence(leaf.begin(), leaf.begin() + d));
    leaves.insert(std::move(leaf));
  }

  LogitTable ref(cfg.branching);
  std::uint64_t id = 0;
  detail::for_each_prefix(cfg.depth, cfg.branching, [&](const TokenSequence& prefix) {
    std::vector<double> z(cfg.branching);
    TokenSequence child = prefix;
    child.push_back(0);
    for (VocabId b = 0; b < cfg.branching; ++b) {
      child.back() = b;
      z[b] = (prefixes.contains(child) ? cfg.ref_concentration : 0.0) + cfg.ref_noise * rng.normal();
    }
    ref.set(ContextId{id++}, std::move(z));
  });
  return ReasoningTree(cfg.depth, cfg.branching, std::move(leaves), std::move(ref));
}

/// Binary verifiable reward.
inline int verify(const ReasoningTree& tree, std::span<const VocabId> tokens) {
  if (tokens.size() != tree.depth()) fail(ErrorKind::invalid_input, "sequence length != tree depth");
  return tree.is_valid(tokens) ? 1 : 0;
}

struct Trajectory {
  TokenSequence tokens;
  std::vector<ContextId> contexts;
  std::vector<double> old_log_probs;
  int reward = 0;
};

/// Samples one root-to-leaf path under `policy`.
inline Trajectory rollout(const ReasoningTree& tree, const PolicySnapshot& policy, Rng& rng) {
  Trajectory traj;
  traj.tokens.reserve(tree.depth());
  for (std::size_t t = 0; t < tree.depth(); ++t) {
    const ContextId ctx = tree.context_of(traj.tokens);
    const auto logits = policy.table().logits(ctx);
    const VocabId token = sample_token(softmax(logits), rng);
    traj.contexts.push_back(ctx);
    traj.old_log_probs.push_back(log_softmax_at(logits, token));
    traj.tokens.push_back(token);
  }
  traj.reward = verify(tree, traj.tokens);
  return traj;
}

/// Product of per-step probabilities of `tokens` under `table`.
inline double sequence_probability(const ReasoningTree& tree, const LogitTable& table,
                                   std::span<const VocabId> tokens) {
  double p = 1.0;
  for (std::size_t t = 0; t < tokens.size(); ++t) p *= table.dist(tree.context_of(tokens.first(t)))[tokens[t]];
  return p;
}

/// Exact probability of sampling a valid leaf.
inline double exact_expected_reward(const ReasoningTree& tree, const LogitTable& table) {
  double total = 0.0;
  for (const auto& leaf : tree.valid_leaves()) total += sequence_probability(tree, table, leaf);
  return total;
}

struct CoverageRow {
  std::size_t k = 0;
  std::size_t hits = 0;
  std::size_t total = 0;
  double recall = 0.0;
  double loss_rate = 0.0;
};

/// Teacher-forced Top-K recall: for every valid leaf and every step t, is the
/// true token y*_t inside TopK(model(. | y*_<t))?
inline std::vector<CoverageRow> oracle_coverage(const ReasoningTree& tree, const LogitTable& model,
                                                std::span<const std::size_t> k_values) {
  std::vector<CoverageRow> rows;
  for (std::size_t k : k_values) {
    if (k < 1 || k > tree.vocab_size()) fail(ErrorKind::invalid_input, "coverage K must lie in [1, V]");
    CoverageRow row;
    row.k = k;
    for (const auto& leaf : tree.valid_leaves()) {
      for (std::size_t t = 0; t < leaf.size(); ++t) {
        const auto dist = model.dist(tree.context_of(std::span(leaf).first(t)));
        const auto members = top_k(dist, k).members;
        row.hits += std::find(members.begin(), members.end(), leaf[t]) != members.end() ? 1 : 0;
        ++row.total;
      }
    }
    row.recall = static_cast<double>(row.hits) / static_cast<double>(row.total);
    row.loss_rate = 1.0 - row.recall;
    rows.push_back(row);
  }
  return rows;
}

// Tree text format:
//   D=<int> B=<int>
//   <t0>,<t1>,...,<tD-1>          one line per valid leaf
//   <reference policy in LogitTable format, starting with V=...>

inline void write_tree(std::ostream& os, const ReasoningTree& tree) {
  os << "D=" << tree.depth() << " B=" << tree.branching() << '\n';
  for (const auto& leaf : tree.valid_leaves()) {
    for (std::size_t t = 0; t < leaf.size(); ++t) os << (t ? "," : "") << leaf[t];
    os << '\n';
  }
  write_logit_table(os, tree.ref_policy());
}

inline ReasoningTree read_tree(std::istream& is) {
  std::string line;
  while (std::getline(is, line) && text::trim(line).empty()) {
  }
  const auto header = text::split(text::trim(line), ' ');
  if (header.size() != 2) fail(ErrorKind::invalid_input, "expected 'D=<int> B=<int>' header");
  const auto depth = text::parse_int<std::size_t>(text::expect_field(header[0], "D"));
  const auto branching = text::parse_int<std::size_t>(text::expect_field(header[1], "B"));
  std::set<TokenSequence> leaves;
  std::optional<LogitTable> ref;
  while (std::getline(is, line)) {
    const auto s = text::trim(line);
    if (s.empty()) continue;
    if (!ref) {
      if (s.starts_with("V=")) {
        ref = detail::parse_logit_table_header(s);
        continue;
      }
      TokenSequence leaf;
      for (auto tok : text::split(s, ',')) leaf.push_back(text::parse_int<VocabId>(tok));
      leaves.insert(std::move(leaf));
    } else {
      detail::parse_logit_table_row(*ref, s);
    }
  }
  if (!ref) fail(ErrorKind::invalid_input, "tree file lacks a reference policy");
  return ReasoningTree(depth, branching, std::move(leaves), std::move(*ref));
}

inline std::string to_text(const ReasoningTree& tree) {
  std::ostringstream os;
  write_tree(os, tree);
  return os.str();
}

}  // namespace anchorlab
