#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "anchorlab/anchor.hpp"
#include "anchorlab/env.hpp"
#include "anchorlab/error.hpp"
#include "anchorlab/objectives.hpp"
#include "anchorlab/policy.hpp"
#include "anchorlab/text.hpp"

namespace anchorlab {

struct MetricRecord {
  std::int64_t step = 0;
  double pass_at_1 = 0.0;
  double pass_at_K = 0.0;
  double mean_entropy = 0.0;    // nats
  double mean_max_prob = 0.0;
  double diversity_score = 0.0; // 1 - Self-BLEU
  double support_mass = 0.0;    // mean policy mass inside TopK(pi_ref)
  double kl_to_ref = 0.0;
  std::size_t eval_K = 0;

  bool operator==(const MetricRecord&) const = default;
};

struct PassMetrics {
  double pass_at_1 = 0.0;
  double pass_at_K = 0.0;
};

/// rewards[p] holds the K binary outcomes for prompt p. Pass@1 is the grand
/// mean (Avg@K); Pass@K the fraction of prompts with at least one success.
inline PassMetrics pass_metrics(const std::vector<std::vector<int>>& rewards) {
  if (rewards.empty()) fail(ErrorKind::invalid_input, "no prompts");
  double total = 0.0, hits = 0.0;
  std::size_t count = 0;
  for (const auto& prompt : rewards) {
    if (prompt.empty()) fail(ErrorKind::invalid_input, "pass metrics need K >= 1");
    bool any = false;
    for (int r : prompt) {
      total += r;
      any = any || r != 0;
    }
    count += prompt.size();
    hits += any ? 1.0 : 0.0;
  }
  return {total / static_cast<double>(count), hits / static_cast<double>(rewards.size())};
}

template <std::floating_point Real>
Real entropy(const BasicDist<Real>& dist) {
  Real h = 0;
  for (Real p : dist.probs())
    if (p > 0) h -= p * std::log(p);
  return h;
}

struct EntropyStats {
  double mean_entropy = 0.0;
  double mean_max_prob = 0.0;
};

/// Averages over every visited (trajectory, step) context.
inline EntropyStats entropy_and_maxprob(const LogitTable& policy, std::span<const Trajectory> trajectories) {
  EntropyStats out;
  std::size_t n = 0;
  for (const auto& traj : trajectories) {
    for (ContextId ctx : traj.contexts) {
      const auto d = policy.dist(ctx);
      out.mean_entropy += entropy(d);
      out.mean_max_prob += *std::max_element(d.probs().begin(), d.probs().end());
      ++n;
    }
  }
  if (n == 0) return out;
  out.mean_entropy /= static_cast<double>(n);
  out.mean_max_prob /= static_cast<double>(n);
  return out;
}

namespace detail {

using NgramCounts = std::map<std::vector<VocabId>, int>;

inline NgramCounts ngram_counts(const TokenSequence& seq, std::size_t n) {
  NgramCounts counts;
  if (seq.size() < n) return counts;
  for (std::size_t i = 0; i + n <= seq.size(); ++i) ++counts[std::vector<VocabId>(seq.begin() + i, seq.begin() + i + n)];
  return counts;
}

}  // namespace detail

/// Sentence BLEU of `hypothesis` against `references`: clipped n-gram
/// precisions for n = 1..min(n_max, |hyp|), uniform geometric mean, no
/// smoothing (any zero precision gives 0), brevity penalty against the
/// closest reference length (shorter wins ties).
inline double sentence_bleu(const TokenSequence& hypothesis, std::span<const TokenSequence> references,
                            std::size_t n_max) {
  if (hypothesis.empty() || references.empty()) return 0.0;
  const std::size_t orders = std::min(n_max, hypothesis.size());
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= orders; ++n) {
    const auto hyp = detail::ngram_counts(hypothesis, n);
    detail::NgramCounts max_ref;
    for (const auto& ref : references)
      for (const auto& [gram, c] : detail::ngram_counts(ref, n)) max_ref[gram] = std::max(max_ref[gram], c);
    int matched = 0, total = 0;
    for (const auto& [gram, c] : hyp) {
      total += c;
      auto it = max_ref.find(gram);
      if (it != max_ref.end()) matched += std::min(c, it->second);
    }
    if (matched == 0) return 0.0;
    log_sum += std::log(static_cast<double>(matched) / static_cast<double>(total));
  }
  const double c = static_cast<double>(hypothesis.size());
  double r = static_cast<double>(references.front().size());
  for (const auto& ref : references) {
    const double len = static_cast<double>(ref.size());
    if (std::abs(len - c) < std::abs(r - c) || (std::abs(len - c) == std::abs(r - c) && len < r)) r = len;
  }
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / static_cast<double>(orders));
}

/// 1 - mean_i BLEU(sample_i; all other samples).
inline double diversity_score(std::span<const TokenSequence> samples, std::size_t n_max = 4) {
  if (samples.size() < 2) fail(ErrorKind::undefined_metric, "diversity needs at least two samples");
  if (n_max < 1) fail(ErrorKind::invalid_input, "n_max must be >= 1");
  double total = 0.0;
  std::vector<TokenSequence> others;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    others.clear();
    for (std::size_t j = 0; j < samples.size(); ++j)
      if (j != i) others.push_back(samples[j]);
    total += sentence_bleu(samples[i], others, n_max);
  }
  return std::clamp(1.0 - total / static_cast<double>(samples.size()), 0.0, 1.0);
}

/// Mean over `contexts` of the policy mass inside TopK(ref).
inline double support_mass(const LogitTable& policy, const LogitTable& ref, std::size_t k,
                           std::span<const ContextId> contexts) {
  if (policy.vocab_size() != ref.vocab_size()) fail(ErrorKind::invalid_input, "vocabulary mismatch");
  if (contexts.empty()) return 0.0;
  double total = 0.0;
  for (ContextId ctx : contexts) total += top_k_mass(policy.dist(ctx), ref.dist(ctx), k);
  return total / static_cast<double>(contexts.size());
}

/// Mean exact KL(policy || ref) over `contexts`.
inline double kl_to_ref(const LogitTable& policy, const LogitTable& ref, std::span<const ContextId> contexts) {
  if (contexts.empty()) return 0.0;
  double total = 0.0;
  for (ContextId ctx : contexts) total += kl_penalty(policy.dist(ctx), ref.dist(ctx)).value;
  return total / static_cast<double>(contexts.size());
}

struct EvalConfig {
  std::size_t samples_K = 64;  // rollouts per prompt
  std::size_t prompts = 4;     // independent sample groups from the root
  std::size_t support_k = 8;   // Top-K of pi_ref used for support_mass
  std::size_t bleu_order = 4;

  bool operator==(const EvalConfig&) const = default;
};

/// Samples prompts x samples_K rollouts from `policy` and computes every
/// MetricRecord field over them. Diversity is averaged across prompts.
inline MetricRecord evaluate(const ReasoningTree& tree, const PolicySnapshot& policy, const EvalConfig& cfg, Rng& rng,
                             std::int64_t step) {
  if (cfg.samples_K < 1 || cfg.prompts < 1) fail(ErrorKind::invalid_config, "evaluation needs K >= 1 and prompts >= 1");
  std::vector<std::vector<int>> rewards(cfg.prompts);
  std::vector<Trajectory> all;
  all.reserve(cfg.prompts * cfg.samples_K);
  double diversity = 0.0;
  for (std::size_t p = 0; p < cfg.prompts; ++p) {
    std::vector<TokenSequence> samples;
    for (std::size_t i = 0; i < cfg.samples_K; ++i) {
      auto traj = rollout(tree, policy, rng);
      rewards[p].push_back(traj.reward);
      samples.push_back(traj.tokens);
      all.push_back(std::move(traj));
    }
    diversity += samples.size() >= 2 ? diversity_score(samples, cfg.bleu_order) : 0.0;
  }
  std::vector<ContextId> visited;
  for (const auto& t : all) visited.insert(visited.end(), t.contexts.begin(), t.contexts.end());

  MetricRecord rec;
  rec.step = step;
  const auto pass = pass_metrics(rewards);
  rec.pass_at_1 = pass.pass_at_1;
  rec.pass_at_K = pass.pass_at_K;
  const auto ent = entropy_and_maxprob(policy.table(), all);
  rec.mean_entropy = ent.mean_entropy;
  rec.mean_max_prob = ent.mean_max_prob;
  rec.diversity_score = diversity / static_cast<double>(cfg.prompts);
  rec.support_mass = support_mass(policy.table(), tree.ref_policy(), cfg.support_k, visited);
  rec.kl_to_ref = kl_to_ref(policy.table(), tree.ref_policy(), visited);
  rec.eval_K = cfg.samples_K;
  return rec;
}

inline constexpr std::string_view kMetricsCsvHeader = "step,pass1,passK,entropy,maxprob,diversity,support_mass,kl,eval_K";

inline void write_metric_row(std::ostream& os, const MetricRecord& r) {
  using text::format_real;
  os << r.step << ',' << format_real(r.pass_at_1) << ',' << format_real(r.pass_at_K) << ','
     << format_real(r.mean_entropy) << ',' << format_real(r.mean_max_prob) << ',' << format_real(r.diversity_score)
     << ',' << format_real(r.support_mass) << ',' << format_real(r.kl_to_ref) << ',' << r.eval_K << '\n';
}

/// Writes the CSV. A non-empty `timestamp` is emitted first as a `# ` comment line.
inline void write_metrics_csv(std::ostream& os, std::span<const MetricRecord> records, const std::string& timestamp = {}) {
  if (!timestamp.empty()) os << "# generated " << timestamp << '\n';
  os << kMetricsCsvHeader << '\n';
  for (const auto& r : records) write_metric_row(os, r);
}

/// Parses a metrics CSV, skipping `#` comment lines.
inline std::vector<MetricRecord> read_metrics_csv(std::istream& is) {
  std::vector<MetricRecord> out;
  std::string line;
  bool seen_header = false;
  while (std::getline(is, line)) {
    const auto s = text::trim(line);
    if (s.empty() || s.front() == '#') continue;
    if (!seen_header) {
      if (s != kMetricsCsvHeader) fail(ErrorKind::invalid_input, "unexpected metrics header: " + std::string(s));
      seen_header = true;
      continue;
    }
    const auto f = text::split(s, ',');
    if (f.size() != 9) fail(ErrorKind::invalid_input, "metrics row needs 9 fields: " + std::string(s));
    MetricRecord r;
    r.step = text::parse_int<std::int64_t>(f[0]);
    r.pass_at_1 = text::parse_real(f[1]);
    r.pass_at_K = text::parse_real(f[2]);
    r.mean_entropy = text::parse_real(f[3]);
    r.mean_max_prob = text::parse_real(f[4]);
    r.diversity_score = text::parse_real(f[5]);
    r.support_mass = text::parse_real(f[6]);
    r.kl_to_ref = text::parse_real(f[7]);
    r.eval_K = text::parse_int<std::size_t>(f[8]);
    out.push_back(r);
  }
  if (!seen_header) fail(ErrorKind::invalid_input, "metrics CSV has no header");
  return out;
}

}  // namespace anchorlab
