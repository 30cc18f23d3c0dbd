#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "anchorlab/anchor.hpp"
#include "anchorlab/error.hpp"
#include "anchorlab/gradients.hpp"
#include "anchorlab/metrics.hpp"
#include "anchorlab/objectives.hpp"
#include "anchorlab/policy.hpp"
#include "anchorlab/rng.hpp"
#include "anchorlab/text.hpp"

// Numeric renderings of the softmax collapse arguments. The closed forms are
// written out here directly rather than through gradients.hpp, so the two
// code paths can be compared against each other.

namespace anchorlab::dynamics {

struct Record {
  std::int64_t step = 0;
  std::string quantity;
  double value = 0.0;
};

struct Check {
  std::string name;
  bool passed = false;
};

struct DynamicsReport {
  std::string scenario;
  std::vector<Record> series;
  std::vector<Check> checks;

  void add(std::int64_t step, std::string quantity, double value) {
    if (!std::isfinite(value)) fail(ErrorKind::invalid_input, "non-finite value for " + quantity);
    series.push_back({step, std::move(quantity), value});
  }
  bool all_passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
  }
};

/// Logit change of an unsampled valid token when a competitor is rewarded:
/// -eta * A * pi_valid.
inline double passive_suppression_step(std::span<const double> logits, VocabId sampled, VocabId valid,
                                       double advantage, double eta) {
  if (sampled == valid) fail(ErrorKind::invalid_input, "sampled and valid token must differ");
  if (!(advantage > 0)) fail(ErrorKind::invalid_input, "advantage must be positive");
  if (sampled >= logits.size() || valid >= logits.size()) fail(ErrorKind::invalid_input, "token out of range");
  return -eta * advantage * softmax(logits)[valid];
}

/// Recovery push on an unsampled valid token after an error is penalised
/// with A = -C: eta * C * pi_valid. The dominant path is taken to hold the
/// remaining mass 1 - pi_valid.
inline DynamicsReport vanishing_recovery_sweep(std::span<const double> pi_valid_values, double penalty, double eta) {
  if (!(penalty > 0)) fail(ErrorKind::invalid_input, "penalty C must be positive");
  DynamicsReport report{"vanishing_recovery", {}, {}};
  bool linear = true, rich_get_richer = true;
  double slope = std::nan("");
  std::int64_t step = 0;
  for (double pi : pi_valid_values) {
    if (!(pi >= 0 && pi < 1)) fail(ErrorKind::invalid_input, "pi_valid must lie in [0, 1)");
    const double dz = eta * penalty * pi;
    const double pi_path = 1.0 - pi;
    const double dz_path = eta * penalty * pi_path;
    report.add(step, "pi_valid", pi);
    report.add(step, "delta_z_valid", dz);
    report.add(step, "delta_z_path", dz_path);
    if (pi > 0) {
      const double s = dz / pi;
      if (std::isnan(slope)) slope = s;
      linear = linear && std::abs(s - slope) <= 1e-12 * std::max(1.0, std::abs(slope));
    }
    if (pi_path > pi) rich_get_richer = rich_get_richer && dz_path > dz;
    ++step;
  }
  report.checks.push_back({"linear_in_pi_valid", linear});
  report.checks.push_back({"dominant_path_gains_more", rich_get_richer});
  return report;
}

/// Per-token gradients of the two error-correction mechanisms:
///   pg_grad   = grad_z pi(y_err)        -> -pi(y_err) pi(k) off the error token
///   apo_grad  = grad_z sum_{S} pi       -> pi(k)(1 - P_safe) inside S
inline DynamicsReport redistribution_compare(const Dist& dist, VocabId error_token, const AnchorSet& anchor_set) {
  if (error_token >= dist.size()) fail(ErrorKind::invalid_input, "error token out of range");
  if (anchor_set.contains(error_token)) fail(ErrorKind::invalid_input, "error token must not be in the anchor set");
  if (anchor_set.empty()) fail(ErrorKind::invalid_input, "anchor set must not be empty");
  DynamicsReport report{"redistribution", {}, {}};
  const double p_err = dist[error_token];
  double p_safe = 0.0;
  for (VocabId j : anchor_set) p_safe += dist[j];

  std::vector<double> pg(dist.size()), apo(dist.size());
  for (VocabId k = 0; k < dist.size(); ++k) {
    pg[k] = k == error_token ? p_err * (1.0 - p_err) : -p_err * dist[k];
    apo[k] = anchor_set.contains(k) ? dist[k] * (1.0 - p_safe) : -dist[k] * p_safe;
    report.add(static_cast<std::int64_t>(k), "pi", dist[k]);
    report.add(static_cast<std::int64_t>(k), "pg_grad", pg[k]);
    report.add(static_cast<std::int64_t>(k), "apo_grad", apo[k]);
  }

  bool pg_bounded = true;
  for (VocabId k = 0; k < dist.size(); ++k)
    if (k != error_token) pg_bounded = pg_bounded && std::abs(pg[k]) <= p_err * dist[k] * (1.0 + 1e-12);
  report.checks.push_back({"pg_scales_with_error_mass", pg_bounded});

  bool persistent = true;
  if (p_safe < 1.0)
    for (VocabId k : anchor_set)
      if (dist[k] > 0) persistent = persistent && apo[k] > 0;
  report.checks.push_back({"apo_signal_persists", persistent});

  bool ranking = true;
  for (VocabId a : anchor_set)
    for (VocabId b : anchor_set)
      if (a < b && dist[a] > 0 && dist[b] > 0 && p_safe < 1.0) {
        const double lhs = apo[a] / apo[b];
        const double rhs = dist[a] / dist[b];
        ranking = ranking && std::abs(lhs - rhs) <= 1e-12 * std::max(1.0, std::abs(rhs));
      }
  report.checks.push_back({"structure_preserving", ranking});
  return report;
}

struct BanditOptions {
  bool raw_reinforce = false;  // A = R - mean(R), no std normalisation
};

/// Single-context bandit: each step samples N tokens from the current
/// policy, rewards membership in `valid_set`, and applies one token-mean
/// update with the chosen method. The starting policy serves as pi_ref.
/// Records per step: pi of each valid token, valid_mass, entropy, p_safe.
inline DynamicsReport collapse_trajectory(std::span<const double> logits, const AnchorSet& valid_set,
                                          const MethodConfig& cfg, std::size_t steps, Rng& rng,
                                          BanditOptions options = {}) {
  if (valid_set.empty()) fail(ErrorKind::invalid_input, "valid set must not be empty");
  for (VocabId v : valid_set)
    if (v >= logits.size()) fail(ErrorKind::invalid_input, "valid token out of range");
  cfg.validate();
  DynamicsReport report{"collapse_" + std::string(to_string(cfg.method)), {}, {}};
  std::vector<double> z(logits.begin(), logits.end());
  const Dist ref = softmax(std::span<const double>(z));
  const auto manifold = top_k(ref, cfg.anchor_k).members;

  const auto record = [&](std::int64_t step) {
    const Dist d = softmax(std::span<const double>(z));
    double valid_mass = 0.0, p_safe = 0.0;
    for (VocabId v : valid_set) {
      report.add(step, "pi_" + std::to_string(v), d[v]);
      valid_mass += d[v];
    }
    for (VocabId j : manifold) p_safe += d[j];
    report.add(step, "valid_mass", valid_mass);
    report.add(step, "entropy", entropy(d));
    report.add(step, "p_safe", p_safe);
  };

  record(0);
  for (std::size_t step = 1; step <= steps; ++step) {
    const Dist old = softmax(std::span<const double>(z));
    std::vector<VocabId> tokens;
    std::vector<double> rewards;
    for (std::size_t n = 0; n < cfg.group_size; ++n) {
      tokens.push_back(sample_token(old, rng));
      rewards.push_back(valid_set.contains(tokens.back()) ? 1.0 : 0.0);
    }
    std::vector<double> adv;
    if (options.raw_reinforce) {
      double mean = 0.0;
      for (double r : rewards) mean += r;
      mean /= static_cast<double>(rewards.size());
      for (double r : rewards) adv.push_back(r - mean);
    } else {
      adv = group_advantages(rewards, cfg.adv_eps);
    }
    std::vector<double> grad(z.size(), 0.0);
    if (std::any_of(adv.begin(), adv.end(), [](double a) { return a != 0.0; })) {
      for (std::size_t n = 0; n < tokens.size(); ++n) {
        const auto u = method_token_update(old, old, ref, tokens[n], adv[n], cfg);
        vec::axpy(grad, 1.0, std::span<const double>(u.gradient));
      }
    }
    const double scale = cfg.learning_rate / static_cast<double>(tokens.size());
    for (std::size_t k = 0; k < z.size(); ++k) z[k] = std::max(z[k] + scale * grad[k], kLogitFloor);
    record(static_cast<std::int64_t>(step));
  }
  return report;
}

/// Last recorded value of `quantity`, or NaN.
inline double final_value(const DynamicsReport& report, const std::string& quantity) {
  for (auto it = report.series.rbegin(); it != report.series.rend(); ++it)
    if (it->quantity == quantity) return it->value;
  return std::nan("");
}

inline constexpr std::string_view kDynamicsCsvHeader = "scenario,step,quantity,value";

inline void write_dynamics_csv(std::ostream& os, std::span<const DynamicsReport> reports, bool header = true) {
  if (header) os << kDynamicsCsvHeader << '\n';
  for (const auto& r : reports)
    for (const auto& rec : r.series)
      os << r.scenario << ',' << rec.step << ',' << rec.quantity << ',' << text::format_real(rec.value) << '\n';
}

}  // namespace anchorlab::dynamics
