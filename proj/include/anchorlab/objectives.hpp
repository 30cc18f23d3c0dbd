#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "anchorlab/anchor.hpp"
#include "anchorlab/error.hpp"
#include "anchorlab/gradients.hpp"
#include "anchorlab/policy.hpp"

namespace anchorlab {

enum class Method { grpo, grpo_kl, grpo_kl_error_only, nsr, apo };

inline constexpr std::array<Method, 5> kAllMethods = {Method::grpo, Method::grpo_kl, Method::grpo_kl_error_only,
                                                      Method::nsr, Method::apo};

inline constexpr std::string_view to_string(Method m) noexcept {
  switch (m) {
    case Method::grpo: return "grpo";
    case Method::grpo_kl: return "grpo_kl";
    case Method::grpo_kl_error_only: return "grpo_kl_error_only";
    case Method::nsr: return "nsr";
    case Method::apo: return "apo";
  }
  return "unknown";
}

inline Method parse_method(std::string_view name) {
  for (Method m : kAllMethods)
    if (to_string(m) == name) return m;
  fail(ErrorKind::invalid_config, "unknown method '" + std::string(name) + "'");
}

/// Optimizer and surrogate coefficients. Defaults are the published training
/// configuration, except learning_rate which is chosen for tabular logits.
struct MethodConfig {
  Method method = Method::apo;
  double clip_eps = 0.2;        // epsilon
  double push_coef = 1.05;      // lambda
  double pull_coef = 0.1;       // beta
  std::size_t anchor_k = 8;     // K
  double kl_coef = 0.01;
  double learning_rate = 0.5;   // eta
  std::size_t group_size = 8;   // N
  double adv_eps = 1e-6;

  void validate() const {
    if (!(clip_eps > 0)) fail(ErrorKind::invalid_config, "clip_eps must be > 0");
    if (!(push_coef > 0)) fail(ErrorKind::invalid_config, "push_coef must be > 0");
    if (!(pull_coef >= 0)) fail(ErrorKind::invalid_config, "pull_coef must be >= 0");
    if (anchor_k < 1) fail(ErrorKind::invalid_config, "anchor_k must be >= 1");
    if (!(kl_coef >= 0)) fail(ErrorKind::invalid_config, "kl_coef must be >= 0");
    if (!(learning_rate > 0)) fail(ErrorKind::invalid_config, "learning_rate must be > 0");
    if (group_size < 2) fail(ErrorKind::invalid_config, "group_size must be >= 2");
    if (!(adv_eps > 0)) fail(ErrorKind::invalid_config, "adv_eps must be > 0");
  }

  bool operator==(const MethodConfig&) const = default;
};

/// Per-token surrogate value and its gradient with respect to the context's logits.
template <std::floating_point Real = double>
struct BasicTokenUpdate {
  ContextId context{};
  VocabId token = 0;
  Real advantage = 0;
  Real ratio = 1;               // ratio fed to the clip (rectified for APO negatives)
  Real surrogate_value = 0;
  LogitGradient<Real> gradient; // ascent direction
  bool clipped = false;
  bool degenerate_anchor = false;
};

using TokenUpdate = BasicTokenUpdate<double>;

/// Group-relative advantages (R_i - mean) / (popstd + adv_eps). A group with
/// identical rewards yields all zeros.
inline std::vector<double> group_advantages(std::span<const double> rewards, double adv_eps) {
  if (rewards.size() < 2) fail(ErrorKind::invalid_input, "group needs at least two rewards");
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= n;
  std::vector<double> adv(rewards.size(), 0.0);
  if (std::all_of(rewards.begin(), rewards.end(), [&](double r) { return r == rewards.front(); })) return adv;
  const double denom = std::sqrt(var) + adv_eps;
  for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - mean) / denom;
  return adv;
}

template <std::floating_point Real>
struct ClipResult {
  Real value = 0;
  Real d_value_d_ratio = 0;
  bool clipped = false;
};

/// min(r A, clip(r, 1-eps, 1+eps) A). Ties go to the unclipped branch.
template <std::floating_point Real>
ClipResult<Real> grpo_token_loss(Real ratio, Real advantage, const MethodConfig& cfg) {
  if (ratio < 0) fail(ErrorKind::invalid_input, "ratio must be >= 0");
  const Real eps = static_cast<Real>(cfg.clip_eps);
  const Real unclipped = ratio * advantage;
  const Real clipped = std::clamp(ratio, Real(1) - eps, Real(1) + eps) * advantage;
  if (unclipped <= clipped) return {unclipped, advantage, false};
  return {clipped, Real(0), true};
}

/// Clipped objective for the rectified ratio: inside [1-eps, 1+eps] the value
/// is r A with slope A; outside it is the constant clip(r) A with zero slope,
/// on both sides of the window.
template <std::floating_point Real>
ClipResult<Real> trust_region_loss(Real ratio, Real advantage, const MethodConfig& cfg) {
  const Real eps = static_cast<Real>(cfg.clip_eps);
  const Real lo = Real(1) - eps;
  const Real hi = Real(1) + eps;
  if (ratio >= lo && ratio <= hi) return {ratio * advantage, advantage, false};
  return {std::clamp(ratio, lo, hi) * advantage, Real(0), true};
}

/// lambda * push_ratio - beta * anchor_ratio.
template <std::floating_point Real>
Real apo_rectified_ratio(Real push_ratio, Real anchor_ratio, const MethodConfig& cfg) {
  if (push_ratio < 0 || anchor_ratio < 0) fail(ErrorKind::invalid_input, "ratios must be >= 0");
  return static_cast<Real>(cfg.push_coef) * push_ratio - static_cast<Real>(cfg.pull_coef) * anchor_ratio;
}

template <std::floating_point Real>
struct KlResult {
  Real value = 0;
  LogitGradient<Real> gradient;
};

/// Exact KL(policy || ref) over the vocabulary and its logit gradient
/// pi(k) * (ln(pi(k) / ref(k)) - KL), with ref held constant.
template <std::floating_point Real>
KlResult<Real> kl_penalty(const BasicDist<Real>& policy, const BasicDist<Real>& ref) {
  if (policy.size() != ref.size()) fail(ErrorKind::invalid_input, "vocabulary mismatch");
  KlResult<Real> out;
  out.gradient.assign(policy.size(), Real(0));
  std::vector<Real> log_ratio(policy.size(), Real(0));
  for (VocabId k = 0; k < policy.size(); ++k) {
    if (policy[k] == 0) continue;
    if (!(ref[k] > 0)) fail(ErrorKind::domain, "reference has zero mass where the policy is positive");
    log_ratio[k] = std::log(policy[k] / ref[k]);
    out.value += policy[k] * log_ratio[k];
  }
  for (VocabId k = 0; k < policy.size(); ++k) out.gradient[k] = policy[k] * (log_ratio[k] - out.value);
  return out;
}

namespace detail {

template <std::floating_point Real>
Real old_prob(const BasicDist<Real>& old_dist, VocabId token) {
  if (token >= old_dist.size()) fail(ErrorKind::invalid_input, "token out of range");
  const Real p = old_dist[token];
  if (!(p > 0)) fail(ErrorKind::domain, "sampled token has zero probability under pi_old");
  return p;
}

template <std::floating_point Real>
void check_same_vocab(const BasicDist<Real>& a, const BasicDist<Real>& b) {
  if (a.size() != b.size()) fail(ErrorKind::invalid_input, "vocabulary mismatch");
}

}  // namespace detail

/// Standard clipped-ratio update with r = pi(token) / pi_old(token).
template <std::floating_point Real>
BasicTokenUpdate<Real> grpo_token_update(const BasicDist<Real>& policy, const BasicDist<Real>& old_dist,
                                         VocabId token, Real advantage, const MethodConfig& cfg) {
  detail::check_same_vocab(policy, old_dist);
  const Real p_old = detail::old_prob(old_dist, token);
  BasicTokenUpdate<Real> u;
  u.token = token;
  u.advantage = advantage;
  u.ratio = policy[token] / p_old;
  const auto loss = grpo_token_loss(u.ratio, advantage, cfg);
  u.surrogate_value = loss.value;
  u.clipped = loss.clipped;
  u.gradient = grad_prob(policy, token);
  for (Real& x : u.gradient) x *= loss.d_value_d_ratio / p_old;
  return u;
}

/// The two additive pieces of A * grad(r_APO) in the unclipped regime:
///   push = A * lambda * grad(pi(y) / pi_old(y))
///   pull = -A * beta * grad(r_anchor)
template <std::floating_point Real>
struct ApoGradientParts {
  LogitGradient<Real> push;
  LogitGradient<Real> pull;
};

template <std::floating_point Real>
ApoGradientParts<Real> apo_gradient_parts(const BasicDist<Real>& policy, const BasicDist<Real>& old_dist,
                                          const BasicAnchorContext<Real>* anchor, VocabId token, Real advantage,
                                          const MethodConfig& cfg) {
  const Real p_old = detail::old_prob(old_dist, token);
  ApoGradientParts<Real> parts;
  parts.push = grad_prob(policy, token);
  for (Real& x : parts.push) x *= advantage * static_cast<Real>(cfg.push_coef) / p_old;
  if (anchor) {
    parts.pull = grad_anchor_ratio(policy, *anchor);
    for (Real& x : parts.pull) x *= -advantage * static_cast<Real>(cfg.pull_coef);
  } else {
    parts.pull.assign(policy.size(), Real(0));
  }
  return parts;
}

/// APO per-token update. Non-negative advantages take the plain clipped-ratio
/// path. Negative advantages use r_APO = lambda r - beta r_anchor inside the
/// trust-region clip; an empty anchor set drops the pull term (beta = 0 for
/// this token) and sets `degenerate_anchor`.
template <std::floating_point Real>
BasicTokenUpdate<Real> apo_token_update(const BasicDist<Real>& policy, const BasicDist<Real>& old_dist,
                                        const BasicDist<Real>& ref_dist, VocabId token, Real advantage,
                                        const MethodConfig& cfg) {
  if (advantage >= 0) return grpo_token_update(policy, old_dist, token, advantage, cfg);
  detail::check_same_vocab(policy, old_dist);
  detail::check_same_vocab(policy, ref_dist);
  const Real p_old = detail::old_prob(old_dist, token);

  const auto anchor = try_build_anchor(ref_dist, policy, token, cfg.anchor_k);
  BasicTokenUpdate<Real> u;
  u.token = token;
  u.advantage = advantage;
  u.degenerate_anchor = !anchor.has_value();
  const Real push_ratio = policy[token] / p_old;
  const Real pull_ratio = anchor ? anchor->anchor_ratio : Real(0);
  u.ratio = anchor ? apo_rectified_ratio(push_ratio, pull_ratio, cfg) : static_cast<Real>(cfg.push_coef) * push_ratio;

  const auto loss = trust_region_loss(u.ratio, advantage, cfg);
  u.surrogate_value = loss.value;
  u.clipped = loss.clipped;
  if (loss.clipped) {
    u.gradient.assign(policy.size(), Real(0));
    return u;
  }
  auto parts = apo_gradient_parts(policy, old_dist, anchor ? &*anchor : nullptr, token, advantage, cfg);
  u.gradient = std::move(parts.push);
  vec::axpy(u.gradient, Real(1), std::span<const Real>(parts.pull));
  return u;
}

/// Dispatches on cfg.method:
///   grpo                clipped ratio only
///   grpo_kl             clipped ratio - kl_coef * KL at every token
///   grpo_kl_error_only  KL term only when advantage < 0
///   nsr                 nothing for advantage >= 0; otherwise A * log pi(token), unclipped
///   apo                 apo_token_update
template <std::floating_point Real>
BasicTokenUpdate<Real> method_token_update(const BasicDist<Real>& policy, const BasicDist<Real>& old_dist,
                                           const BasicDist<Real>& ref_dist, VocabId token, Real advantage,
                                           const MethodConfig& cfg) {
  switch (cfg.method) {
    case Method::grpo:
      return grpo_token_update(policy, old_dist, token, advantage, cfg);
    case Method::grpo_kl:
    case Method::grpo_kl_error_only: {
      auto u = grpo_token_update(policy, old_dist, token, advantage, cfg);
      if (cfg.method == Method::grpo_kl || advantage < 0) {
        const auto kl = kl_penalty(policy, ref_dist);
        const Real coef = static_cast<Real>(cfg.kl_coef);
        u.surrogate_value -= coef * kl.value;
        vec::axpy(u.gradient, -coef, std::span<const Real>(kl.gradient));
      }
      return u;
    }
    case Method::nsr: {
      BasicTokenUpdate<Real> u;
      u.token = token;
      u.advantage = advantage;
      u.ratio = policy[token] / detail::old_prob(old_dist, token);
      if (advantage >= 0) {
        u.gradient.assign(policy.size(), Real(0));
        return u;
      }
      u.surrogate_value = advantage * std::log(policy[token]);
      u.gradient = grad_log_prob(policy, token);
      for (Real& x : u.gradient) x *= advantage;
      return u;
    }
    case Method::apo:
      return apo_token_update(policy, old_dist, ref_dist, token, advantage, cfg);
  }
  fail(ErrorKind::invalid_config, "unhandled method");
}

}  // namespace anchorlab
