#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <set>
#include <span>
#include <vector>

#include "anchorlab/error.hpp"
#include "anchorlab/policy.hpp"

namespace anchorlab {

/// d(loss)/dz_k for one context, k = 0..V-1.
template <std::floating_point Real = double>
using LogitGradient = std::vector<Real>;

using AnchorSet = std::set<VocabId>;

namespace vec {

template <std::floating_point Real>
Real sum(std::span<const Real> v) {
  Real s = 0;
  for (Real x : v) s += x;
  return s;
}

template <std::floating_point Real>
Real dot(std::span<const Real> a, std::span<const Real> b) {
  Real s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

template <std::floating_point Real>
Real norm(std::span<const Real> v) {
  return std::sqrt(dot(v, v));
}

template <std::floating_point Real>
Real cosine(std::span<const Real> a, std::span<const Real> b) {
  return dot(a, b) / (norm(a) * norm(b));
}

/// out += scale * v
template <std::floating_point Real>
void axpy(std::vector<Real>& out, Real scale, std::span<const Real> v) {
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += scale * v[i];
}

template <std::floating_point Real>
std::vector<Real> scaled(std::span<const Real> v, Real scale) {
  std::vector<Real> out(v.begin(), v.end());
  for (Real& x : out) x *= scale;
  return out;
}

template <std::floating_point Real>
bool all_zero(std::span<const Real> v) {
  return std::all_of(v.begin(), v.end(), [](Real x) { return x == Real(0); });
}

}  // namespace vec

namespace detail {

template <std::floating_point Real>
void check_target(const BasicDist<Real>& dist, VocabId target) {
  if (target >= dist.size()) fail(ErrorKind::invalid_input, "target token out of range");
}

}  // namespace detail

/// grad_z log pi(target): delta_{k,target} - pi(k).
template <std::floating_point Real>
LogitGradient<Real> grad_log_prob(const BasicDist<Real>& dist, VocabId target) {
  detail::check_target(dist, target);
  LogitGradient<Real> dz(dist.size());
  for (VocabId k = 0; k < dist.size(); ++k) dz[k] = (k == target ? Real(1) : Real(0)) - dist[k];
  return dz;
}

/// grad_z pi(target): pi(target) * (delta_{k,target} - pi(k)).
/// Off-target entries are the squeezing term -pi(target) * pi(k).
template <std::floating_point Real>
LogitGradient<Real> grad_prob(const BasicDist<Real>& dist, VocabId target) {
  detail::check_target(dist, target);
  const Real pt = dist[target];
  LogitGradient<Real> dz(dist.size());
  for (VocabId k = 0; k < dist.size(); ++k) dz[k] = pt * ((k == target ? Real(1) : Real(0)) - dist[k]);
  return dz;
}

/// grad_z of the policy mass on `anchor_set`, P_safe = sum_{j in set} pi(j):
///   in-set      pi(k) * (1 - P_safe)
///   out-of-set  -pi(k) * P_safe
template <std::floating_point Real>
LogitGradient<Real> grad_support_mass(const BasicDist<Real>& dist, const AnchorSet& anchor_set) {
  if (anchor_set.empty()) fail(ErrorKind::domain, "empty anchor set");
  Real p_safe = 0;
  for (VocabId j : anchor_set) {
    detail::check_target(dist, j);
    p_safe += dist[j];
  }
  LogitGradient<Real> dz(dist.size());
  for (VocabId k = 0; k < dist.size(); ++k)
    dz[k] = anchor_set.contains(k) ? dist[k] * (Real(1) - p_safe) : -dist[k] * p_safe;
  return dz;
}

/// Central differences (loss(z + h e_k) - loss(z - h e_k)) / 2h for every k.
template <std::floating_point Real, typename Loss>
  requires std::invocable<Loss, std::span<const Real>>
std::vector<Real> finite_diff(Loss&& loss, std::span<const Real> logits, Real h) {
  if (!(h > 0)) fail(ErrorKind::invalid_input, "finite difference step must be positive");
  std::vector<Real> z(logits.begin(), logits.end());
  std::vector<Real> out(z.size());
  for (std::size_t k = 0; k < z.size(); ++k) {
    const Real saved = z[k];
    z[k] = saved + h;
    const Real up = static_cast<Real>(loss(std::span<const Real>(z)));
    z[k] = saved - h;
    const Real down = static_cast<Real>(loss(std::span<const Real>(z)));
    z[k] = saved;
    if (!std::isfinite(up) || !std::isfinite(down))
      fail(ErrorKind::oracle_failure, "loss is not finite near the evaluation point");
    out[k] = (up - down) / (2 * h);
  }
  return out;
}

/// Largest |a - b| / max(|a|, |b|) over entries where max(|a|, |b|) > floor.
/// Entries below the floor must agree to within `floor` absolutely, otherwise
/// they count as relative error 1.
template <std::floating_point A, std::floating_point B>
double max_relative_error(std::span<const A> analytic, std::span<const B> numeric, double floor = 1e-8) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = static_cast<double>(analytic[i]);
    const double n = static_cast<double>(numeric[i]);
    const double scale = std::max(std::abs(a), std::abs(n));
    const double diff = std::abs(a - n);
    if (scale > floor)
      worst = std::max(worst, diff / scale);
    else if (diff > floor)
      worst = std::max(worst, 1.0);
  }
  return worst;
}

}  // namespace anchorlab
