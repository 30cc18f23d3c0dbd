#pragma once

#include <algorithm>
#include <cassert>
#include <numeric>
#include <optional>
#include <vector>

#include "anchorlab/error.hpp"
#include "anchorlab/gradients.hpp"
#include "anchorlab/policy.hpp"

namespace anchorlab {

/// Top-K support of the reference distribution at one context.
struct SafeManifold {
  ContextId context{};
  std::vector<VocabId> members;  // rank order, most probable first
};

/// The k most probable tokens of `ref`. Equal probabilities are ranked by
/// ascending token index.
template <std::floating_point Real>
SafeManifold top_k(const BasicDist<Real>& ref, std::size_t k, ContextId context = {}) {
  if (k < 1) fail(ErrorKind::invalid_input, "top-k requires k >= 1");
  std::vector<VocabId> order(ref.size());
  std::iota(order.begin(), order.end(), VocabId{0});
  const std::size_t take = std::min(k, ref.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                    [&](VocabId a, VocabId b) { return ref[a] > ref[b] || (ref[a] == ref[b] && a < b); });
  order.resize(take);
  return SafeManifold{context, std::move(order)};
}

/// Sum of `dist` over the Top-K set of `ref`.
template <std::floating_point Real>
Real top_k_mass(const BasicDist<Real>& dist, const BasicDist<Real>& ref, std::size_t k) {
  Real mass = 0;
  for (VocabId j : top_k(ref, k).members) mass += dist[j];
  return mass;
}

/// Exclusive anchor for one negative-advantage token.
template <std::floating_point Real = double>
struct BasicAnchorContext {
  VocabId error_token = 0;
  AnchorSet anchor_set;
  Real z_ref_mass = 0;          // sum of pi_ref over the anchor set
  std::vector<Real> weights;    // pi_ref(k) / z_ref_mass, ascending token order
  Real anchor_ratio = 0;        // sum of pi_theta over the anchor set / z_ref_mass
};

using AnchorContext = BasicAnchorContext<double>;

/// Policy mass on `anchor_set` divided by `z_ref_mass`.
template <std::floating_point Real>
Real anchor_ratio(const BasicDist<Real>& policy, const AnchorSet& anchor_set, Real z_ref_mass) {
  Real mass = 0;
  for (VocabId k : anchor_set) mass += policy[k];
  return mass / z_ref_mass;
}

/// Builds S_anchor = TopK(ref) \ {error_token} together with Z_ref, the
/// importance weights and r_anchor. Returns nullopt when the set is empty
/// or carries no reference mass.
template <std::floating_point Real>
std::optional<BasicAnchorContext<Real>> try_build_anchor(const BasicDist<Real>& ref, const BasicDist<Real>& policy,
                                                         VocabId error_token, std::size_t k) {
  if (ref.size() != policy.size()) fail(ErrorKind::invalid_input, "reference and policy vocabularies differ");
  if (error_token >= ref.size()) fail(ErrorKind::invalid_input, "error token out of range");
  BasicAnchorContext<Real> anchor;
  anchor.error_token = error_token;
  for (VocabId j : top_k(ref, k).members)
    if (j != error_token) anchor.anchor_set.insert(j);
  for (VocabId j : anchor.anchor_set) anchor.z_ref_mass += ref[j];
  assert(!anchor.anchor_set.contains(error_token));
  if (anchor.anchor_set.empty() || !(anchor.z_ref_mass > 0)) return std::nullopt;
  for (VocabId j : anchor.anchor_set) anchor.weights.push_back(ref[j] / anchor.z_ref_mass);
  anchor.anchor_ratio = anchor_ratio(policy, anchor.anchor_set, anchor.z_ref_mass);
  return anchor;
}

/// As try_build_anchor, but a degenerate (empty) anchor set is an error.
template <std::floating_point Real>
BasicAnchorContext<Real> build_anchor(const BasicDist<Real>& ref, const BasicDist<Real>& policy,
                                      VocabId error_token, std::size_t k) {
  if (k < 1) fail(ErrorKind::invalid_input, "anchor size k must be >= 1");
  auto anchor = try_build_anchor(ref, policy, error_token, k);
  if (!anchor) fail(ErrorKind::degenerate_anchor, "anchor set is empty after excluding the error token");
  return *std::move(anchor);
}

/// grad_z r_anchor = (1 / Z_ref) * grad_support_mass(policy, S_anchor).
template <std::floating_point Real>
LogitGradient<Real> grad_anchor_ratio(const BasicDist<Real>& policy, const BasicAnchorContext<Real>& anchor) {
  auto dz = grad_support_mass(policy, anchor.anchor_set);
  for (Real& x : dz) x /= anchor.z_ref_mass;
  return dz;
}

}  // namespace anchorlab
