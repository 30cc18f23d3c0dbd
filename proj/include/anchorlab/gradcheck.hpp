#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <optional>
#include <string>
#include <vector>

#include "anchorlab/anchor.hpp"
#include "anchorlab/gradients.hpp"
#include "anchorlab/objectives.hpp"
#include "anchorlab/policy.hpp"
#include "anchorlab/rng.hpp"

namespace anchorlab {

/// Finite-difference verification of every analytic logit gradient.
///
/// Analytic gradients are evaluated in double, exactly as the trainer uses
/// them. The central-difference oracle (h = 1e-5) evaluates the scalar losses
/// in long double so that round-off in the loss does not swamp small
/// gradient entries.
struct KernelCheck {
  std::string kernel;
  std::size_t cases = 0;
  double max_rel_error = 0.0;
};

struct GradcheckOptions {
  std::uint64_t seed = 20240601;
  std::size_t cases = 1000;
  double step = 1e-5;
  double floor = 1e-8;
  double logit_scale = 1.5;
  std::array<std::size_t, 4> vocab_sizes = {2, 4, 8, 32};
};

inline constexpr double kGradcheckTolerance = 1e-6;

namespace detail {

using Wide = long double;

inline std::vector<double> random_logits(Rng& rng, std::size_t v, double scale) {
  std::vector<double> z(v);
  for (double& x : z) x = scale * rng.normal();
  return z;
}

inline AnchorSet random_subset(Rng& rng, std::size_t v) {
  AnchorSet s;
  while (s.empty())
    for (VocabId k = 0; k < v; ++k)
      if (rng.uniform() < 0.5) s.insert(k);
  return s;
}

inline std::vector<Wide> widen(std::span<const double> x) { return {x.begin(), x.end()}; }

template <typename Loss>
std::vector<Wide> numeric_gradient(Loss&& loss, std::span<const double> logits, double h) {
  const auto wide = widen(logits);
  return finite_diff(std::forward<Loss>(loss), std::span<const Wide>(wide), static_cast<Wide>(h));
}

inline double compare(std::span<const double> analytic, std::span<const Wide> numeric, double floor) {
  return max_relative_error(analytic, numeric, floor);
}

}  // namespace detail

/// Runs every kernel over `cases` seeded random instances, cycling through
/// the vocabulary sizes.
inline std::vector<KernelCheck> run_gradcheck(const GradcheckOptions& opt = {}) {
  using detail::Wide;
  using WideSpan = std::span<const Wide>;
  std::vector<KernelCheck> checks;
  checks.reserve(5 + kAllMethods.size());
  const auto add_check = [&](const std::string& name) -> KernelCheck& {
    checks.push_back({name, 0, 0.0});
    return checks.back();
  };
  const auto record = [&](KernelCheck& c, double err) {
    ++c.cases;
    c.max_rel_error = std::max(c.max_rel_error, err);
  };

  Rng master(opt.seed);

  {
    Rng rng = master.split(1);
    auto& log_prob = add_check("grad_log_prob");
    auto& prob = add_check("grad_prob");
    auto& support = add_check("grad_support_mass");
    auto& anchor_ratio_check = add_check("grad_anchor_ratio");
    auto& kl = add_check("kl_penalty");
    for (std::size_t c = 0; c < opt.cases; ++c) {
      const std::size_t v = opt.vocab_sizes[c % opt.vocab_sizes.size()];
      const auto z = detail::random_logits(rng, v, opt.logit_scale);
      const Dist dist = softmax(std::span<const double>(z));
      const auto target = static_cast<VocabId>(rng.below(v));

      const auto g1 = grad_log_prob(dist, target);
      const auto n1 = detail::numeric_gradient([&](WideSpan w) { return log_softmax_at(w, target); }, z, opt.step);
      record(log_prob, detail::compare(g1, n1, opt.floor));

      const auto g2 = grad_prob(dist, target);
      const auto n2 = detail::numeric_gradient([&](WideSpan w) { return softmax(w)[target]; }, z, opt.step);
      record(prob, detail::compare(g2, n2, opt.floor));

      const auto set = detail::random_subset(rng, v);
      const auto g3 = grad_support_mass(dist, set);
      const auto n3 = detail::numeric_gradient(
          [&](WideSpan w) {
            const auto d = softmax(w);
            Wide s = 0;
            for (VocabId j : set) s += d[j];
            return s;
          },
          z, opt.step);
      record(support, detail::compare(g3, n3, opt.floor));

      const auto ref_z = detail::random_logits(rng, v, opt.logit_scale);
      const Dist ref = softmax(std::span<const double>(ref_z));
      // an empty anchor set only happens for K = 1 with the target at Top-1; K = 2 is then always non-empty
      std::optional<AnchorContext> anchor = try_build_anchor(ref, dist, target, 1 + rng.below(v));
      if (!anchor) anchor = try_build_anchor(ref, dist, target, 2);
      const auto g4 = grad_anchor_ratio(dist, *anchor);
      const Wide z_ref = anchor->z_ref_mass;
      const auto n4 = detail::numeric_gradient(
          [&](WideSpan w) { return anchorlab::anchor_ratio(softmax(w), anchor->anchor_set, z_ref); }, z, opt.step);
      record(anchor_ratio_check, detail::compare(g4, n4, opt.floor));

      const auto g5 = kl_penalty(dist, ref).gradient;
      const auto ref_wide = ref.cast<Wide>();
      const auto n5 = detail::numeric_gradient([&](WideSpan w) { return kl_penalty(softmax(w), ref_wide).value; }, z,
                                               opt.step);
      record(kl, detail::compare(g5, n5, opt.floor));
    }
  }

  // Method surrogates on their unclipped branch. pi_old is the distribution
  // at the evaluation point; pi_ref is an independent random distribution.
  for (Method m : kAllMethods) {
    Rng rng = master.split(100 + static_cast<std::uint64_t>(m));
    auto& check = add_check("surrogate_" + std::string(to_string(m)));
    MethodConfig cfg;
    cfg.method = m;
    std::size_t attempts = 0;
    for (std::size_t c = 0; c < opt.cases && attempts < 20 * opt.cases; ++attempts) {
      const std::size_t v = opt.vocab_sizes[c % opt.vocab_sizes.size()];
      const auto z = detail::random_logits(rng, v, opt.logit_scale);
      const Dist dist = softmax(std::span<const double>(z));
      // drift pi_old away from pi_theta a little so ratios differ from 1
      auto old_z = z;
      for (double& x : old_z) x += 0.05 * rng.normal();
      const Dist old = softmax(std::span<const double>(old_z));
      const Dist ref = softmax(std::span<const double>(detail::random_logits(rng, v, opt.logit_scale)));
      const auto token = static_cast<VocabId>(rng.below(v));
      const double adv = (rng.uniform() < 0.5 ? -1.0 : 1.0) * (0.1 + 2.0 * rng.uniform());
      cfg.anchor_k = 1 + rng.below(v);

      const auto u = method_token_update(dist, old, ref, token, adv, cfg);
      if (u.clipped) continue;
      const double eps = cfg.clip_eps;
      if (std::abs(u.ratio - (1.0 - eps)) < 1e-4 || std::abs(u.ratio - (1.0 + eps)) < 1e-4) continue;
      const auto old_wide = old.cast<Wide>();
      const auto ref_wide = ref.cast<Wide>();
      const auto n = detail::numeric_gradient(
          [&](WideSpan w) {
            return method_token_update(softmax(w), old_wide, ref_wide, token, static_cast<Wide>(adv), cfg)
                .surrogate_value;
          },
          z, opt.step);
      record(check, detail::compare(u.gradient, n, opt.floor));
      ++c;
    }
  }
  return checks;
}

}  // namespace anchorlab
