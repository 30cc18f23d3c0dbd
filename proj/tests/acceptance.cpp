// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria (0 when everything passes).

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "anchorlab/anchorlab.hpp"

using namespace anchorlab;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(double x, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << x;
  return os.str();
}

Dist random_dist(Rng& rng, std::size_t v, double scale = 1.5) {
  std::vector<double> z(v);
  for (double& x : z) x = scale * rng.normal();
  return softmax(z);
}

Dist perturb(Rng& rng, const Dist& d, double scale) {
  std::vector<double> z(d.size());
  for (std::size_t k = 0; k < d.size(); ++k) z[k] = std::log(d[k]) + scale * rng.normal();
  return softmax(z);
}

constexpr std::array<std::size_t, 4> kVocabSizes = {2, 4, 8, 32};

// 1. Finite-difference oracle over every kernel and method surrogate.
Outcome gradient_oracle() {
  const auto start = Clock::now();
  GradcheckOptions opt;  // 1000 cases, h = 1e-5, V in {2, 4, 8, 32}
  const auto checks = run_gradcheck(opt);
  const double elapsed = seconds_since(start);
  bool ok = elapsed < 10.0;
  double worst = 0;
  std::string worst_kernel;
  for (const auto& c : checks) {
    ok = ok && c.cases >= 1000 && c.max_rel_error < 1e-6;
    if (c.max_rel_error >= worst) {
      worst = c.max_rel_error;
      worst_kernel = c.kernel;
    }
  }
  return {ok, std::to_string(checks.size()) + " kernels, worst " + worst_kernel + " " + fmt(worst, 3) + ", " +
                  fmt(elapsed, 3) + " s"};
}

// 2. Pull gradient = C * grad J_support with C = -beta A / Z_ref.
Outcome gradient_alignment() {
  Rng rng(2002);
  double max_dev = 0, max_cos_dev = 0;
  int cases = 0;
  for (int attempt = 0; cases < 500 && attempt < 100000; ++attempt) {
    const std::size_t v = kVocabSizes[rng.below(kVocabSizes.size())];
    const Dist ref = random_dist(rng, v), pol = random_dist(rng, v), old = perturb(rng, pol, 0.05);
    MethodConfig cfg;
    cfg.anchor_k = 1 + rng.below(v);
    const VocabId t = rng.below(v);
    const double adv = -(0.05 + 2.0 * rng.uniform());
    const auto u = apo_token_update(pol, old, ref, t, adv, cfg);
    if (u.clipped || u.degenerate_anchor) continue;
    const auto anchor = build_anchor(ref, pol, t, cfg.anchor_k);
    const auto parts = apo_gradient_parts(pol, old, &anchor, t, adv, cfg);
    const auto support = grad_support_mass(pol, anchor.anchor_set);
    const double c = -cfg.pull_coef * adv / anchor.z_ref_mass;
    for (std::size_t k = 0; k < v; ++k) max_dev = std::max(max_dev, std::abs(parts.pull[k] - c * support[k]));
    const double cos = vec::cosine(std::span<const double>(parts.pull), std::span<const double>(support));
    if (std::isfinite(cos)) max_cos_dev = std::max(max_cos_dev, std::abs(cos - 1.0));
    else max_cos_dev = 1.0;
    ++cases;
  }
  const bool ok = cases == 500 && max_dev < 1e-10 && max_cos_dev <= 1e-12;
  return {ok, std::to_string(cases) + " cases, max |dev| " + fmt(max_dev, 3) + ", max |cos-1| " + fmt(max_cos_dev, 3)};
}

// 3. Squeezing, support-mass, passive-suppression and vanishing-recovery closed forms.
Outcome closed_forms() {
  Rng rng(3003);
  double squeeze = 0, support = 0, linear = 0;
  bool sign = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t v = 2 + rng.below(31);
    std::vector<double> z(v);
    for (double& x : z) x = 2 * rng.normal();
    const Dist d = softmax(z);
    const VocabId err = rng.below(v);

    const auto g = grad_prob(d, err);
    for (VocabId k = 0; k < v; ++k)
      if (k != err) squeeze = std::max(squeeze, std::abs(g[k] - (-d[err] * d[k])));

    AnchorSet set{rng.below(v)};
    for (VocabId k = 0; k < v; ++k)
      if (rng.uniform() < 0.4) set.insert(k);
    double p_safe = 0;
    for (VocabId j : set) p_safe += d[j];
    const auto s = grad_support_mass(d, set);
    for (VocabId k : set) support = std::max(support, std::abs(s[k] - d[k] * (1 - p_safe)));

    VocabId valid = rng.below(v - 1);
    if (valid >= err) ++valid;
    const double adv = 0.01 + 2 * rng.uniform(), eta = 0.01 + rng.uniform();
    sign = sign && dynamics::passive_suppression_step(z, err, valid, adv, eta) < 0;

    std::vector<double> pis(6);
    for (double& p : pis) p = 0.999 * std::pow(10.0, -10 * rng.uniform());
    const double c = 0.1 + 2 * rng.uniform();
    const auto sweep = dynamics::vanishing_recovery_sweep(pis, c, eta);
    std::size_t i = 0;
    for (const auto& rec : sweep.series)
      if (rec.quantity == "delta_z_valid") linear = std::max(linear, std::abs(rec.value / pis[i++] - eta * c));
  }
  const bool ok = squeeze <= 1e-12 && support <= 1e-12 && sign && linear <= 1e-12;
  return {ok, "squeeze " + fmt(squeeze, 3) + ", support " + fmt(support, 3) + ", passive sign " +
                  (sign ? "ok" : "violated") + ", linearity " + fmt(linear, 3)};
}

// 4. Zero APO gradient outside the trust region on both sides; grpo_kl still moves.
Outcome clip_boundary() {
  Rng rng(4004);
  int low = 0, high = 0;
  bool zero = true, kl_moves = true;
  for (int attempt = 0; (low < 250 || high < 250) && attempt < 200000; ++attempt) {
    const std::size_t v = kVocabSizes[rng.below(kVocabSizes.size())];
    const Dist ref = random_dist(rng, v);
    const Dist pol = perturb(rng, ref, 0.3 + rng.uniform());
    const VocabId t = rng.below(v);
    // pi_old chosen so that r = pi(t) / pi_old(t) lands well inside or outside the window
    const bool want_high = high < low || (high == low && rng.uniform() < 0.5);
    const double target_ratio = want_high ? 1.4 + rng.uniform() : 0.1 + 0.6 * rng.uniform();
    std::vector<double> z(v);
    for (VocabId k = 0; k < v; ++k) z[k] = std::log(pol[k]);
    const double want_old = pol[t] / target_ratio;
    if (!(want_old < 1.0)) continue;
    // set the old logit of t so that old(t) = want_old, keeping the rest proportional
    const double rest = 1.0 - pol[t];
    z[t] = std::log(want_old * rest / (1.0 - want_old));
    const Dist old = softmax(z);
    MethodConfig cfg;
    cfg.anchor_k = 1 + rng.below(v);
    const auto u = apo_token_update(pol, old, ref, t, -1.0, cfg);
    const bool below = u.ratio < 1 - cfg.clip_eps, above = u.ratio > 1 + cfg.clip_eps;
    if (!below && !above) continue;
    (below ? low : high)++;
    zero = zero && u.clipped && vec::all_zero(std::span<const double>(u.gradient));
    MethodConfig kl = cfg;
    kl.method = Method::grpo_kl;
    const auto k = method_token_update(pol, old, ref, t, -1.0, kl);
    if (!(pol == ref)) kl_moves = kl_moves && vec::norm(std::span<const double>(k.gradient)) > 0;
  }
  const bool ok = low >= 250 && high >= 250 && zero && kl_moves;
  return {ok, std::to_string(low) + " below / " + std::to_string(high) + " above window, APO gradient " +
                  (zero ? "exactly zero" : "NONZERO") + ", grpo_kl norm " + (kl_moves ? "> 0" : "ZERO somewhere")};
}

// 5. Inclusive anchor pushes the error logit up; exclusive anchor never does.
Outcome signal_cancellation() {
  Rng rng(5005);
  int cases = 0;
  bool naive_positive = true, exclusive_nonpositive = true;
  for (int attempt = 0; cases < 500 && attempt < 100000; ++attempt) {
    const std::size_t v = kVocabSizes[rng.below(kVocabSizes.size())];
    const Dist ref = random_dist(rng, v), pol = random_dist(rng, v);
    const std::size_t k = 1 + rng.below(v - 1);  // K < V so the inclusive set is not the whole vocabulary
    const auto members = top_k(ref, k).members;
    const VocabId err = members[rng.below(members.size())];
    if (!(pol[err] > 0)) continue;
    BasicAnchorContext<double> naive;
    naive.anchor_set = AnchorSet(members.begin(), members.end());
    for (VocabId j : naive.anchor_set) naive.z_ref_mass += ref[j];
    naive_positive = naive_positive && grad_anchor_ratio(pol, naive)[err] > 0;
    if (const auto exclusive = try_build_anchor(ref, pol, err, k))
      exclusive_nonpositive = exclusive_nonpositive && grad_anchor_ratio(pol, *exclusive)[err] <= 0;
    ++cases;
  }
  return {cases == 500 && naive_positive && exclusive_nonpositive,
          std::to_string(cases) + " cases, inclusive " + (naive_positive ? "> 0" : "NOT > 0") + ", exclusive " +
              (exclusive_nonpositive ? "<= 0" : "POSITIVE")};
}

// 6. Teacher-forced Top-K recall: monotone, exact against a sort oracle, 1 at K = V.
Outcome coverage() {
  bool monotone = true, exact = true, full = true;
  int trees = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    EnvConfig env;
    env.depth = 3 + seed % 3;
    env.branching = 4 + 2 * (seed % 3);
    env.num_valid_leaves = 4 + seed;
    env.ref_noise = 0.5 + 0.1 * static_cast<double>(seed);
    env.seed = seed;
    const auto tree = generate_tree(env);
    std::vector<std::size_t> ks(tree.vocab_size());
    std::iota(ks.begin(), ks.end(), std::size_t{1});
    const auto rows = oracle_coverage(tree, tree.ref_policy(), ks);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (i > 0) monotone = monotone && rows[i].recall >= rows[i - 1].recall;
      std::size_t hits = 0, total = 0;
      for (const auto& leaf : tree.valid_leaves())
        for (std::size_t t = 0; t < leaf.size(); ++t) {
          const auto d = tree.ref_policy().dist(tree.context_of(std::span(leaf).first(t)));
          std::vector<VocabId> order(d.size());
          std::iota(order.begin(), order.end(), VocabId{0});
          std::stable_sort(order.begin(), order.end(), [&](VocabId a, VocabId b) { return d[a] > d[b]; });
          hits += std::find(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(rows[i].k), leaf[t]) !=
                          order.begin() + static_cast<std::ptrdiff_t>(rows[i].k)
                      ? 1
                      : 0;
          ++total;
        }
      exact = exact && rows[i].hits == hits && rows[i].total == total &&
              rows[i].recall == static_cast<double>(hits) / static_cast<double>(total);
    }
    full = full && rows.back().recall == 1.0;
    ++trees;
  }
  return {monotone && exact && full, std::to_string(trees) + " trees, monotone " + (monotone ? "yes" : "NO") +
                                         ", oracle match " + (exact ? "exact" : "MISMATCH") + ", K=V recall " +
                                         (full ? "1.0" : "< 1")};
}

struct MethodStats {
  double entropy0 = 0, entropy = 0, support = 0, pass_k = 0, pass1_0 = 0, pass1 = 0;
};

// 7. Collapse-vs-recovery benchmark on the standard tree.
Outcome collapse_benchmark() {
  const auto start = Clock::now();
  const std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  const auto run_method = [&](Method m) {
    MethodStats s;
    for (auto seed : seeds) {
      TrainConfig cfg;  // defaults: N=8, eps=0.2, lambda=1.05, beta=0.1, K=8, kl=0.01, eta=0.5
      cfg.method_config.method = m;
      cfg.env.depth = 4;
      cfg.env.branching = 8;
      cfg.env.num_valid_leaves = 8;
      cfg.env.ref_concentration = 1.5;
      cfg.env.seed = 0;
      cfg.total_steps = 300;
      cfg.eval.samples_K = 64;
      cfg.eval.support_k = cfg.method_config.anchor_k;
      cfg.seed = seed;
      const auto records = run_experiment(cfg);
      s.entropy0 += records.front().mean_entropy;
      s.pass1_0 += records.front().pass_at_1;
      s.entropy += records.back().mean_entropy;
      s.support += records.back().support_mass;
      s.pass_k += records.back().pass_at_K;
      s.pass1 += records.back().pass_at_1;
    }
    const double n = static_cast<double>(seeds.size());
    for (double* x : {&s.entropy0, &s.entropy, &s.support, &s.pass_k, &s.pass1_0, &s.pass1}) *x /= n;
    return s;
  };
  const auto grpo = run_method(Method::grpo);
  const auto apo = run_method(Method::apo);
  const double elapsed = seconds_since(start);

  const bool a = grpo.entropy < grpo.entropy0;
  const bool b = apo.entropy > grpo.entropy;
  const bool c = apo.support > grpo.support;
  const bool d = apo.pass_k >= grpo.pass_k;
  const bool e = grpo.pass1 > grpo.pass1_0 && apo.pass1 > apo.pass1_0;
  const bool t = elapsed < 300.0;
  std::ostringstream detail;
  detail << "(a) " << (a ? "ok" : "FAIL") << " grpo entropy " << fmt(grpo.entropy0) << "->" << fmt(grpo.entropy)
         << "; (b) " << (b ? "ok" : "FAIL") << " apo " << fmt(apo.entropy, 6) << " vs grpo " << fmt(grpo.entropy, 6)
         << "; (c) " << (c ? "ok" : "FAIL") << " support apo " << fmt(apo.support, 17) << " vs grpo "
         << fmt(grpo.support, 17) << "; (d) " << (d ? "ok" : "FAIL") << " passK apo " << fmt(apo.pass_k)
         << " vs grpo " << fmt(grpo.pass_k) << "; (e) " << (e ? "ok" : "FAIL") << " pass1 grpo " << fmt(grpo.pass1_0)
         << "->" << fmt(grpo.pass1) << ", apo " << fmt(apo.pass1_0) << "->" << fmt(apo.pass1) << "; "
         << fmt(elapsed, 3) << " s";
  return {a && b && c && d && e && t, detail.str()};
}

// 8. Same spec and seed: byte-identical metrics.csv.
Outcome determinism() {
  const auto root = fs::temp_directory_path() / ("anchorlab_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  ExperimentSpec spec;
  spec.name = "determinism";
  spec.seeds = {7};
  spec.train.total_steps = 60;
  spec.train.eval_every = 20;
  for (Method m : kAllMethods) {
    NamedMethod nm{std::string(to_string(m)), {}};
    nm.config.method = m;
    spec.methods.push_back(nm);
  }
  bool identical = true;
  int files = 0;
  for (int pass = 0; pass < 2; ++pass) {
    RunOptions opt;
    opt.output_dir = root / std::to_string(pass);
    opt.timestamp = false;
    run_spec(spec, opt);
  }
  for (const auto& m : spec.methods) {
    const auto rel = fs::path("determinism") / m.name / "7" / "metrics.csv";
    identical = identical && read_file(root / "0" / rel) == read_file(root / "1" / rel);
    ++files;
  }
  fs::remove_all(root);
  return {identical, std::to_string(files) + " metrics.csv pairs " + (identical ? "byte-identical" : "DIFFER")};
}

// 9. K = 1 with the error token at Top-1: push-only fallback, counted, never fatal.
Outcome degenerate_anchor() {
  const Dist ref = Dist::from_probs({0.5, 0.3, 0.1, 0.1});
  MethodConfig cfg;
  cfg.anchor_k = 1;
  const auto u = apo_token_update(ref, ref, ref, 0, -1.0, cfg);
  const auto push = grad_prob(ref, 0);
  bool push_only = u.degenerate_anchor && !u.clipped;
  for (std::size_t k = 0; k < 4; ++k) push_only = push_only && std::abs(u.gradient[k] + 1.05 * push[k] / 0.5) < 1e-15;

  TrainConfig train;
  train.method_config.anchor_k = 1;
  train.total_steps = 100;
  train.eval_every = 50;
  train.seed = 3;
  std::size_t events = 0, steps = 0;
  bool completed = false;
  try {
    const auto records = run_experiment(train, [&](const StepStats& s) {
      events += s.degenerate_anchors;
      ++steps;
    });
    completed = records.back().step == 100;
  } catch (const std::exception&) {
    completed = false;
  }
  return {push_only && events > 0 && completed && steps == 100,
          std::string("token fallback ") + (push_only ? "push-only" : "WRONG") + ", " + std::to_string(events) +
              " events counted over " + std::to_string(steps) + " steps, run " + (completed ? "completed" : "ABORTED")};
}

// 10. Arithmetic spot checks.
Outcome arithmetic() {
  const MethodConfig cfg;
  const double r = apo_rectified_ratio(1.0, 1.0, cfg);
  const auto a = group_advantages(std::vector<double>{1, 0, 0, 0}, 1e-6);
  const double sd = std::sqrt(3.0) / 4.0;
  const std::vector<double> want = {0.75 / (sd + 1e-6), -0.25 / (sd + 1e-6), -0.25 / (sd + 1e-6),
                                    -0.25 / (sd + 1e-6)};
  double dev = 0;
  for (std::size_t i = 0; i < 4; ++i) dev = std::max(dev, std::abs(a[i] - want[i]));
  const bool ok = std::abs(r - 0.95) < 1e-12 && dev < 1e-6;
  return {ok, "r_apo " + fmt(r, 17) + ", advantages max |dev| " + fmt(dev, 3)};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient oracle", gradient_oracle},
      {"gradient alignment", gradient_alignment},
      {"closed-form identities", closed_forms},
      {"clip-boundary stability", clip_boundary},
      {"signal cancellation", signal_cancellation},
      {"oracle coverage", coverage},
      {"collapse vs recovery", collapse_benchmark},
      {"determinism", determinism},
      {"degenerate anchor", degenerate_anchor},
      {"arithmetic spot checks", arithmetic},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += o.passed ? 0 : 1;
    std::cout << "criterion " << i + 1 << ": " << (o.passed ? "PASS" : "FAIL") << "  " << criteria[i].first << "  ["
              << o.detail << "]" << std::endl;
  }
  std::cout << (criteria.size() - static_cast<std::size_t>(failed)) << "/" << criteria.size() << " criteria passed"
            << std::endl;
  return failed;
}
