#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <span>
#include <vector>

#include <json.hpp>

#include "anchorlab/env.hpp"
#include "anchorlab/error.hpp"
#include "anchorlab/metrics.hpp"
#include "anchorlab/objectives.hpp"
#include "anchorlab/policy.hpp"
#include "anchorlab/rng.hpp"

namespace anchorlab {

struct TrainConfig {
  MethodConfig method_config;
  EnvConfig env;
  std::vector<EnvConfig> extra_envs;  // further trees trained in the same batch
  std::size_t total_steps = 300;
  std::size_t groups_per_step = 4;    // rollout groups of N per tree per step
  std::size_t inner_epochs = 2;
  std::size_t eval_every = 50;
  EvalConfig eval;
  std::uint64_t seed = 0;

  void validate() const {
    method_config.validate();
    env.validate();
    for (const auto& e : extra_envs) e.validate();
    if (groups_per_step < 1) fail(ErrorKind::invalid_config, "groups_per_step must be >= 1");
    if (inner_epochs < 1) fail(ErrorKind::invalid_config, "inner_epochs must be >= 1");
    if (eval_every < 1) fail(ErrorKind::invalid_config, "eval_every must be >= 1");
    if (eval.samples_K < 1 || eval.prompts < 1) fail(ErrorKind::invalid_config, "evaluation needs K >= 1 and prompts >= 1");
    if (eval.support_k < 1) fail(ErrorKind::invalid_config, "support_k must be >= 1");
  }

  bool operator==(const TrainConfig&) const = default;
};

/// N rollouts from the root of one tree with their group-relative advantages.
struct TrajectoryGroup {
  std::size_t tree = 0;  // index into the trainer's tree list
  std::vector<Trajectory> trajectories;
  std::vector<double> advantages;
};

struct StepStats {
  std::int64_t step = 0;
  double mean_reward = 0.0;
  double frac_clipped = 0.0;         // over tokens with non-zero advantage, all epochs
  std::size_t degenerate_anchors = 0;
  double wallclock_ms = 0.0;
  std::size_t tokens = 0;            // token-mean denominator
};

/// Draws cfg.groups_per_step groups of N rollouts per tree from `old_policies`.
inline std::vector<TrajectoryGroup> sample_groups(std::span<const ReasoningTree> trees,
                                                  std::span<const PolicySnapshot> old_policies,
                                                  const TrainConfig& cfg, Rng& rng) {
  std::vector<TrajectoryGroup> groups;
  for (std::size_t i = 0; i < trees.size(); ++i) {
    for (std::size_t g = 0; g < cfg.groups_per_step; ++g) {
      TrajectoryGroup group;
      group.tree = i;
      std::vector<double> rewards;
      for (std::size_t n = 0; n < cfg.method_config.group_size; ++n) {
        group.trajectories.push_back(rollout(trees[i], old_policies[i], rng));
        rewards.push_back(group.trajectories.back().reward);
      }
      group.advantages = group_advantages(rewards, cfg.method_config.adv_eps);
      groups.push_back(std::move(group));
    }
  }
  return groups;
}

/// Applies cfg.inner_epochs gradient-ascent passes over `groups`. Each pass
/// sums the per-token logit gradients, divides by the total number of tokens
/// in the batch (token-mean) and steps z <- z + eta * g. Groups whose
/// advantages are all zero are skipped.
inline StepStats apply_groups(std::span<LogitTable> policies, std::span<const ReasoningTree> trees,
                              std::span<const PolicySnapshot> old_policies, std::span<const TrajectoryGroup> groups,
                              const TrainConfig& cfg) {
  const auto& mc = cfg.method_config;
  StepStats stats;
  std::size_t rewarded = 0, trajectories = 0, active = 0, clipped = 0;
  for (const auto& g : groups) {
    for (const auto& t : g.trajectories) {
      rewarded += static_cast<std::size_t>(t.reward);
      stats.tokens += t.tokens.size();
    }
    trajectories += g.trajectories.size();
  }
  stats.mean_reward = trajectories ? static_cast<double>(rewarded) / static_cast<double>(trajectories) : 0.0;
  if (stats.tokens == 0) return stats;

  for (std::size_t epoch = 0; epoch < cfg.inner_epochs; ++epoch) {
    // keyed by (tree, context); ordered so the reduction order is fixed
    std::map<std::pair<std::size_t, ContextId>, std::vector<double>> grads;
    std::map<std::pair<std::size_t, ContextId>, Dist> current;
    for (const auto& g : groups) {
      if (std::all_of(g.advantages.begin(), g.advantages.end(), [](double a) { return a == 0.0; })) continue;
      const auto& tree = trees[g.tree];
      for (std::size_t i = 0; i < g.trajectories.size(); ++i) {
        const auto& traj = g.trajectories[i];
        const double adv = g.advantages[i];
        for (std::size_t t = 0; t < traj.tokens.size(); ++t) {
          const auto key = std::make_pair(g.tree, traj.contexts[t]);
          auto it = current.find(key);
          if (it == current.end()) it = current.emplace(key, policies[g.tree].dist(traj.contexts[t])).first;
          const auto old = old_policies[g.tree].dist(traj.contexts[t]);
          const auto ref = tree.ref_policy().dist(traj.contexts[t]);
          const auto u = method_token_update(it->second, old, ref, traj.tokens[t], adv, mc);
          if (adv != 0.0) {
            ++active;
            clipped += u.clipped ? 1 : 0;
          }
          stats.degenerate_anchors += u.degenerate_anchor ? 1 : 0;
          auto& acc = grads[key];
          if (acc.empty()) acc.assign(u.gradient.size(), 0.0);
          vec::axpy(acc, 1.0, std::span<const double>(u.gradient));
        }
      }
    }
    const double scale = mc.learning_rate / static_cast<double>(stats.tokens);
    for (const auto& [key, g] : grads) policies[key.first].add(key.second, g, scale);
  }
  stats.frac_clipped = active ? static_cast<double>(clipped) / static_cast<double>(active) : 0.0;
  return stats;
}

/// One on-policy step over several trees: freeze pi_old, sample, compute
/// advantages, run the inner epochs.
inline StepStats train_step(std::span<LogitTable> policies, std::span<const ReasoningTree> trees,
                            const TrainConfig& cfg, Rng& rng) {
  const auto start = std::chrono::steady_clock::now();
  std::vector<PolicySnapshot> old;
  old.reserve(policies.size());
  for (const auto& p : policies) old.push_back(snapshot(p));
  const auto groups = sample_groups(trees, old, cfg, rng);
  auto stats = apply_groups(policies, trees, old, groups, cfg);
  stats.wallclock_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return stats;
}

inline StepStats train_step(LogitTable& policy, const ReasoningTree& tree, const TrainConfig& cfg, Rng& rng) {
  return train_step(std::span<LogitTable>(&policy, 1), std::span<const ReasoningTree>(&tree, 1), cfg, rng);
}

/// Evaluates each tree with its own policy and pools the results: pass and
/// diversity metrics over prompts, per-context metrics over visited contexts.
inline MetricRecord evaluate_all(std::span<const ReasoningTree> trees, std::span<const LogitTable> policies,
                                 const EvalConfig& cfg, Rng& rng, std::int64_t step) {
  MetricRecord pooled;
  pooled.step = step;
  pooled.eval_K = cfg.samples_K;
  double context_weight = 0.0;
  for (std::size_t i = 0; i < trees.size(); ++i) {
    const auto rec = evaluate(trees[i], snapshot(policies[i]), cfg, rng, step);
    const double w = static_cast<double>(trees[i].depth());
    pooled.pass_at_1 += rec.pass_at_1;
    pooled.pass_at_K += rec.pass_at_K;
    pooled.diversity_score += rec.diversity_score;
    pooled.mean_entropy += w * rec.mean_entropy;
    pooled.mean_max_prob += w * rec.mean_max_prob;
    pooled.support_mass += w * rec.support_mass;
    pooled.kl_to_ref += w * rec.kl_to_ref;
    context_weight += w;
  }
  const double n = static_cast<double>(trees.size());
  pooled.pass_at_1 /= n;
  pooled.pass_at_K /= n;
  pooled.diversity_score /= n;
  pooled.mean_entropy /= context_weight;
  pooled.mean_max_prob /= context_weight;
  pooled.support_mass /= context_weight;
  pooled.kl_to_ref /= context_weight;
  return pooled;
}

using StepCallback = std::function<void(const StepStats&)>;

/// Full run: trees from the env configs, policies initialised to each tree's
/// reference, evaluation at step 0, every eval_every steps and at the end.
/// Training and evaluation draw from separate streams split off `seed`
/// (tags 1 and 2; each evaluation point further splits by its step).
inline std::vector<MetricRecord> run_experiment(const TrainConfig& cfg, const StepCallback& on_step = {}) {
  cfg.validate();
  std::vector<ReasoningTree> trees;
  trees.push_back(generate_tree(cfg.env));
  for (const auto& e : cfg.extra_envs) trees.push_back(generate_tree(e));
  std::vector<LogitTable> policies;
  for (const auto& t : trees) policies.push_back(t.ref_policy());

  const Rng root(cfg.seed);
  Rng train_rng = root.split(1);
  const Rng eval_root = root.split(2);
  const auto eval_at = [&](std::size_t step) {
    Rng eval_rng = eval_root.split(step);
    return evaluate_all(trees, policies, cfg.eval, eval_rng, static_cast<std::int64_t>(step));
  };

  std::vector<MetricRecord> records;
  records.push_back(eval_at(0));
  for (std::size_t step = 1; step <= cfg.total_steps; ++step) {
    auto stats = train_step(policies, trees, cfg, train_rng);
    stats.step = static_cast<std::int64_t>(step);
    if (on_step) on_step(stats);
    if (step % cfg.eval_every == 0 || step == cfg.total_steps) records.push_back(eval_at(step));
  }
  return records;
}

/// One JSON object per line: step, mean_reward, frac_clipped, degenerate_anchors, wallclock_ms.
inline void write_step_jsonl(std::ostream& os, const StepStats& s, bool with_wallclock = true) {
  nlohmann::ordered_json j;
  j["step"] = s.step;
  j["mean_reward"] = s.mean_reward;
  j["frac_clipped"] = s.frac_clipped;
  j["degenerate_anchors"] = s.degenerate_anchors;
  j["wallclock_ms"] = with_wallclock ? s.wallclock_ms : 0.0;
  os << j.dump() << '\n';
}

}  // namespace anchorlab
