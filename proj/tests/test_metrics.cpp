#include <algorithm>
#include <cmath>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "anchorlab/metrics.hpp"
#include "oracles.hpp"

using namespace anchorlab;

TEST(PassMetrics, Examples) {
  auto p = pass_metrics({{1, 0, 0, 0}});
  EXPECT_DOUBLE_EQ(p.pass_at_1, 0.25);
  EXPECT_DOUBLE_EQ(p.pass_at_K, 1.0);
  p = pass_metrics({{0, 0, 0}, {0, 0, 0}});
  EXPECT_EQ(p.pass_at_1, 0.0);
  EXPECT_EQ(p.pass_at_K, 0.0);
  p = pass_metrics({{1, 1}, {0, 0}});
  EXPECT_DOUBLE_EQ(p.pass_at_1, 0.5);
  EXPECT_DOUBLE_EQ(p.pass_at_K, 0.5);
  EXPECT_THROW(pass_metrics({}), Error);
  EXPECT_THROW(pass_metrics({{}}), Error);
}

TEST(PassMetrics, PassKDominatesAndGrowsWithPrefix) {
  Rng rng(61);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t prompts = 1 + rng.below(6), k = 1 + rng.below(30);
    std::vector<std::vector<int>> r(prompts);
    for (auto& row : r)
      for (std::size_t i = 0; i < k; ++i) row.push_back(rng.uniform() < 0.2 ? 1 : 0);
    double prev = 0;
    for (std::size_t n = 1; n <= k; ++n) {
      std::vector<std::vector<int>> prefix;
      for (const auto& row : r) prefix.emplace_back(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(n));
      const auto p = pass_metrics(prefix);
      ASSERT_GE(p.pass_at_K, p.pass_at_1);
      ASSERT_GE(p.pass_at_K, prev);
      prev = p.pass_at_K;
    }
  }
}

TEST(Entropy, UniformOneHotAndMixture) {
  LogitTable t(8);
  t.set(ContextId{0}, std::vector<double>(8, 0.0));
  std::vector<double> hot(8, kLogitFloor);
  hot[3] = 0.0;
  t.set(ContextId{1}, hot);
  Trajectory a, b, mix;
  a.contexts = {ContextId{0}};
  b.contexts = {ContextId{1}};
  mix.contexts = {ContextId{0}, ContextId{1}};

  auto s = entropy_and_maxprob(t, std::span<const Trajectory>(&a, 1));
  EXPECT_NEAR(s.mean_entropy, std::log(8.0), 1e-15);
  EXPECT_NEAR(s.mean_entropy, 2.0794, 1e-4);
  EXPECT_DOUBLE_EQ(s.mean_max_prob, 0.125);
  s = entropy_and_maxprob(t, std::span<const Trajectory>(&b, 1));
  // the floor leaves exp(-700) ~ 1e-304 on each suppressed token
  EXPECT_NEAR(s.mean_entropy, 0.0, 1e-290);
  EXPECT_EQ(s.mean_max_prob, 1.0);
  s = entropy_and_maxprob(t, std::span<const Trajectory>(&mix, 1));
  EXPECT_NEAR(s.mean_entropy, std::log(8.0) / 2, 1e-15);
  EXPECT_DOUBLE_EQ(s.mean_max_prob, (1.0 + 0.125) / 2);
}

TEST(Diversity, IdenticalAndDisjoint) {
  const std::vector<TokenSequence> same(5, TokenSequence{1, 2, 3, 4});
  EXPECT_NEAR(diversity_score(same), 0.0, 1e-15);
  const std::vector<TokenSequence> disjoint = {{0, 1, 2, 3}, {4, 5, 6, 7}, {8, 9, 10, 11}};
  EXPECT_EQ(diversity_score(disjoint), 1.0);
  EXPECT_THROW(diversity_score(std::vector<TokenSequence>{{1, 2}}), Error);
  try {
    diversity_score(std::vector<TokenSequence>{});
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::undefined_metric);
  }
}

TEST(Diversity, HandWorkedExample) {
  // "a b c d", "a b c d", "e f g h": the two copies score BLEU 1, the odd one 0
  const std::vector<TokenSequence> s = {{0, 1, 2, 3}, {0, 1, 2, 3}, {4, 5, 6, 7}};
  EXPECT_NEAR(diversity_score(s), 1.0 - 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(diversity_score(s), oracle::self_bleu_diversity(s, 4), 1e-15);
}

TEST(Diversity, MatchesBruteForceOracle) {
  Rng rng(62);
  for (int trial = 0; trial < 400; ++trial) {
    const std::size_t k = 2 + rng.below(8);
    const std::size_t alphabet = 2 + rng.below(4);
    std::vector<TokenSequence> s(k);
    for (auto& seq : s) {
      seq.resize(1 + rng.below(7));
      for (auto& t : seq) t = rng.below(alphabet);
    }
    const std::size_t n_max = 1 + rng.below(4);
    ASSERT_NEAR(diversity_score(s, n_max), std::clamp(oracle::self_bleu_diversity(s, n_max), 0.0, 1.0), 1e-12);
  }
}

TEST(Diversity, InvariantUnderReordering) {
  Rng rng(63);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<TokenSequence> s(6);
    for (auto& seq : s) {
      seq.resize(4);
      for (auto& t : seq) t = rng.below(3);
    }
    const double d = diversity_score(s);
    ASSERT_GE(d, 0.0);
    ASSERT_LE(d, 1.0);
    std::reverse(s.begin(), s.end());
    std::rotate(s.begin(), s.begin() + 2, s.end());
    ASSERT_NEAR(diversity_score(s), d, 1e-12);
  }
}

TEST(SentenceBleu, BrevityPenalty) {
  const std::vector<TokenSequence> refs = {{1, 2, 3, 4, 5, 6}};
  const TokenSequence hyp = {1, 2, 3};
  EXPECT_NEAR(sentence_bleu(hyp, refs, 4), std::exp(1.0 - 6.0 / 3.0), 1e-15);
  const std::vector<TokenSequence> two = {{1, 2}, {1, 2, 3, 4}};
  // closest lengths 2 and 4 tie at distance 1 from 3; the shorter wins, so no penalty
  EXPECT_NEAR(sentence_bleu(hyp, two, 1), 1.0, 1e-15);
}

TEST(SupportMass, Examples) {
  LogitTable uniform(8), ref(8), hot(8);
  std::vector<double> zr = {3, 2.5, 2, 1.5, 1, 0.5, 0, -0.5};
  std::vector<double> zh(8, kLogitFloor);
  zh[1] = 0.0;
  uniform.set(ContextId{0}, std::vector<double>(8, 0.0));
  ref.set(ContextId{0}, zr);
  hot.set(ContextId{0}, zh);
  const std::vector<ContextId> ctx = {ContextId{0}};
  for (std::size_t k = 1; k <= 8; ++k) EXPECT_NEAR(support_mass(uniform, uniform, k, ctx), k / 8.0, 1e-15);
  EXPECT_NEAR(support_mass(ref, ref, 8, ctx), 1.0, 1e-15);
  EXPECT_EQ(support_mass(hot, ref, 2, ctx), 1.0);
  EXPECT_NEAR(support_mass(hot, ref, 1, ctx), 0.0, 1e-290);
}

TEST(SupportMass, EqualsAnchorSupportObjective) {
  Rng rng(64);
  for (int trial = 0; trial < 200; ++trial) {
    LogitTable pol(6), ref(6);
    std::vector<double> a(6), b(6);
    for (auto& x : a) x = rng.normal();
    for (auto& x : b) x = rng.normal();
    pol.set(ContextId{0}, a);
    ref.set(ContextId{0}, b);
    const std::size_t k = 1 + rng.below(6);
    const std::vector<ContextId> ctx = {ContextId{0}};
    double want = 0;
    for (VocabId j : top_k(ref.dist(ContextId{0}), k).members) want += pol.dist(ContextId{0})[j];
    ASSERT_EQ(support_mass(pol, ref, k, ctx), want);
  }
}

TEST(KlToRef, ZeroIffEqual) {
  LogitTable a(3), b(3);
  a.set(ContextId{0}, {0.1, 0.2, 0.3});
  b.set(ContextId{0}, {1.1, 1.2, 1.3});
  const std::vector<ContextId> ctx = {ContextId{0}};
  EXPECT_NEAR(kl_to_ref(a, b, ctx), 0.0, 1e-9);
  b.set(ContextId{0}, {0.1, 0.2, 0.4});
  EXPECT_GT(kl_to_ref(a, b, ctx), 1e-9);
}

TEST(Evaluate, FieldsWithinRangesOnGeneratedTree) {
  EnvConfig env;
  env.seed = 5;
  const auto tree = generate_tree(env);
  Rng rng(1);
  const auto rec = evaluate(tree, snapshot(tree.ref_policy()), EvalConfig{}, rng, 0);
  EXPECT_GE(rec.pass_at_K, rec.pass_at_1);
  EXPECT_GE(rec.diversity_score, 0.0);
  EXPECT_LE(rec.diversity_score, 1.0);
  EXPECT_NEAR(rec.kl_to_ref, 0.0, 1e-12);
  EXPECT_NEAR(rec.support_mass, 1.0, 1e-12);  // K = V = 8
  EXPECT_EQ(rec.eval_K, 64u);
  EXPECT_NEAR(rec.pass_at_1, exact_expected_reward(tree, tree.ref_policy()), 0.06);
}

TEST(MetricsCsv, RoundTripAndTimestamp) {
  std::vector<MetricRecord> recs(3);
  Rng rng(65);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    recs[i].step = static_cast<std::int64_t>(50 * i);
    recs[i].pass_at_1 = rng.uniform();
    recs[i].pass_at_K = 1.0;
    recs[i].mean_entropy = 2 * rng.uniform();
    recs[i].mean_max_prob = rng.uniform();
    recs[i].diversity_score = rng.uniform();
    recs[i].support_mass = rng.uniform();
    recs[i].kl_to_ref = rng.uniform() / 3;
    recs[i].eval_K = 64;
  }
  std::ostringstream plain, stamped;
  write_metrics_csv(plain, recs);
  write_metrics_csv(stamped, recs, "2024-01-01T00:00:00Z");
  EXPECT_EQ(plain.str().substr(0, plain.str().find('\n')), kMetricsCsvHeader);
  EXPECT_EQ(stamped.str(), "# generated 2024-01-01T00:00:00Z\n" + plain.str());
  std::istringstream in(stamped.str());
  EXPECT_EQ(read_metrics_csv(in), recs);
  std::istringstream bad("step,pass1\n");
  EXPECT_THROW(read_metrics_csv(bad), Error);
}
