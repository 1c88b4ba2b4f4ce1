#include <gtest/gtest.h>

#include <set>

#include "test_util.hpp"

using namespace rrtest;

namespace {

SamplerConfig sampler(double temperature, int top_k, int group, int budget) {
  SamplerConfig sc;
  sc.temperature = temperature;
  sc.top_k = top_k;
  sc.group_size = group;
  sc.reasoning_budget = budget;
  return sc;
}

const TokenSequence& prompt() {
  static const TokenSequence p = tokenize("<bos>Below is my history:\n1d 2.0h ago: [calm jazz 01] (4)\n");
  return p;
}

}  // namespace

TEST(RestrictedDistribution, TopKRenormalizedWithTieBreak) {
  RowVec<double> logits(6);
  logits << 1.0, 3.0, 3.0, -1.0, 2.0, 0.5;
  const auto d = restricted_distribution<double>(logits, 2.0, 3);
  EXPECT_EQ(d.ids, (std::vector<TokenId>{1, 2, 4}));
  const double z = std::exp(1.5) + std::exp(1.5) + std::exp(1.0);
  EXPECT_NEAR(d.probs[0], std::exp(1.5) / z, 1e-12);
  EXPECT_NEAR(d.probs[2], std::exp(1.0) / z, 1e-12);
  double total = 0;
  for (double p : d.probs) total += p;
  EXPECT_NEAR(total, 1.0, 1e-12);
  EXPECT_NEAR(restricted_log_prob<double>(logits, d.ids, 4, 2.0), std::log(std::exp(1.0) / z), 1e-12);
  const auto g = restricted_distribution<double>(logits, 0.0, 5);
  EXPECT_EQ(g.ids, (std::vector<TokenId>{1}));
}

TEST(Sampler, TrajectoryInvariants) {
  const auto p = PolicyParams<double>::initialize(tiny_model(16, 2), 1);
  const auto sc = sampler(1.5, 20, 4, 12);
  const auto group = sample_group(p, prompt(), sc, Stream(3));
  ASSERT_EQ(group.size(), 4u);
  for (const auto& tr : group) {
    EXPECT_EQ(tr.old_logps.size(), tr.reasoning.size());
    EXPECT_EQ(tr.support.size(), tr.reasoning.size());
    EXPECT_LE(tr.length(), sc.reasoning_budget);
    for (double lp : tr.old_logps) EXPECT_LE(lp, 0.0);
    for (TokenId t : tr.reasoning) EXPECT_NE(t, Vocabulary::kAnswerOpen);
    if (tr.stop_reason == StopReason::kBudget) EXPECT_EQ(tr.length(), sc.reasoning_budget);
    // final_hidden is the hidden state at the last reasoning position.
    auto full = tr.prompt;
    full.insert(full.end(), tr.reasoning.begin(), tr.reasoning.end());
    const auto c = forward(p, full);
    EXPECT_LT((c.hidden.row(c.n - 1).transpose() - tr.final_hidden).norm(), 1e-10);
  }
}

TEST(Sampler, StoredLogProbsMatchRecomputation) {
  const auto p = PolicyParams<float>::initialize(tiny_model(16, 2), 2);
  const auto sc = sampler(1.5, 30, 4, 16);
  for (const auto& tr : sample_group(p, prompt(), sc, Stream(8))) {
    const auto lp = token_logps(p, tr, sc.temperature);
    for (std::size_t t = 0; t < lp.size(); ++t) EXPECT_NEAR(lp[t], tr.old_logps[t], 1e-6);
    for (float r : token_ratios(p, tr, sc.temperature)) EXPECT_NEAR(r, 1.0f, 1e-5);
  }
}

TEST(Sampler, SameStreamSameTrajectory) {
  const auto p = PolicyParams<double>::initialize(tiny_model(), 4);
  const auto sc = sampler(1.5, 50, 1, 10);
  const auto a = sample_trajectory(p, prompt(), sc, Stream(77));
  const auto b = sample_trajectory(p, prompt(), sc, Stream(77));
  EXPECT_EQ(a.reasoning, b.reasoning);
  EXPECT_EQ(a.old_logps, b.old_logps);
  EXPECT_EQ(a.final_hidden, b.final_hidden);
  const auto g = sample_group(p, prompt(), sc, Stream(77));
  ASSERT_EQ(g.size(), 1u);
  const auto c = sample_trajectory(p, prompt(), sc, Stream(77).child(0));
  EXPECT_EQ(g[0].reasoning, c.reasoning);
  EXPECT_EQ(g[0].old_logps, c.old_logps);
}

TEST(Sampler, ThreadedGroupMatchesSerial) {
  const auto p = PolicyParams<double>::initialize(tiny_model(), 4);
  const auto sc = sampler(1.5, 50, 6, 10);
  const auto a = sample_group(p, prompt(), sc, Stream(5), 1);
  const auto b = sample_group(p, prompt(), sc, Stream(5), 3);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].reasoning, b[i].reasoning);
    EXPECT_EQ(a[i].old_logps, b[i].old_logps);
  }
}

TEST(Sampler, TopKOneIsGreedy) {
  const auto p = PolicyParams<double>::initialize(tiny_model(), 6);
  const auto greedy = greedy_reasoning(p, prompt(), 10);
  for (double temperature : {0.5, 1.5, 3.0}) {
    const auto tr = sample_trajectory(p, prompt(), sampler(temperature, 1, 1, 10), Stream(1));
    EXPECT_EQ(tr.reasoning, greedy.reasoning);
    EXPECT_EQ(tr.final_hidden, greedy.final_hidden);
  }
  const auto zero = sample_group(p, prompt(), sampler(0.0, 50, 4, 10), Stream(2));
  for (const auto& tr : zero) EXPECT_EQ(tr.reasoning, greedy.reasoning);
  const auto again = greedy_reasoning(p, prompt(), 10);
  EXPECT_EQ(again.reasoning, greedy.reasoning);
  EXPECT_EQ(again.final_hidden, greedy.final_hidden);
}

TEST(Sampler, GreedyStopsAtBudgetWithoutDelimiter) {
  auto p = PolicyParams<double>::initialize(tiny_model(), 7);
  // Constant final hidden state and a single non-zero LM row: argmax is 'a'.
  auto lm = p.mat(p.layout().w_lm, Vocabulary::kSize, 8);
  lm.setZero();
  p.row(p.layout().lnf_g, 8).setZero();
  p.row(p.layout().lnf_b, 8).setConstant(1.0);
  lm.row('a').setConstant(1.0);
  const auto tr = greedy_reasoning(p, prompt(), 5);
  EXPECT_EQ(tr.stop_reason, StopReason::kBudget);
  EXPECT_EQ(tr.reasoning, TokenSequence(5, 'a'));
}

TEST(Sampler, StopsAtAnswerDelimiter) {
  auto p = PolicyParams<double>::initialize(tiny_model(), 7);
  // Same construction with the delimiter as the argmax.
  auto lm = p.mat(p.layout().w_lm, Vocabulary::kSize, 8);
  lm.setZero();
  p.row(p.layout().lnf_g, 8).setZero();
  p.row(p.layout().lnf_b, 8).setConstant(1.0);
  lm.row(Vocabulary::kAnswerOpen).setConstant(1.0);
  const auto tr = greedy_reasoning(p, prompt(), 5);
  EXPECT_EQ(tr.stop_reason, StopReason::kAnswerToken);
  EXPECT_EQ(tr.length(), 0);
  EXPECT_EQ(tr.final_hidden, forward(p, prompt()).hidden.row(static_cast<Eigen::Index>(prompt().size()) - 1).transpose());
}

TEST(Sampler, ContextOverflowRejected) {
  const auto p = PolicyParams<double>::initialize(tiny_model(8, 1, 60), 1);
  EXPECT_THROW(greedy_reasoning(p, prompt(), 30), ContextOverflowError);
  EXPECT_THROW(sample_group(p, prompt(), sampler(1.5, 5, 2, 30), Stream(1)), ContextOverflowError);
}

TEST(Sampler, InvalidConfigRejected) {
  EXPECT_THROW(sampler(-1.0, 5, 2, 4).validate(132), ConfigError);
  EXPECT_THROW(sampler(1.0, 0, 2, 4).validate(132), ConfigError);
  EXPECT_THROW(sampler(1.0, 133, 2, 4).validate(132), ConfigError);
  EXPECT_THROW(sampler(1.0, 5, 0, 4).validate(132), ConfigError);
  EXPECT_THROW(sampler(1.0, 5, 2, 0).validate(132), ConfigError);
}

// Over 100 seeds, a group of 4 has at least two distinct members in at least
// 99 of them.
TEST(Sampler, GroupsAreDiverse) {
  const auto p = PolicyParams<float>::initialize(tiny_model(16, 2), 10);
  const auto sc = sampler(1.5, 50, 4, 8);
  int diverse = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::set<TokenSequence> distinct;
    for (const auto& tr : sample_group(p, prompt(), sc, Stream(seed))) distinct.insert(tr.reasoning);
    if (distinct.size() >= 2) ++diverse;
  }
  EXPECT_GE(diverse, 99);
}

TEST(Sampler, InvocationCounter) {
  const auto p = PolicyParams<double>::initialize(tiny_model(), 1);
  const auto before = sampler_invocations().load();
  sample_group(p, prompt(), sampler(1.5, 5, 3, 2), Stream(1));
  greedy_reasoning(p, prompt(), 2);
  EXPECT_EQ(sampler_invocations().load() - before, 4u);
}
