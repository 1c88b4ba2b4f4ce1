#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace rrtest;

namespace {

SamplerConfig small_sampler(int group, int top_k = 12, int budget = 4) {
  SamplerConfig sc;
  sc.temperature = 1.5;
  sc.top_k = top_k;
  sc.group_size = group;
  sc.reasoning_budget = budget;
  return sc;
}

// Probability of `tok` among `support` at temperature t, from a full forward
// pass over prefix.
double oracle_token_prob(const PolicyParams<double>& p, const TokenSequence& prefix, const std::vector<TokenId>& support,
                         TokenId tok, double t) {
  const auto [h, logits] = forward_outputs(p, prefix);
  const auto row = logits.row(logits.rows() - 1);
  double z = 0;
  for (TokenId id : support) z += std::exp(row(id) / t);
  return std::exp(row(tok) / t) / z;
}

// Hidden state of the last position of prompt + reasoning, full forward.
Vec<double> oracle_final_hidden(const PolicyParams<double>& p, const Trajectory<double>& tr) {
  auto s = tr.prompt;
  s.insert(s.end(), tr.reasoning.begin(), tr.reasoning.end());
  const auto c = forward(p, s);
  return c.hidden.row(c.n - 1).transpose();
}

}  // namespace

TEST(ClippedTerm, Examples) {
  EXPECT_DOUBLE_EQ(clipped_term(1.5, 1.0, 0.2), 1.2);
  EXPECT_DOUBLE_EQ(clipped_term(0.5, -1.0, 0.2), -0.8);
  for (double A : {-2.0, -0.3, 0.0, 0.7, 5.0}) EXPECT_EQ(clipped_term(1.0, A, 0.2), A);
  EXPECT_THROW(clipped_term(1.0, 1.0, 0.0), ConfigError);
  EXPECT_FALSE(clip_binds(1.0, 3.0, 0.2));
  EXPECT_TRUE(clip_binds(1.5, 1.0, 0.2));
  EXPECT_TRUE(clip_binds(0.5, -1.0, 0.2));
  EXPECT_FALSE(clip_binds(0.5, 1.0, 0.2));
}

TEST(ClippedTerm, MatchesCaseOracle) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> ur(0.0, 3.0), ua(-2.0, 2.0), ue(0.01, 0.5);
  for (int i = 0; i < 200; ++i) {
    const double r = ur(rng), A = ua(rng), e = ue(rng);
    const double clipped = r < 1 - e ? 1 - e : (r > 1 + e ? 1 + e : r);
    const double a = r * A, b = clipped * A;
    EXPECT_NEAR(clipped_term(r, A, e), a < b ? a : b, 1e-12);
  }
}

TEST(RecLogProb, Examples) {
  const Vec<double> h = to_vec({0.3, -1.0, 2.0});
  Mat<double> one(1, 3);
  one << 1, 2, 3;
  EXPECT_EQ(rec_log_prob<double>(h, one, {4}, 4, 0.1), 0.0);
  Mat<double> same(4, 3);
  same.rowwise() = one.row(0);
  EXPECT_NEAR(rec_log_prob<double>(h, same, {1, 2, 5, 9}, 5, 0.1), std::log(0.25), 1e-12);
  EXPECT_THROW(rec_log_prob<double>(h, same, {1, 2, 5, 9}, 3, 0.1), DimensionMismatch);
  EXPECT_THROW(rec_log_prob<double>(h, same, {1, 2, 5, 9}, 5, 0.0), ConfigError);

  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    Mat<double> rows(4, 3);
    for (Eigen::Index i = 0; i < rows.size(); ++i) rows.data()[i] = random_vector(rng, 1)[0];
    const Vec<double> hh = to_vec(random_vector(rng, 3));
    const int t = static_cast<int>(rng() % 4);
    double z = 0;
    for (int b = 0; b < 4; ++b) z += std::exp(rows.row(b).dot(hh) / 0.7);
    const double expect = std::log(std::exp(rows.row(t).dot(hh) / 0.7) / z);
    EXPECT_NEAR(rec_log_prob<double>(hh, rows, {10, 11, 12, 13}, 10 + t, 0.7), expect, 1e-9);
  }
}

TEST(ContrastiveLoss, Examples) {
  auto p = PolicyParams<double>::initialize(tiny_model(), 3);
  const auto items = short_item_prompts(5, 2);
  const std::vector<TokenSequence> prompts = {tokenize("<bos>aa"), tokenize("<bos>bbb"), tokenize("<bos>c")};
  // One candidate.
  EXPECT_EQ(contrastive_loss(p, {prompts[0]}, {3}, items, Pooling::kLast, 0.5), 0.0);
  EXPECT_EQ(contrastive_loss(p, prompts, {3, 3, 3}, items, Pooling::kLast, 0.5), 0.0);

  // Oracle on three users with distinct targets.
  const std::vector<ItemId> targets = {4, 0, 2};
  double expect = 0;
  for (std::size_t u = 0; u < 3; ++u) {
    const auto c = forward(p, prompts[u]);
    const Vec<double> h = c.hidden.row(c.n - 1).transpose();
    double z = 0, st = 0;
    for (ItemId v : {0, 2, 4}) {
      const double s = encode_item(p, items[static_cast<std::size_t>(v)], Pooling::kLast).dot(h) / 0.5;
      z += std::exp(s);
      if (v == targets[u]) st = s;
    }
    expect += -(st - std::log(z)) / 3;
  }
  EXPECT_NEAR(contrastive_loss(p, prompts, targets, items, Pooling::kLast, 0.5), expect, 1e-9);

  // Constant hidden states: every score is equal.
  p.row(p.layout().lnf_g, 8).setZero();
  p.row(p.layout().lnf_b, 8).setConstant(0.3);
  EXPECT_NEAR(contrastive_loss(p, prompts, targets, items, Pooling::kLast, 0.5), std::log(3.0), 1e-12);
  EXPECT_THROW(contrastive_loss(p, prompts, {1, 2}, items, Pooling::kLast, 0.5), DimensionMismatch);
}

TEST(TokenRatios, UnchangedParamsGiveOne) {
  const auto p = PolicyParams<double>::initialize(tiny_model(), 4);
  const auto tr = sample_trajectory(p, tokenize("<bos>ratios"), small_sampler(1, 20, 6), Stream(3));
  for (double r : token_ratios(p, tr, 1.5)) EXPECT_NEAR(r, 1.0, 1e-6);
  auto bad = tr;
  bad.old_logps.push_back(0.0);
  EXPECT_THROW(token_ratios(p, bad, 1.5), DimensionMismatch);
}

TEST(TokenRatios, MatchProbabilityQuotient) {
  const auto p_old = PolicyParams<double>::initialize(tiny_model(), 5);
  const auto p_new = PolicyParams<double>::initialize(tiny_model(), 6);
  Trajectory<double> tr;
  tr.prompt = tokenize("<bos>q");
  tr.reasoning = {'x', 'y'};
  tr.support = {{'x', 'a', 'b'}, {'y', 'x'}};
  TokenSequence prefix = tr.prompt;
  for (std::size_t t = 0; t < 2; ++t) {
    tr.old_logps.push_back(std::log(oracle_token_prob(p_old, prefix, tr.support[t], tr.reasoning[t], 1.5)));
    prefix.push_back(tr.reasoning[t]);
  }
  const auto r = token_ratios(p_new, tr, 1.5);
  prefix = tr.prompt;
  for (std::size_t t = 0; t < 2; ++t) {
    const double q = oracle_token_prob(p_new, prefix, tr.support[t], tr.reasoning[t], 1.5) /
                     oracle_token_prob(p_old, prefix, tr.support[t], tr.reasoning[t], 1.5);
    EXPECT_NEAR(r[t], q, 1e-9);
    EXPECT_GT(r[t], 0.0);
    prefix.push_back(tr.reasoning[t]);
  }
}

// One user, G = 2, two reasoning tokens each; every term enumerated by hand.
TEST(RecpoObjective, MatchesEnumeratedOracle) {
  const auto p_old = PolicyParams<double>::initialize(tiny_model(), 7);
  auto p_new = p_old.snapshot();
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 0.05);
  for (Eigen::Index i = 0; i < p_new.flat().size(); ++i) p_new.flat()(i) += n(rng);
  const auto items = short_item_prompts(3, 9);

  UserGroup<double> g;
  g.prompt = tokenize("<bos>hi");
  g.target = 1;
  const TokenId toks[2][2] = {{'m', 'n'}, {'o', 'm'}};
  for (int i = 0; i < 2; ++i) {
    Trajectory<double> tr;
    tr.prompt = g.prompt;
    tr.reasoning = {toks[i][0], toks[i][1]};
    tr.support = {{toks[i][0], 'z', 'q'}, {toks[i][1], 'm', 'k', 'a'}};
    g.trajectories.push_back(tr);
  }
  const double rewards[2] = {0.2, 0.9};
  g.advantages = rloo_advantages(rewards);  // A = [-0.7, 0.7], i* = 1
  ASSERT_EQ(g.advantages.i_star, 1);

  const double eps = 0.2, temp = 1.5;
  PolicyValues<double> old(1);
  old[0].token_logps.resize(2);
  old[0].rec_logps = {0.0, 0.0};
  double expect = 0;
  for (int i = 0; i < 2; ++i) {
    auto& tr = g.trajectories[static_cast<std::size_t>(i)];
    TokenSequence prefix = g.prompt;
    for (int t = 0; t < 2; ++t) {
      const double po = oracle_token_prob(p_old, prefix, tr.support[static_cast<std::size_t>(t)],
                                          tr.reasoning[static_cast<std::size_t>(t)], temp);
      const double pn = oracle_token_prob(p_new, prefix, tr.support[static_cast<std::size_t>(t)],
                                          tr.reasoning[static_cast<std::size_t>(t)], temp);
      tr.old_logps.push_back(std::log(po));
      old[0].token_logps[static_cast<std::size_t>(i)].push_back(std::log(po));
      const double r = pn / po, A = g.advantages.advantages[static_cast<std::size_t>(i)];
      expect += std::min(r * A, std::clamp(r, 1 - eps, 1 + eps) * A) / 2;
      prefix.push_back(tr.reasoning[static_cast<std::size_t>(t)]);
    }
  }
  // A single in-batch item: the recommendation probability is 1 under both
  // policies, so the gated term is A_{i*}.
  expect += g.advantages.advantages[1] / 2;

  ObjectiveConfig oc;
  oc.clip_eps = eps;
  oc.temperature = temp;
  oc.tau_sim = 0.5;
  const auto res = recpo_objective(p_new, {g}, items, oc, &old, nullptr);
  EXPECT_NEAR(res.objective, expect, 1e-9);
  EXPECT_EQ(res.token_terms, 4);
  EXPECT_EQ(res.rec_terms, 1);
}

// Ratios 1: objective = mean_u (1/G) (sum_i T_i A_i + A_{i*}).
TEST(RecpoObjective, FirstEpochValue) {
  const auto p = PolicyParams<double>::initialize(tiny_model(), 10);
  const auto items = short_item_prompts(6, 3);
  const std::vector<TokenSequence> prompts = {tokenize("<bos>one"), tokenize("<bos>two!"), tokenize("<bos>3")};
  const auto groups = make_groups(p, prompts, {1, 4, 5}, small_sampler(3), 11);
  ObjectiveConfig oc;
  oc.tau_sim = 0.5;
  const auto res = recpo_objective(p, groups, items, oc, nullptr, nullptr);
  double expect = 0;
  for (const auto& g : groups) {
    double s = 0;
    for (std::size_t i = 0; i < g.trajectories.size(); ++i)
      s += g.trajectories[i].length() * g.advantages.advantages[i];
    s += g.advantages.advantages[static_cast<std::size_t>(g.advantages.i_star)];
    expect += s / 3.0 / 3.0;
  }
  EXPECT_NEAR(res.objective, expect, 1e-12);
  EXPECT_EQ(res.max_ratio_deviation, 0.0);
  EXPECT_EQ(res.clipped_terms, 0);
}

TEST(RecpoObjective, ZeroAdvantagesGiveZero) {
  const auto p = PolicyParams<double>::initialize(tiny_model(), 12);
  const auto items = short_item_prompts(4, 3);
  auto groups = make_groups(p, {tokenize("<bos>ab"), tokenize("<bos>cd")}, {0, 3}, small_sampler(3), 13);
  for (auto& g : groups) g.advantages = grpo_advantages(std::vector<double>(3, 0.5));
  ObjectiveConfig oc;
  Gradients<double> grads(p.layout_ptr());
  const auto res = recpo_objective(p, groups, items, oc, nullptr, &grads);
  EXPECT_EQ(res.objective, 0.0);
  EXPECT_EQ(grads.flat().cwiseAbs().maxCoeff(), 0.0);
}

// With old values equal to the current ones, the clipped objective's gradient
// is the advantage-weighted log-probability gradient.
TEST(RecpoObjective, RatioOneReducesToPolicyGradient) {
  const auto p = PolicyParams<double>::initialize(tiny_model(8, 2), 14);
  const auto items = short_item_prompts(5, 4);
  const auto groups = make_groups(p, {tokenize("<bos>x1"), tokenize("<bos>yy2"), tokenize("<bos>z")}, {0, 2, 4},
                                  small_sampler(4), 15);
  ObjectiveConfig oc;
  oc.tau_sim = 0.5;
  Gradients<double> clipped(p.layout_ptr()), pg(p.layout_ptr());
  const auto a = recpo_objective(p, groups, items, oc, nullptr, &clipped, Surrogate::kClipped);
  recpo_objective(p, groups, items, oc, nullptr, &pg, Surrogate::kAdvantageLogp);
  EXPECT_EQ(a.max_ratio_deviation, 0.0);
  EXPECT_EQ(a.clipped_terms, 0);
  EXPECT_GT(pg.flat().norm(), 0.0);
  EXPECT_LT((clipped.flat() - pg.flat()).cwiseAbs().maxCoeff(), 1e-9);
  // Old values recomputed from stored sampling log-probs give the same.
  const auto again = recpo_objective(p, groups, items, oc, &a.values, nullptr);
  EXPECT_EQ(again.max_ratio_deviation, 0.0);
  for (std::size_t u = 0; u < groups.size(); ++u)
    for (std::size_t i = 0; i < groups[u].trajectories.size(); ++i)
      for (std::size_t t = 0; t < groups[u].trajectories[i].old_logps.size(); ++t)
        EXPECT_NEAR(a.values[u].token_logps[i][t], groups[u].trajectories[i].old_logps[t], 1e-9);
}

// Only the best trajectory contributes a recommendation term.
TEST(RecpoObjective, RecommendationTermGatedToBestTrajectory) {
  const auto p = PolicyParams<double>::initialize(tiny_model(), 16);
  const auto items = short_item_prompts(5, 5);
  // top_k 1: token terms are identically zero.
  auto groups = make_groups(p, {tokenize("<bos>g1"), tokenize("<bos>g22")}, {1, 3}, small_sampler(3, 1), 17);
  const double r0[3] = {0.1, 0.8, 0.3}, r1[3] = {0.6, 0.2, 0.1};
  groups[0].advantages = grpo_advantages(r0);
  groups[1].advantages = grpo_advantages(r1);
  ObjectiveConfig oc;
  oc.tau_sim = 0.5;
  const auto res = recpo_objective(p, groups, items, oc, nullptr, nullptr, Surrogate::kAdvantageLogp);
  double expect = 0;
  const Vec<double> e1 = encode_item(p, items[1], Pooling::kLast), e3 = encode_item(p, items[3], Pooling::kLast);
  for (const auto& g : groups) {
    const auto istar = static_cast<std::size_t>(g.advantages.i_star);
    const Vec<double> h = oracle_final_hidden(p, g.trajectories[istar]);
    const double s1 = e1.dot(h) / 0.5, s3 = e3.dot(h) / 0.5;
    const double st = g.target == 1 ? s1 : s3;
    expect += g.advantages.advantages[istar] * (st - std::log(std::exp(s1) + std::exp(s3))) / 3.0 / 2.0;
  }
  EXPECT_NEAR(res.objective, expect, 1e-9);
  EXPECT_EQ(res.rec_terms, 2);
}

TEST(RecpoObjective, ClippingBindsAfterLargeUpdate) {
  const auto p_old = PolicyParams<double>::initialize(tiny_model(), 18);
  const auto items = short_item_prompts(4, 6);
  const auto groups = make_groups(p_old, {tokenize("<bos>cl"), tokenize("<bos>ip")}, {0, 2}, small_sampler(4), 19);
  ObjectiveConfig oc;
  const auto old = recpo_objective(p_old, groups, items, oc, nullptr, nullptr).values;
  const auto p_new = PolicyParams<double>::initialize(tiny_model(), 99);
  const auto res = recpo_objective(p_new, groups, items, oc, &old, nullptr);
  EXPECT_GT(res.max_ratio_deviation, oc.clip_eps);
  EXPECT_GT(res.clipped_terms, 0);
}

TEST(RecpoObjective, RejectsMissingOldPolicyData) {
  const auto p = PolicyParams<double>::initialize(tiny_model(), 20);
  const auto items = short_item_prompts(4, 7);
  const auto groups = make_groups(p, {tokenize("<bos>m1"), tokenize("<bos>m2")}, {0, 1}, small_sampler(2), 21);
  ObjectiveConfig oc;
  PolicyValues<double> empty;
  EXPECT_THROW(recpo_objective(p, groups, items, oc, &empty, nullptr), DimensionMismatch);
  auto partial = recpo_objective(p, groups, items, oc, nullptr, nullptr).values;
  partial[1].rec_logps.pop_back();
  EXPECT_THROW(recpo_objective(p, groups, items, oc, &partial, nullptr), DimensionMismatch);
  auto no_adv = groups;
  no_adv[0].advantages.advantages.clear();
  EXPECT_THROW(recpo_objective(p, no_adv, items, oc, nullptr, nullptr), DimensionMismatch);
  EXPECT_THROW(recpo_objective(p, std::vector<UserGroup<double>>{}, items, oc, nullptr, nullptr), DimensionMismatch);
}
