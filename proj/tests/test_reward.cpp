#include <gtest/gtest.h>

#include <numeric>

#include "test_util.hpp"

using namespace rrtest;

namespace {

int sort_rank(const std::vector<double>& s, int target) {
  std::vector<int> order(s.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return s[a] > s[b]; });
  return static_cast<int>(std::find(order.begin(), order.end(), target) - order.begin()) + 1;
}

}  // namespace

TEST(Rank, Examples) {
  const Vec<double> s = to_vec({0.1, 0.9, 0.3});
  EXPECT_EQ(rank_of_target<double>(s, 1), 1);
  const Vec<double> flat = Vec<double>::Constant(10, 0.5);
  EXPECT_EQ(rank_of_target<double>(flat, 0), 1);
  EXPECT_EQ(rank_of_target<double>(flat, 7), 8);
  EXPECT_THROW(rank_of_target<double>(flat, 10), DimensionMismatch);
}

TEST(Rank, MatchesSortOracle) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    auto s = random_vector(rng, 100);
    for (int i = 0; i < 10; ++i) s[static_cast<std::size_t>(rng() % 100)] = 0.25;  // ties
    const int target = static_cast<int>(rng() % 100);
    EXPECT_EQ(rank_of_target<double>(to_vec(s), target), sort_rank(s, target));
  }
}

TEST(Ndcg, Examples) {
  EXPECT_EQ(ndcg_reward(1, 1000), 1.0);
  EXPECT_EQ(ndcg_reward(1001, 1000), 0.0);
  EXPECT_NEAR(ndcg_reward(2, 5), 0.63093, 1e-5);
  EXPECT_THROW(ndcg_reward(0, 5), ConfigError);
  double prev = 1.0;
  for (int r = 1; r <= 30; ++r) {
    const double v = ndcg_reward(r, 20);
    EXPECT_LE(v, prev);
    EXPECT_GE(v, 0.0);
    prev = v;
  }
}

TEST(Similarity, Examples) {
  EXPECT_NEAR(similarity_reward<double>(Vec<double>::Constant(8, 3.0), 5, 0.1), 1.0 / 8, 1e-15);
  std::mt19937_64 rng(2);
  const Vec<double> s = to_vec(random_vector(rng, 5));
  double total = 0;
  for (int v = 0; v < 5; ++v) total += similarity_reward<double>(s, v, 0.3);
  EXPECT_NEAR(total, 1.0, 1e-12);
  // Large scores do not overflow.
  const Vec<double> big = to_vec({1000.0, 999.0});
  EXPECT_NEAR(similarity_reward<double>(big, 0, 1.0), 1.0 / (1.0 + std::exp(-1.0)), 1e-12);
  EXPECT_THROW(similarity_reward<double>(s, 0, 0.0), ConfigError);
}

TEST(Fuse, Examples) {
  EXPECT_EQ(fuse(0.7, 0.2, 0.0), 0.7);
  EXPECT_EQ(fuse(0.7, 0.2, 1.0), 0.2);
  EXPECT_NEAR(fuse(1.0, 0.2, 0.05), 0.96, 1e-15);
  EXPECT_THROW(fuse(1.0, 0.2, 1.5), ConfigError);
  EXPECT_THROW(fuse(1.0, 0.2, -0.1), ConfigError);
  EXPECT_LE(fuse(0.3, 0.2, 0.4), fuse(0.4, 0.2, 0.4));
  EXPECT_LE(fuse(0.3, 0.2, 0.4), fuse(0.3, 0.5, 0.4));
}

TEST(ComputeReward, Breakdown) {
  const Vec<double> s = to_vec({0.5, 2.0, 1.0, -1.0});
  const auto r = compute_reward<double>(s, 2, 3, 0.25, 0.5);
  EXPECT_EQ(r.rank, 2);
  EXPECT_EQ(r.cutoff, 3);
  EXPECT_EQ(r.r_discrete, ndcg_reward(2, 3));
  EXPECT_EQ(r.r_continuous, similarity_reward<double>(s, 2, 0.5));
  EXPECT_EQ(r.fused, 0.25 * r.r_continuous + 0.75 * r.r_discrete);
  EXPECT_EQ(compute_reward<double>(s, 3, 3, 0.25, 0.5).r_discrete, 0.0);
}

TEST(Advantages, Examples) {
  const std::vector<double> r = {1, 0, 0, 0};
  const auto rl = rloo_advantages(r);
  EXPECT_NEAR(rl.advantages[0], 1.0, 1e-15);
  for (int i = 1; i < 4; ++i) EXPECT_NEAR(rl.advantages[static_cast<std::size_t>(i)], -1.0 / 3, 1e-15);
  const auto gr = grpo_advantages(r);
  EXPECT_NEAR(gr.advantages[0], 1.73205, 1e-5);
  for (int i = 1; i < 4; ++i) EXPECT_NEAR(gr.advantages[static_cast<std::size_t>(i)], -0.57735, 1e-5);
  EXPECT_EQ(gr.i_star, 0);
  const std::vector<double> same = {0.4, 0.4, 0.4};
  for (double a : rloo_advantages(same).advantages) EXPECT_EQ(a, 0.0);
  for (double a : grpo_advantages(same).advantages) EXPECT_EQ(a, 0.0);
  EXPECT_EQ(grpo_advantages(same).i_star, 0);
  const std::vector<double> one = {1.0};
  EXPECT_THROW(rloo_advantages(one), ConfigError);
  EXPECT_THROW(grpo_advantages(one), ConfigError);
}

TEST(Advantages, IStarLowestIndexOnTies) {
  const std::vector<double> r = {0.1, 0.9, 0.9, 0.2};
  EXPECT_EQ(grpo_advantages(r).i_star, 1);
  EXPECT_EQ(rloo_advantages(r).i_star, 1);
}

TEST(Advantages, Identities) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const int G = 2 + static_cast<int>(rng() % 7);
    const auto r = random_vector(rng, G, 0.0, 1.0);
    const auto rl = rloo_advantages(r);
    EXPECT_NEAR(std::accumulate(rl.advantages.begin(), rl.advantages.end(), 0.0), 0.0, 1e-9);
    const auto gr = grpo_advantages(r);
    double mean = 0, var = 0;
    for (double a : gr.advantages) mean += a;
    mean /= G;
    for (double a : gr.advantages) var += (a - mean) * (a - mean);
    EXPECT_NEAR(mean, 0.0, 1e-9);
    EXPECT_NEAR(std::sqrt(var / G), 1.0, 1e-9);

    // Permutation equivariance.
    std::vector<int> perm(static_cast<std::size_t>(G));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> rp(static_cast<std::size_t>(G));
    for (int i = 0; i < G; ++i) rp[static_cast<std::size_t>(i)] = r[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    const auto rlp = rloo_advantages(rp), grp = grpo_advantages(rp);
    for (int i = 0; i < G; ++i) {
      const auto pi = static_cast<std::size_t>(perm[static_cast<std::size_t>(i)]);
      EXPECT_NEAR(rlp.advantages[static_cast<std::size_t>(i)], rl.advantages[pi], 1e-12);
      EXPECT_NEAR(grp.advantages[static_cast<std::size_t>(i)], gr.advantages[pi], 1e-12);
    }

    // i* is unchanged by a positive affine map of the rewards.
    std::vector<double> ra(r);
    for (double& x : ra) x = 3.0 * x + 0.7;
    EXPECT_EQ(rloo_advantages(ra).i_star, rl.i_star);
    EXPECT_EQ(grpo_advantages(ra).i_star, gr.i_star);
  }
}

TEST(Advantages, ParseEstimator) {
  EXPECT_EQ(parse_estimator("grpo"), Estimator::kGrpo);
  EXPECT_EQ(parse_estimator("rloo"), Estimator::kRloo);
  EXPECT_THROW(parse_estimator("ppo"), ConfigError);
}
