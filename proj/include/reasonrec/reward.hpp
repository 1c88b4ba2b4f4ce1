#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "reasonrec/common.hpp"

namespace reasonrec {

struct RewardBreakdown {
  double r_discrete = 0.0;
  double r_continuous = 0.0;
  double fused = 0.0;
  int rank = 0;
  int cutoff = 0;
};

enum class Estimator { kGrpo, kRloo };

inline std::string estimator_name(Estimator e) { return e == Estimator::kGrpo ? "grpo" : "rloo"; }

inline Estimator parse_estimator(std::string_view s) {
  if (s == "grpo") return Estimator::kGrpo;
  if (s == "rloo") return Estimator::kRloo;
  throw ConfigError("unknown estimator '" + std::string(s) + "' (expected grpo|rloo)");
}

struct AdvantageGroup {
  std::vector<double> rewards;
  std::vector<double> advantages;
  Estimator estimator = Estimator::kGrpo;
  int i_star = 0;
};

// 1-based rank under descending score; equal scores are ordered by item id.
template <class T>
int rank_of_target(std::span<const T> scores, ItemId target) {
  if (target < 0 || static_cast<std::size_t>(target) >= scores.size())
    throw DimensionMismatch("rank_of_target: target " + std::to_string(target) + " outside catalog");
  const T st = scores[static_cast<std::size_t>(target)];
  int ahead = 0;
  for (std::size_t v = 0; v < scores.size(); ++v) {
    const T s = scores[v];
    if (s > st || (s == st && static_cast<ItemId>(v) < target)) ++ahead;
  }
  return ahead + 1;
}

template <class T>
int rank_of_target(const Vec<T>& scores, ItemId target) {
  return rank_of_target<T>(std::span<const T>(scores.data(), static_cast<std::size_t>(scores.size())), target);
}

// NDCG@k with a single relevant item (ideal DCG = 1).
inline double ndcg_reward(int rank, int k) {
  if (rank < 1 || k < 1) throw ConfigError("ndcg_reward: rank and k must be >= 1");
  return rank <= k ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
}

// Softmax over the whole catalog of s(v)/tau, read at the target.
template <class T>
double similarity_reward(const Vec<T>& scores, ItemId target, double tau) {
  if (!(tau > 0)) throw ConfigError("similarity_reward: tau must be > 0");
  if (target < 0 || target >= scores.size()) throw DimensionMismatch("similarity_reward: target outside catalog");
  const double m = static_cast<double>(scores.maxCoeff());
  double z = 0.0;
  for (Eigen::Index v = 0; v < scores.size(); ++v) z += std::exp((static_cast<double>(scores(v)) - m) / tau);
  return std::exp((static_cast<double>(scores(target)) - m) / tau) / z;
}

inline double fuse(double r_discrete, double r_continuous, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("fuse: beta must lie in [0, 1]");
  return beta * r_continuous + (1.0 - beta) * r_discrete;
}

template <class T>
RewardBreakdown compute_reward(const Vec<T>& scores, ItemId target, int cutoff, double beta, double tau) {
  RewardBreakdown r;
  r.rank = rank_of_target<T>(scores, target);
  r.cutoff = cutoff;
  r.r_discrete = ndcg_reward(r.rank, cutoff);
  r.r_continuous = similarity_reward<T>(scores, target, tau);
  r.fused = fuse(r.r_discrete, r.r_continuous, beta);
  return r;
}

namespace detail {

inline int argmax_lowest(const std::vector<double>& a) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(a.size()); ++i)
    if (a[static_cast<std::size_t>(i)] > a[static_cast<std::size_t>(best)]) best = i;
  return best;
}

inline bool all_equal(std::span<const double> r) {
  return std::all_of(r.begin(), r.end(), [&](double x) { return x == r.front(); });
}

}  // namespace detail

inline AdvantageGroup rloo_advantages(std::span<const double> rewards) {
  const auto G = rewards.size();
  if (G < 2) throw ConfigError("rloo_advantages: leave-one-out needs a group of at least 2");
  AdvantageGroup out;
  out.estimator = Estimator::kRloo;
  out.rewards.assign(rewards.begin(), rewards.end());
  out.advantages.assign(G, 0.0);
  if (!detail::all_equal(rewards)) {
    double total = 0.0;
    for (double r : rewards) total += r;
    for (std::size_t i = 0; i < G; ++i)
      out.advantages[i] = rewards[i] - (total - rewards[i]) / static_cast<double>(G - 1);
  }
  out.i_star = detail::argmax_lowest(out.advantages);
  return out;
}

inline constexpr double kGrpoStdFloor = 1e-8;

// (R_i - mean) / max(population std, floor); equal rewards give zeros.
inline AdvantageGroup grpo_advantages(std::span<const double> rewards) {
  const auto G = rewards.size();
  if (G < 2) throw ConfigError("grpo_advantages: group normalization needs a group of at least 2");
  AdvantageGroup out;
  out.estimator = Estimator::kGrpo;
  out.rewards.assign(rewards.begin(), rewards.end());
  out.advantages.assign(G, 0.0);
  if (!detail::all_equal(rewards)) {
    double mean = 0.0;
    for (double r : rewards) mean += r;
    mean /= static_cast<double>(G);
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    const double sd = std::max(std::sqrt(var / static_cast<double>(G)), kGrpoStdFloor);
    for (std::size_t i = 0; i < G; ++i) out.advantages[i] = (rewards[i] - mean) / sd;
  }
  out.i_star = detail::argmax_lowest(out.advantages);
  return out;
}

inline AdvantageGroup compute_advantages(std::span<const double> rewards, Estimator e) {
  return e == Estimator::kGrpo ? grpo_advantages(rewards) : rloo_advantages(rewards);
}

}  // namespace reasonrec
