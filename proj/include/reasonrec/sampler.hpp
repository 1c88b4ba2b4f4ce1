#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "reasonrec/common.hpp"
#include "reasonrec/params.hpp"
#include "reasonrec/reward.hpp"
#include "reasonrec/tokenizer.hpp"
#include "reasonrec/transformer.hpp"

namespace reasonrec {

struct SamplerConfig {
  // 0 selects greedy decoding (the zero-temperature limit).
  double temperature = 1.5;
  int top_k = 50;
  int group_size = 4;
  int reasoning_budget = 64;

  void validate(int vocab_size) const {
    if (!(temperature >= 0.0) || !std::isfinite(temperature))
      throw ConfigError("sampler.temperature: must be finite and >= 0");
    if (top_k < 1 || top_k > vocab_size)
      throw ConfigError("sampler.top_k: must be in [1, " + std::to_string(vocab_size) + "]");
    if (group_size < 1) throw ConfigError("sampler.group_size: must be >= 1");
    if (reasoning_budget < 1) throw ConfigError("sampler.reasoning_budget: must be >= 1");
  }

  bool greedy() const { return temperature == 0.0 || top_k == 1; }
};

enum class StopReason { kAnswerToken, kBudget };

inline const char* stop_reason_name(StopReason r) {
  return r == StopReason::kAnswerToken ? "answer_token" : "budget";
}

template <class T>
struct Trajectory {
  TokenSequence prompt;
  TokenSequence reasoning;
  // Log-probability of each reasoning token under the restricted (top-K,
  // temperature-scaled, renormalized) old-policy distribution.
  std::vector<T> old_logps;
  // The top-K ids each step was drawn from; ratios are evaluated on the
  // same restricted support.
  std::vector<std::vector<TokenId>> support;
  Vec<T> final_hidden;
  ItemId target = -1;
  RewardBreakdown reward;
  double advantage = 0.0;
  StopReason stop_reason = StopReason::kBudget;

  int length() const { return static_cast<int>(reasoning.size()); }
};

// Counts every trajectory drawn, stochastic or greedy.
inline std::atomic<std::uint64_t>& sampler_invocations() {
  static std::atomic<std::uint64_t> count{0};
  return count;
}

template <class T>
struct RestrictedDistribution {
  std::vector<TokenId> ids;  // descending logit, ties by ascending id
  std::vector<T> probs;
  std::vector<T> logps;
};

// Top-K restriction of logits / temperature, renormalized. temperature 0 or
// top_k 1 collapse to the argmax.
template <class T>
RestrictedDistribution<T> restricted_distribution(const Eigen::Ref<const RowVec<T>>& logits, double temperature,
                                                  int top_k) {
  const int V = static_cast<int>(logits.size());
  const int k = (temperature == 0.0) ? 1 : std::min(top_k, V);
  std::vector<TokenId> order(static_cast<std::size_t>(V));
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](TokenId a, TokenId b) {
    const T la = logits(a), lb = logits(b);
    return la != lb ? la > lb : a < b;
  });
  RestrictedDistribution<T> out;
  out.ids.assign(order.begin(), order.begin() + k);
  out.probs.resize(static_cast<std::size_t>(k));
  out.logps.resize(static_cast<std::size_t>(k));
  if (k == 1) {
    out.probs[0] = T(1);
    out.logps[0] = T(0);
    return out;
  }
  const T inv_t = static_cast<T>(1.0 / temperature);
  const T m = logits(out.ids[0]) * inv_t;
  T z = 0;
  for (int i = 0; i < k; ++i) z += std::exp(logits(out.ids[static_cast<std::size_t>(i)]) * inv_t - m);
  const T log_z = std::log(z);
  for (int i = 0; i < k; ++i) {
    const T lp = logits(out.ids[static_cast<std::size_t>(i)]) * inv_t - m - log_z;
    out.logps[static_cast<std::size_t>(i)] = lp;
    out.probs[static_cast<std::size_t>(i)] = std::exp(lp);
  }
  return out;
}

// Log-probability of `token` under the distribution restricted to `support`.
template <class T>
T restricted_log_prob(const Eigen::Ref<const RowVec<T>>& logits, const std::vector<TokenId>& support, TokenId token,
                      double temperature) {
  if (support.size() == 1) return T(0);
  const T inv_t = static_cast<T>(1.0 / temperature);
  T m = -std::numeric_limits<T>::infinity();
  for (TokenId id : support) m = std::max(m, logits(id) * inv_t);
  T z = 0;
  for (TokenId id : support) z += std::exp(logits(id) * inv_t - m);
  return logits(token) * inv_t - m - std::log(z);
}

namespace detail {

// Prompt keys/values and last hidden state, shared by every trajectory
// continuing the same prompt.
template <class T>
struct PromptState {
  KvState<T> kv;
  Vec<T> hidden;
};

template <class T>
PromptState<T> prefill_prompt(const PolicyParams<T>& params, const TokenSequence& prompt, int budget,
                              const SharedPrefix<T>* prefix = nullptr) {
  const auto& mc = params.config();
  if (prompt.empty()) throw DimensionMismatch("sampler: empty prompt");
  if (static_cast<int>(prompt.size()) + budget > mc.max_context) {
    throw ContextOverflowError("prompt of " + std::to_string(prompt.size()) + " tokens plus budget " +
                               std::to_string(budget) + " exceeds max_context " + std::to_string(mc.max_context));
  }
  if (prefix && prefix->length() > 0) {
    const auto k = static_cast<std::size_t>(prefix->length());
    if (prompt.size() <= k || !std::equal(prefix->cache.tokens.begin(), prefix->cache.tokens.end(), prompt.begin()))
      throw DimensionMismatch("sampler: prompt does not extend the shared prefix");
  }
  const auto cache = prefix ? forward_suffix(params, *prefix, prompt) : forward(params, prompt);
  return {kv_state(cache, static_cast<int>(prompt.size()) + budget), cache.hidden.row(cache.n - 1).transpose()};
}

template <class T>
Trajectory<T> decode(const PolicyParams<T>& params, const TokenSequence& prompt, PromptState<T> state,
                     const SamplerConfig& cfg, std::mt19937_64* rng) {
  sampler_invocations().fetch_add(1, std::memory_order_relaxed);
  Trajectory<T> tr;
  tr.prompt = prompt;
  KvState<T>& kv = state.kv;
  Vec<T> h = std::move(state.hidden);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  tr.stop_reason = StopReason::kBudget;
  while (tr.length() < cfg.reasoning_budget) {
    const RowVec<T> logits = lm_logits<T>(params, h.transpose());
    auto dist = restricted_distribution<T>(logits, cfg.greedy() ? 0.0 : cfg.temperature, cfg.top_k);
    std::size_t pick = 0;
    if (rng != nullptr && dist.ids.size() > 1) {
      const double u = unif(*rng);
      double acc = 0.0;
      pick = dist.ids.size() - 1;
      for (std::size_t i = 0; i < dist.ids.size(); ++i) {
        acc += static_cast<double>(dist.probs[i]);
        if (u < acc) {
          pick = i;
          break;
        }
      }
    }
    const TokenId tok = dist.ids[pick];
    if (tok == Vocabulary::kAnswerOpen) {
      tr.stop_reason = StopReason::kAnswerToken;
      break;
    }
    tr.reasoning.push_back(tok);
    tr.old_logps.push_back(dist.logps[pick]);
    tr.support.push_back(std::move(dist.ids));
    const TokenId one[1] = {tok};
    auto step = forward(params, std::span<const TokenId>(one, 1), &kv);
    append_kv(kv, step);
    h = step.hidden.row(0).transpose();
  }
  tr.final_hidden = std::move(h);
  return tr;
}

}  // namespace detail

// One reasoning trace from the (old) policy: top-K sampling with temperature,
// stopping at the answer delimiter or the budget.
template <class T>
Trajectory<T> sample_trajectory(const PolicyParams<T>& old_params, const TokenSequence& prompt,
                                const SamplerConfig& cfg, const Stream& stream) {
  cfg.validate(old_params.config().vocab_size);
  auto rng = stream.engine();
  return detail::decode(old_params, prompt, detail::prefill_prompt(old_params, prompt, cfg.reasoning_budget), cfg,
                        &rng);
}

// G trajectories, trajectory i drawn from stream.child(i).
template <class T>
std::vector<Trajectory<T>> sample_group(const PolicyParams<T>& old_params, const TokenSequence& prompt,
                                        const SamplerConfig& cfg, const Stream& stream, int threads = 1,
                                        const SharedPrefix<T>* prefix = nullptr) {
  cfg.validate(old_params.config().vocab_size);
  const auto state = detail::prefill_prompt(old_params, prompt, cfg.reasoning_budget, prefix);
  std::vector<Trajectory<T>> group(static_cast<std::size_t>(cfg.group_size));
  parallel_for(cfg.group_size, threads, [&](int i) {
    auto rng = stream.child(static_cast<std::uint64_t>(i)).engine();
    group[static_cast<std::size_t>(i)] = detail::decode(old_params, prompt, state, cfg, &rng);
  });
  return group;
}

// Argmax decoding (ties to the lowest id) with the same stop rule.
template <class T>
Trajectory<T> greedy_reasoning(const PolicyParams<T>& params, const TokenSequence& prompt, int budget,
                               const SharedPrefix<T>* prefix = nullptr) {
  SamplerConfig cfg;
  cfg.temperature = 0.0;
  cfg.top_k = 1;
  cfg.group_size = 1;
  cfg.reasoning_budget = budget;
  cfg.validate(params.config().vocab_size);
  return detail::decode<T>(params, prompt, detail::prefill_prompt(params, prompt, budget, prefix), cfg, nullptr);
}

}  // namespace reasonrec
