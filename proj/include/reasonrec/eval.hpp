#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"
#include "reasonrec/common.hpp"
#include "reasonrec/corpus.hpp"
#include "reasonrec/model.hpp"
#include "reasonrec/reward.hpp"
#include "reasonrec/sampler.hpp"
#include "reasonrec/transformer.hpp"

namespace reasonrec {

struct EvalConfig {
  std::vector<int> ks = {5, 10, 20};
  int reasoning_budget = 64;
  // false scores the prompt's last hidden state directly (no reasoning).
  bool use_reasoning = true;
  int reward_cutoff = 1000;
  double beta = 0.05;
  // 0 evaluates every user of the split.
  int max_users = 0;
  bool strict = false;
  int threads = 1;

  void validate() const {
    if (ks.empty()) throw ConfigError("eval.ks: must be non-empty");
    for (int k : ks)
      if (k < 1) throw ConfigError("eval.ks: every K must be >= 1");
    if (reasoning_budget < 1) throw ConfigError("eval.reasoning_budget: must be >= 1");
    if (reward_cutoff < 1) throw ConfigError("eval.reward_cutoff: must be >= 1");
    if (!(beta >= 0 && beta <= 1)) throw ConfigError("eval.beta: must lie in [0, 1]");
    if (max_users < 0) throw ConfigError("eval.max_users: must be >= 0");
  }
};

// Top-K item ids by descending score, ties by ascending id.
template <class T>
std::vector<ItemId> top_k_items(const Vec<T>& scores, int k) {
  const int n = static_cast<int>(scores.size());
  k = std::clamp(k, 0, n);
  std::vector<ItemId> ids(static_cast<std::size_t>(n));
  std::iota(ids.begin(), ids.end(), 0);
  std::partial_sort(ids.begin(), ids.begin() + k, ids.end(), [&](ItemId a, ItemId b) {
    return scores(a) != scores(b) ? scores(a) > scores(b) : a < b;
  });
  ids.resize(static_cast<std::size_t>(k));
  return ids;
}

template <class T>
struct Recommendation {
  std::vector<ItemId> items;
  Trajectory<T> trajectory;
  Vec<T> scores;
};

// The final hidden state used for scoring: after greedy reasoning, or the
// prompt's last hidden state when reasoning is off.
template <class T>
Trajectory<T> inference_trajectory(const PolicyParams<T>& params, const TokenSequence& prompt, int budget,
                                   bool use_reasoning, const SharedPrefix<T>* prefix = nullptr) {
  if (use_reasoning) return greedy_reasoning(params, prompt, budget, prefix);
  Trajectory<T> tr;
  tr.prompt = prompt;
  const auto c = prefix ? forward_suffix(params, *prefix, prompt) : forward(params, prompt);
  tr.final_hidden = c.hidden.row(c.n - 1).transpose();
  tr.stop_reason = StopReason::kAnswerToken;
  return tr;
}

inline void check_table_current(std::uint64_t param_version, std::uint64_t table_version) {
  if (param_version != table_version) {
    throw ConfigError("item table was refreshed under parameter version " + std::to_string(table_version) +
                      " but the policy is at version " + std::to_string(param_version));
  }
}

template <class T>
Recommendation<T> recommend(const PolicyParams<T>& params, const ItemEmbeddingTable<T>& table,
                            const TokenSequence& prompt, int k, int budget, bool use_reasoning = true,
                            bool strict = false) {
  if (strict) check_table_current(params.version(), table.param_version);
  Recommendation<T> rec;
  rec.trajectory = inference_trajectory(params, prompt, budget, use_reasoning);
  rec.scores = score_items<T>(rec.trajectory.final_hidden, table);
  rec.items = top_k_items<T>(rec.scores, k);
  return rec;
}

struct MetricSet {
  std::map<int, double> hr, ndcg;
};

// HR@K and NDCG@K from 1-based target ranks. Gains are summed over the ranks
// in ascending order, so the result does not depend on the order of `ranks`.
inline MetricSet metrics_from_ranks(std::vector<int> ranks, const std::vector<int>& ks) {
  if (ranks.empty()) throw ConfigError("metrics_from_ranks: no users");
  for (int r : ranks)
    if (r < 1) throw ConfigError("metrics_from_ranks: ranks are 1-based");
  std::sort(ranks.begin(), ranks.end());
  MetricSet m;
  const double n = static_cast<double>(ranks.size());
  for (int k : ks) {
    long hits = 0;
    double dcg = 0.0;
    for (int r : ranks) {
      if (r > k) break;
      ++hits;
      dcg += 1.0 / std::log2(static_cast<double>(r) + 1.0);
    }
    m.hr[k] = static_cast<double>(hits) / n;
    m.ndcg[k] = dcg / n;
  }
  return m;
}

inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

// Order-independent mean.
inline double sorted_mean(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

struct LengthStats {
  double mean = 0, p50 = 0, p90 = 0, max = 0;
};

inline LengthStats length_stats(const std::vector<double>& lengths) {
  LengthStats s;
  if (lengths.empty()) return s;
  s.mean = sorted_mean(lengths);
  s.p50 = percentile(lengths, 0.5);
  s.p90 = percentile(lengths, 0.9);
  s.max = *std::max_element(lengths.begin(), lengths.end());
  return s;
}

struct EvalReport {
  std::string split;
  int catalog_size = 0;
  int num_users = 0;
  MetricSet metrics;
  LengthStats length;
  double answer_stop_rate = 0;
  double mean_reward = 0;
  double mean_r_discrete = 0;
  double mean_r_continuous = 0;
  std::uint64_t param_version = 0;
  double wall_time_s = 0;  // not part of the deterministic JSON
  std::vector<int> ranks;  // per user, in split order

  nlohmann::json to_json(bool with_wall_time = true) const {
    nlohmann::json hr = nlohmann::json::object(), nd = nlohmann::json::object();
    for (const auto& [k, v] : metrics.hr) hr[std::to_string(k)] = v;
    for (const auto& [k, v] : metrics.ndcg) nd[std::to_string(k)] = v;
    nlohmann::json j = {{"split", split},
                        {"catalog_size", catalog_size},
                        {"num_users", num_users},
                        {"hr", hr},
                        {"ndcg", nd},
                        {"length", {{"mean", length.mean}, {"p50", length.p50}, {"p90", length.p90},
                                    {"max", length.max}}},
                        {"answer_stop_rate", answer_stop_rate},
                        {"mean_reward", mean_reward},
                        {"mean_r_discrete", mean_r_discrete},
                        {"mean_r_continuous", mean_r_continuous},
                        {"param_version", param_version}};
    if (with_wall_time) j["wall_time_s"] = wall_time_s;
    return j;
  }

  std::string table() const {
    std::string out = "split " + split + "  users " + std::to_string(num_users) + "  items " +
                      std::to_string(catalog_size) + "\n";
    char buf[128];
    std::snprintf(buf, sizeof buf, "%6s %10s %10s\n", "K", "HR@K", "NDCG@K");
    out += buf;
    for (const auto& [k, v] : metrics.hr) {
      std::snprintf(buf, sizeof buf, "%6d %10.4f %10.4f\n", k, v, metrics.ndcg.at(k));
      out += buf;
    }
    std::snprintf(buf, sizeof buf, "reasoning length mean %.1f p50 %.1f p90 %.1f\n", length.mean, length.p50,
                  length.p90);
    out += buf;
    std::snprintf(buf, sizeof buf, "mean fused reward %.6f\n", mean_reward);
    out += buf;
    return out;
  }
};

template <class T>
EvalReport evaluate(const PolicyParams<T>& params, const ItemEmbeddingTable<T>& table,
                    const std::vector<UserHistory>& users, const Catalog& catalog, const EvalConfig& cfg,
                    const std::string& split = "val") {
  cfg.validate();
  if (users.empty()) throw ConfigError("evaluate: split '" + split + "' is empty");
  if (table.size() != catalog.size()) throw DimensionMismatch("evaluate: table rows != catalog size");
  if (cfg.strict) check_table_current(params.version(), table.param_version);
  const auto t0 = std::chrono::steady_clock::now();
  const int n = cfg.max_users > 0 ? std::min<int>(cfg.max_users, static_cast<int>(users.size()))
                                  : static_cast<int>(users.size());
  std::vector<TokenSequence> prompts;
  std::vector<const TokenSequence*> seqs;
  for (int u = 0; u < n; ++u) prompts.push_back(render_user_prompt(users[static_cast<std::size_t>(u)], catalog));
  for (const auto& p : prompts) seqs.push_back(&p);
  const auto prefix = encode_shared_prefix(params, seqs);
  std::vector<int> ranks(static_cast<std::size_t>(n));
  std::vector<double> lengths(static_cast<std::size_t>(n)), rewards(static_cast<std::size_t>(n)),
      rd(static_cast<std::size_t>(n)), rc(static_cast<std::size_t>(n)), stops(static_cast<std::size_t>(n));
  parallel_for(n, cfg.threads, [&](int u) {
    const auto& h = users[static_cast<std::size_t>(u)];
    const auto tr = inference_trajectory(params, prompts[static_cast<std::size_t>(u)], cfg.reasoning_budget,
                                         cfg.use_reasoning, &prefix);
    const Vec<T> scores = score_items<T>(tr.final_hidden, table);
    const auto r = compute_reward<T>(scores, h.target, cfg.reward_cutoff, cfg.beta, params.config().tau_sim);
    const auto i = static_cast<std::size_t>(u);
    ranks[i] = r.rank;
    lengths[i] = tr.length();
    rewards[i] = r.fused;
    rd[i] = r.r_discrete;
    rc[i] = r.r_continuous;
    stops[i] = tr.stop_reason == StopReason::kAnswerToken ? 1.0 : 0.0;
  });
  EvalReport rep;
  rep.split = split;
  rep.catalog_size = catalog.size();
  rep.num_users = n;
  rep.metrics = metrics_from_ranks(ranks, cfg.ks);
  rep.length = length_stats(lengths);
  rep.answer_stop_rate = sorted_mean(stops);
  rep.mean_reward = sorted_mean(rewards);
  rep.mean_r_discrete = sorted_mean(rd);
  rep.mean_r_continuous = sorted_mean(rc);
  rep.param_version = params.version();
  rep.ranks = std::move(ranks);
  rep.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

// Expected NDCG@K when the target's rank is uniform on 1..n.
inline double random_ndcg(int n, int k) {
  double s = 0.0;
  for (int r = 1; r <= std::min(n, k); ++r) s += 1.0 / std::log2(r + 1.0);
  return s / n;
}

struct LatencyConfig {
  std::vector<int> catalog_sizes = {1000, 10000};
  int reps = 3;
  int queries = 100;
  int warmup = 5;
  int reasoning_budget = 64;
  int identifier_tokens = 16;
  int topk = 10;

  void validate() const {
    if (catalog_sizes.empty()) throw ConfigError("latency.catalog_sizes: must be non-empty");
    for (int v : catalog_sizes)
      if (v < 1) throw ConfigError("latency.catalog_sizes: sizes must be >= 1");
    if (reps < 3) throw ConfigError("latency.reps: must be >= 3");
    if (queries < 1) throw ConfigError("latency.queries: must be >= 1");
    if (warmup < 0) throw ConfigError("latency.warmup: must be >= 0");
    if (reasoning_budget < 1) throw ConfigError("latency.reasoning_budget: must be >= 1");
    if (identifier_tokens < 1) throw ConfigError("latency.identifier_tokens: must be >= 1");
    if (topk < 1) throw ConfigError("latency.topk: must be >= 1");
  }
};

struct PhaseTiming {
  std::vector<double> samples_ms;  // one per rep: mean ms per query
  double mean_ms = 0, median_ms = 0;
};

struct LatencyRow {
  int catalog_size = 0;
  PhaseTiming reasoning, scoring, autoregressive;
};

struct LatencyReport {
  std::vector<LatencyRow> rows;
  int reps = 0;
  int queries = 0;
  int identifier_tokens = 0;

  nlohmann::json to_json() const {
    auto phase = [](const PhaseTiming& p) {
      return nlohmann::json{{"samples_ms", p.samples_ms}, {"mean_ms", p.mean_ms}, {"median_ms", p.median_ms}};
    };
    nlohmann::json rs = nlohmann::json::array();
    for (const auto& r : rows)
      rs.push_back({{"catalog_size", r.catalog_size},
                    {"reasoning", phase(r.reasoning)},
                    {"scoring", phase(r.scoring)},
                    {"autoregressive", phase(r.autoregressive)}});
    return {{"reps", reps}, {"queries", queries}, {"identifier_tokens", identifier_tokens}, {"rows", rs}};
  }

  std::string table() const {
    std::string out;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%10s %16s %16s %20s\n", "|V|", "reasoning ms", "scoring ms", "ar-decode ms");
    out += buf;
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%10d %16.4f %16.4f %20.4f\n", r.catalog_size, r.reasoning.median_ms,
                    r.scoring.median_ms, r.autoregressive.median_ms);
      out += buf;
    }
    return out;
  }
};

namespace detail {

inline void finish_phase(PhaseTiming& p) {
  p.mean_ms = sorted_mean(p.samples_ms);
  p.median_ms = percentile(p.samples_ms, 0.5);
}

// Prompt prefill for the identifier-decoding arm; untimed.
template <class T>
struct Prefill {
  KvState<T> kv;
  RowVec<T> hidden;
};

template <class T>
Prefill<T> prefill(const PolicyParams<T>& params, const TokenSequence& prompt, int extra) {
  auto c = forward(params, prompt);
  return {kv_state(c, static_cast<int>(prompt.size()) + extra), c.hidden.row(c.n - 1)};
}

// Greedy decode of `n` identifier tokens continuing a prefilled prompt; the
// autoregressive comparison arm.
template <class T>
TokenId decode_identifier(const PolicyParams<T>& params, Prefill<T>& pf, int n) {
  TokenId last = 0;
  for (int i = 0; i < n; ++i) {
    const RowVec<T> logits = lm_logits<T>(params, pf.hidden);
    Eigen::Index best = 0;
    logits.maxCoeff(&best);
    last = static_cast<TokenId>(best);
    const TokenId one[1] = {last};
    auto step = forward(params, std::span<const TokenId>(one, 1), &pf.kv);
    append_kv(pf.kv, step);
    pf.hidden = step.hidden.row(0);
  }
  return last;
}

}  // namespace detail

// Batch-1, single-threaded timing of the three inference phases per catalog
// size. Each rep times `queries` prompts after `warmup` untimed ones; a
// sample is the mean milliseconds per query within that rep.
template <class T>
LatencyReport latency_bench(const PolicyParams<T>& params, const std::vector<TokenSequence>& prompts,
                            const LatencyConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (prompts.empty()) throw ConfigError("latency_bench: no prompts");
  using clock = std::chrono::steady_clock;
  const int d = params.config().width;
  LatencyReport rep;
  rep.reps = cfg.reps;
  rep.queries = cfg.queries;
  rep.identifier_tokens = cfg.identifier_tokens;
  volatile double sink = 0;
  auto prompt_at = [&](int q) -> const TokenSequence& { return prompts[static_cast<std::size_t>(q) % prompts.size()]; };

  // Reasoning and identifier decoding do not depend on the catalog; final
  // hidden states are reused by the scoring phase.
  std::vector<Vec<T>> hidden;
  for (int q = 0; q < cfg.warmup + cfg.queries; ++q)
    hidden.push_back(greedy_reasoning(params, prompt_at(q), cfg.reasoning_budget).final_hidden);

  for (int size : cfg.catalog_sizes) {
    LatencyRow row;
    row.catalog_size = size;
    ItemEmbeddingTable<T> table;
    {
      auto rng = root_stream(seed, StreamTag::kLatency).child(static_cast<std::uint64_t>(size)).engine();
      std::normal_distribution<double> normal(0.0, 1.0);
      table.rows.resize(size, d);
      for (Eigen::Index i = 0; i < table.rows.size(); ++i) table.rows.data()[i] = static_cast<T>(normal(rng));
    }
    for (int rep_i = 0; rep_i < cfg.reps; ++rep_i) {
      for (int q = 0; q < cfg.warmup; ++q) sink = sink + greedy_reasoning(params, prompt_at(q), cfg.reasoning_budget).length();
      auto t0 = clock::now();
      for (int q = 0; q < cfg.queries; ++q)
        sink = sink + greedy_reasoning(params, prompt_at(cfg.warmup + q), cfg.reasoning_budget).length();
      auto t1 = clock::now();
      row.reasoning.samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count() / cfg.queries);

      for (int q = 0; q < cfg.warmup; ++q)
        sink = sink + top_k_items<T>(score_items<T>(hidden[static_cast<std::size_t>(q)], table), cfg.topk)[0];
      t0 = clock::now();
      for (int q = 0; q < cfg.queries; ++q)
        sink = sink +
               top_k_items<T>(score_items<T>(hidden[static_cast<std::size_t>(cfg.warmup + q)], table), cfg.topk)[0];
      t1 = clock::now();
      row.scoring.samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count() / cfg.queries);

      // Prefill is shared with the unified pipeline, so only the L decode
      // steps are timed.
      for (int q = 0; q < cfg.warmup; ++q) {
        auto pf = detail::prefill(params, prompt_at(q), cfg.identifier_tokens);
        sink = sink + detail::decode_identifier(params, pf, cfg.identifier_tokens);
      }
      double ar_ms = 0.0;
      for (int q = 0; q < cfg.queries; ++q) {
        auto pf = detail::prefill(params, prompt_at(cfg.warmup + q), cfg.identifier_tokens);
        const auto a = clock::now();
        sink = sink + detail::decode_identifier(params, pf, cfg.identifier_tokens);
        ar_ms += std::chrono::duration<double, std::milli>(clock::now() - a).count();
      }
      row.autoregressive.samples_ms.push_back(ar_ms / cfg.queries);
    }
    detail::finish_phase(row.reasoning);
    detail::finish_phase(row.scoring);
    detail::finish_phase(row.autoregressive);
    rep.rows.push_back(std::move(row));
  }
  (void)sink;
  return rep;
}

}  // namespace reasonrec
