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
#include "reasonrec/eval.hpp"
#include "reasonrec/model.hpp"
#include "reasonrec/objective.hpp"
#include "reasonrec/optimizer.hpp"
#include "reasonrec/params.hpp"
#include "reasonrec/reward.hpp"
#include "reasonrec/sampler.hpp"

namespace reasonrec {

enum class Ablation { kNone, kNoReasoning, kNoRc, kNoRd };

inline std::string ablation_name(Ablation a) {
  switch (a) {
    case Ablation::kNone: return "none";
    case Ablation::kNoReasoning: return "no_reasoning";
    case Ablation::kNoRc: return "no_rc";
    case Ablation::kNoRd: return "no_rd";
  }
  return "none";
}

inline Ablation parse_ablation(std::string_view s) {
  if (s == "none") return Ablation::kNone;
  if (s == "no_reasoning") return Ablation::kNoReasoning;
  if (s == "no_rc") return Ablation::kNoRc;
  if (s == "no_rd") return Ablation::kNoRd;
  throw ConfigError("unknown ablation '" + std::string(s) + "' (expected none|no_reasoning|no_rc|no_rd)");
}

struct TrainConfig {
  double clip_eps = 0.2;
  double beta = 0.05;
  int batch_size = 24;
  double lr = 1e-5;
  int warmup_steps = 32;
  double weight_decay = 0.0;
  double max_grad_norm = 1.0;
  int refresh_period = 64;
  Estimator estimator = Estimator::kGrpo;
  Ablation ablation = Ablation::kNone;
  int inner_epochs = 1;
  int total_steps = 200;
  int reward_cutoff = 1000;
  bool normalize_token_terms = false;
  Pooling pooling = Pooling::kLast;

  void validate() const {
    auto fail = [](const std::string& key, const std::string& why) { throw ConfigError("train." + key + ": " + why); };
    if (!(clip_eps > 0)) fail("clip_eps", "must be > 0");
    if (!(beta >= 0 && beta <= 1)) fail("beta", "must lie in [0, 1]");
    if (batch_size < 1) fail("batch_size", "must be >= 1");
    if (refresh_period < 1) fail("refresh_period", "must be >= 1");
    if (inner_epochs < 1) fail("inner_epochs", "must be >= 1");
    if (total_steps < 0) fail("total_steps", "must be >= 0");
    if (reward_cutoff < 1) fail("reward_cutoff", "must be >= 1");
    adamw().validate();
  }

  // The reward ablations are reward reconfigurations.
  double effective_beta() const {
    if (ablation == Ablation::kNoRc) return 0.0;
    if (ablation == Ablation::kNoRd) return 1.0;
    return beta;
  }

  AdamWConfig adamw() const {
    AdamWConfig a;
    a.lr = lr;
    a.warmup_steps = warmup_steps;
    a.weight_decay = weight_decay;
    a.max_grad_norm = max_grad_norm;
    return a;
  }
};

struct StepRecord {
  std::int64_t step = 0;
  double mean_reward = 0;
  double mean_r_discrete = 0;
  double mean_r_continuous = 0;
  LengthStats length;
  double loss = 0;
  double grad_norm = 0;
  double lr = 0;
  long clipped_terms = 0;
  double max_ratio_deviation = 0;
  std::uint64_t table_generation = 0;
  std::uint64_t param_version = 0;
  double wall_time_s = 0;  // kept out of the deterministic log

  nlohmann::json to_json() const {
    return {{"kind", "train"},
            {"step", step},
            {"mean_reward", mean_reward},
            {"mean_r_discrete", mean_r_discrete},
            {"mean_r_continuous", mean_r_continuous},
            {"length", {{"mean", length.mean}, {"p50", length.p50}, {"p90", length.p90}, {"max", length.max}}},
            {"loss", loss},
            {"grad_norm", grad_norm},
            {"lr", lr},
            {"clipped_terms", clipped_terms},
            {"max_ratio_deviation", max_ratio_deviation},
            {"table_generation", table_generation},
            {"param_version", param_version}};
  }
};

// The training loop. Each step: refresh the full item table every
// refresh_period steps, draw a batch, live-encode its targets into the
// table, sample G trajectories per user from the current (old) policy,
// reward and advantage them, then take inner_epochs optimizer steps on the
// clipped objective. The policy used for sampling is the old policy of the
// next update, so no separate copy is held.
template <class T>
class Trainer {
 public:
  Trainer(const World& world, PolicyParams<T> params, SamplerConfig sampler, TrainConfig cfg, std::uint64_t seed,
          int threads = 1)
      : world_(world), params_(std::move(params)), sampler_(sampler), cfg_(cfg), seed_(seed), threads_(threads) {
    cfg_.validate();
    sampler_.validate(params_.config().vocab_size);
    if (cfg_.ablation != Ablation::kNoReasoning && sampler_.group_size < 2)
      throw ConfigError("sampler.group_size: advantage estimation needs a group of at least 2");
    if (world_.train.empty()) throw ConfigError("train split is empty");
    opt_ = AdamW<T>(params_, cfg_.adamw());
    item_prompts_.reserve(world_.catalog.items.size());
    for (const auto& it : world_.catalog.items) item_prompts_.push_back(render_item_prompt(it, world_.catalog.category));
    user_prompts_.reserve(world_.train.size());
    for (const auto& h : world_.train) {
      user_prompts_.push_back(render_user_prompt(h, world_.catalog));
      if (static_cast<int>(user_prompts_.back().size()) + sampler_.reasoning_budget > params_.config().max_context)
        throw ConfigError("model.max_context: user " + std::to_string(h.user_id) +
                          " prompt plus reasoning budget exceeds the context");
    }
  }

  const PolicyParams<T>& params() const { return params_; }
  PolicyParams<T>& params() { return params_; }
  const ItemEmbeddingTable<T>& table() const { return table_; }
  std::int64_t step_index() const { return step_; }
  const std::vector<TokenSequence>& item_prompts() const { return item_prompts_; }
  const std::vector<UserGroup<T>>& last_groups() const { return last_groups_; }
  const TrainConfig& config() const { return cfg_; }

  // Re-encodes the whole catalog under the current parameters.
  void refresh_table() { refresh_item_embeddings(params_, item_prompts_, table_, cfg_.pooling, threads_); }

  // Train users of step `s`, consecutive in a per-epoch seeded shuffle.
  std::vector<int> batch_indices(std::int64_t s) const {
    const auto n = static_cast<std::int64_t>(world_.train.size());
    std::vector<int> out;
    for (int j = 0; j < cfg_.batch_size; ++j) {
      const std::int64_t k = s * cfg_.batch_size + j;
      const auto& order = epoch_order(k / n);
      out.push_back(order[static_cast<std::size_t>(k % n)]);
    }
    return out;
  }

  StepRecord step() {
    const auto t0 = std::chrono::steady_clock::now();
    if (step_ % cfg_.refresh_period == 0 || table_.size() == 0) refresh_table();
    const auto idx = batch_indices(step_);
    StepRecord rec = cfg_.ablation == Ablation::kNoReasoning ? contrastive_step(idx) : recpo_step(idx);
    rec.step = step_;
    rec.table_generation = table_.generation;
    rec.param_version = params_.version();
    ++step_;
    rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rec;
  }

 private:
  const std::vector<int>& epoch_order(std::int64_t epoch) const {
    auto it = orders_.find(epoch);
    if (it != orders_.end()) return it->second;
    std::vector<int> order(world_.train.size());
    std::iota(order.begin(), order.end(), 0);
    auto rng = root_stream(seed_, StreamTag::kEpoch).child(static_cast<std::uint64_t>(epoch)).engine();
    std::shuffle(order.begin(), order.end(), rng);
    if (orders_.size() > 4) orders_.erase(orders_.begin());
    return orders_.emplace(epoch, std::move(order)).first->second;
  }

  // Writes live encodings of the batch targets into their table rows.
  void overwrite_targets(const std::vector<ItemId>& targets) {
    const auto items = encode_batch_items(params_, targets, item_prompts_, cfg_.pooling, threads_);
    for (std::size_t i = 0; i < items.ids.size(); ++i) table_.rows.row(items.ids[i]) = items.rows.row(static_cast<Eigen::Index>(i));
  }

  [[noreturn]] void fail_non_finite(const std::string& what, const StepRecord& rec) const {
    nlohmann::json state = rec.to_json();
    state["error"] = what;
    state["params_finite"] = params_.all_finite();
    state["table_finite"] = table_.rows.allFinite();
    nlohmann::json rewards = nlohmann::json::array();
    for (const auto& g : last_groups_) rewards.push_back(g.advantages.rewards);
    state["batch_rewards"] = rewards;
    throw NonFiniteError(what + " at step " + std::to_string(step_), state.dump(2));
  }

  StepRecord recpo_step(const std::vector<int>& idx) {
    StepRecord rec;
    const int U = static_cast<int>(idx.size());
    std::vector<ItemId> targets;
    for (int i : idx) targets.push_back(world_.train[static_cast<std::size_t>(i)].target);
    overwrite_targets(targets);

    const double beta = cfg_.effective_beta();
    const double tau = params_.config().tau_sim;
    std::vector<const TokenSequence*> seqs;
    for (int i : idx) seqs.push_back(&user_prompts_[static_cast<std::size_t>(i)]);
    const auto prefix = encode_shared_prefix(params_, seqs);
    std::vector<UserGroup<T>> groups(static_cast<std::size_t>(U));
    const Stream traj_root = root_stream(seed_, StreamTag::kTrajectory).child(static_cast<std::uint64_t>(step_));
    parallel_for(U, threads_, [&](int u) {
      const int ui = idx[static_cast<std::size_t>(u)];
      const auto& h = world_.train[static_cast<std::size_t>(ui)];
      auto& g = groups[static_cast<std::size_t>(u)];
      g.user_id = h.user_id;
      g.prompt = user_prompts_[static_cast<std::size_t>(ui)];
      g.target = h.target;
      g.trajectories = sample_group(params_, g.prompt, sampler_,
                                    traj_root.child(static_cast<std::uint64_t>(h.user_id)), 1, &prefix);
      std::vector<double> rewards;
      for (auto& tr : g.trajectories) {
        tr.target = h.target;
        const Vec<T> scores = score_items<T>(tr.final_hidden, table_);
        tr.reward = compute_reward<T>(scores, h.target, cfg_.reward_cutoff, beta, tau);
        rewards.push_back(tr.reward.fused);
      }
      g.advantages = compute_advantages(rewards, cfg_.estimator);
      for (std::size_t i = 0; i < g.trajectories.size(); ++i)
        g.trajectories[i].advantage = g.advantages.advantages[i];
    });

    std::vector<double> rewards, rd, rc, lengths;
    for (const auto& g : groups)
      for (const auto& tr : g.trajectories) {
        rewards.push_back(tr.reward.fused);
        rd.push_back(tr.reward.r_discrete);
        rc.push_back(tr.reward.r_continuous);
        lengths.push_back(tr.length());
      }
    rec.mean_reward = sorted_mean(rewards);
    rec.mean_r_discrete = sorted_mean(rd);
    rec.mean_r_continuous = sorted_mean(rc);
    rec.length = length_stats(lengths);
    last_groups_ = groups;

    ObjectiveConfig oc;
    oc.clip_eps = cfg_.clip_eps;
    oc.tau_sim = tau;
    oc.temperature = sampler_.temperature;
    oc.normalize_token_terms = cfg_.normalize_token_terms;
    oc.pooling = cfg_.pooling;
    oc.threads = threads_;
    PolicyValues<T> old;
    for (int e = 0; e < cfg_.inner_epochs; ++e) {
      rec.lr = learning_rate(opt_.config(), opt_.steps());
      Gradients<T> grads(params_.layout_ptr());
      auto res = recpo_objective(params_, groups, item_prompts_, oc, e == 0 ? nullptr : &old, &grads);
      if (e == 0) {
        old = std::move(res.values);
        rec.loss = -res.objective;
      }
      rec.clipped_terms += res.clipped_terms;
      rec.max_ratio_deviation = std::max(rec.max_ratio_deviation, res.max_ratio_deviation);
      if (!std::isfinite(res.objective)) fail_non_finite("non-finite objective", rec);
      rec.grad_norm = static_cast<double>(grads.flat().norm());
      if (!std::isfinite(rec.grad_norm)) fail_non_finite("non-finite gradient", rec);
      opt_.step(params_, grads, true);
      if (!params_.all_finite()) fail_non_finite("non-finite parameters", rec);
    }
    return rec;
  }

  StepRecord contrastive_step(const std::vector<int>& idx) {
    StepRecord rec;
    std::vector<TokenSequence> prompts;
    std::vector<ItemId> targets;
    for (int i : idx) {
      prompts.push_back(user_prompts_[static_cast<std::size_t>(i)]);
      targets.push_back(world_.train[static_cast<std::size_t>(i)].target);
    }
    overwrite_targets(targets);
    const double beta = cfg_.effective_beta();
    const double tau = params_.config().tau_sim;
    std::vector<double> rewards(prompts.size()), rd(prompts.size()), rc(prompts.size());
    parallel_for(static_cast<int>(prompts.size()), threads_, [&](int u) {
      const auto tr = inference_trajectory(params_, prompts[static_cast<std::size_t>(u)], 1, false);
      const auto r = compute_reward<T>(score_items<T>(tr.final_hidden, table_), targets[static_cast<std::size_t>(u)],
                                       cfg_.reward_cutoff, beta, tau);
      rewards[static_cast<std::size_t>(u)] = r.fused;
      rd[static_cast<std::size_t>(u)] = r.r_discrete;
      rc[static_cast<std::size_t>(u)] = r.r_continuous;
    });
    rec.mean_reward = sorted_mean(rewards);
    rec.mean_r_discrete = sorted_mean(rd);
    rec.mean_r_continuous = sorted_mean(rc);
    last_groups_.clear();
    for (int e = 0; e < cfg_.inner_epochs; ++e) {
      rec.lr = learning_rate(opt_.config(), opt_.steps());
      Gradients<T> grads(params_.layout_ptr());
      const double loss = contrastive_loss(params_, prompts, targets, item_prompts_, cfg_.pooling, tau, &grads, threads_);
      if (e == 0) rec.loss = loss;
      if (!std::isfinite(loss)) fail_non_finite("non-finite loss", rec);
      rec.grad_norm = static_cast<double>(grads.flat().norm());
      if (!std::isfinite(rec.grad_norm)) fail_non_finite("non-finite gradient", rec);
      opt_.step(params_, grads, false);
      if (!params_.all_finite()) fail_non_finite("non-finite parameters", rec);
    }
    return rec;
  }

  const World& world_;
  PolicyParams<T> params_;
  SamplerConfig sampler_;
  TrainConfig cfg_;
  std::uint64_t seed_;
  int threads_;
  AdamW<T> opt_;
  ItemEmbeddingTable<T> table_;
  std::vector<TokenSequence> item_prompts_, user_prompts_;
  std::vector<UserGroup<T>> last_groups_;
  std::int64_t step_ = 0;
  mutable std::map<std::int64_t, std::vector<int>> orders_;
};

}  // namespace reasonrec
