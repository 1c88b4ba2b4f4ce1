#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <type_traits>
#include <vector>

#include "reasonrec/common.hpp"
#include "reasonrec/model.hpp"
#include "reasonrec/params.hpp"
#include "reasonrec/reward.hpp"
#include "reasonrec/sampler.hpp"
#include "reasonrec/transformer.hpp"

namespace reasonrec {

// l_eps(r, A) = min(r A, clip(r, 1 - eps, 1 + eps) A)
inline double clipped_term(double r, double A, double eps) {
  if (!(eps > 0)) throw ConfigError("clipped_term: eps must be > 0");
  return std::min(r * A, std::clamp(r, 1.0 - eps, 1.0 + eps) * A);
}

// d l_eps / d r. Zero where the clipped branch is selected and constant.
inline double clipped_term_grad(double r, double A, double eps) {
  if (A >= 0) return r <= 1.0 + eps ? A : 0.0;
  return r >= 1.0 - eps ? A : 0.0;
}

inline bool clip_binds(double r, double A, double eps) {
  return A != 0 && clipped_term_grad(r, A, eps) == 0.0;
}

// log softmax over `rows` (one row per in-batch item) of h^T row / tau, read
// at the row of `target`.
template <class T>
T rec_log_prob(const Eigen::Ref<const Vec<T>>& h, const Mat<T>& rows, const std::vector<ItemId>& ids, ItemId target,
               double tau) {
  if (!(tau > 0)) throw ConfigError("rec_log_prob: tau must be > 0");
  if (rows.rows() != static_cast<Eigen::Index>(ids.size()) || rows.cols() != h.size())
    throw DimensionMismatch("rec_log_prob: batch shape");
  const auto it = std::find(ids.begin(), ids.end(), target);
  if (it == ids.end()) throw DimensionMismatch("rec_log_prob: target " + std::to_string(target) + " not in batch");
  const Vec<T> s = (rows * h) / static_cast<T>(tau);
  const T m = s.maxCoeff();
  const T lse = m + std::log((s.array() - m).exp().sum());
  return s(it - ids.begin()) - lse;
}

// Gradients of rec_log_prob: returns log-probability, writes d/dh and adds
// coef * d/drows into d_rows.
template <class T>
T rec_log_prob_backward(const Eigen::Ref<const Vec<T>>& h, const Mat<T>& rows, int target_row, double tau, T coef,
                        Vec<T>& d_h, Mat<T>& d_rows) {
  const T inv_tau = static_cast<T>(1.0 / tau);
  const Vec<T> s = (rows * h) * inv_tau;
  const T m = s.maxCoeff();
  Vec<T> p = (s.array() - m).exp().matrix();
  const T z = p.sum();
  p /= z;
  Vec<T> w = -p;
  w(target_row) += T(1);
  d_h = coef * inv_tau * (rows.transpose() * w);
  d_rows.noalias() += (coef * inv_tau) * w * h.transpose();
  return s(target_row) - m - std::log(z);
}

// In-batch item encodings computed live under the current parameters.
template <class T>
struct BatchItems {
  std::vector<ItemId> ids;  // unique, ascending
  SharedPrefix<T> prefix;
  std::vector<SeqCache<T>> caches;  // suffix passes on top of `prefix`
  Mat<T> rows;

  int index_of(ItemId v) const {
    const auto it = std::lower_bound(ids.begin(), ids.end(), v);
    if (it == ids.end() || *it != v) throw DimensionMismatch("item " + std::to_string(v) + " not in batch");
    return static_cast<int>(it - ids.begin());
  }
};

inline std::vector<ItemId> unique_items(std::vector<ItemId> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

template <class T>
BatchItems<T> encode_batch_items(const PolicyParams<T>& params, const std::vector<ItemId>& targets,
                                 const std::vector<TokenSequence>& item_prompts, Pooling pooling, int threads = 1) {
  BatchItems<T> b;
  b.ids = unique_items(targets);
  const int n = static_cast<int>(b.ids.size());
  std::vector<const TokenSequence*> seqs;
  for (ItemId v : b.ids) {
    if (v < 0 || static_cast<std::size_t>(v) >= item_prompts.size())
      throw DimensionMismatch("item " + std::to_string(v) + " outside catalog");
    if (item_prompts[static_cast<std::size_t>(v)].empty()) throw DimensionMismatch("encode_item: empty item prompt");
    seqs.push_back(&item_prompts[static_cast<std::size_t>(v)]);
  }
  b.prefix = encode_shared_prefix(params, seqs);
  b.caches.resize(static_cast<std::size_t>(n));
  b.rows.resize(n, params.config().width);
  parallel_for(n, threads, [&](int i) {
    auto& c = b.caches[static_cast<std::size_t>(i)];
    c = forward_suffix(params, b.prefix, *seqs[static_cast<std::size_t>(i)]);
    b.rows.row(i) = pool_hidden<T>(joined_hidden(b.prefix, c), pooling).transpose();
  });
  return b;
}

namespace detail {

template <class T>
void reduce_in_order(std::vector<Gradients<T>>& parts, Gradients<T>& out) {
  for (auto& p : parts) out.flat() += p.flat();
}

}  // namespace detail

// Backpropagates d_rows (gradient w.r.t. each live item embedding) through the
// item encoder into `grads`.
template <class T>
void backward_batch_items(const PolicyParams<T>& params, const BatchItems<T>& b, const Mat<T>& d_rows,
                          Pooling pooling, Gradients<T>& grads, int threads = 1) {
  const int n = static_cast<int>(b.ids.size());
  const int k = b.prefix.length();
  std::vector<Gradients<T>> parts(static_cast<std::size_t>(n));
  std::vector<PrefixGrad<T>> pgs(static_cast<std::size_t>(n));
  parallel_for(n, threads, [&](int i) {
    const auto& c = b.caches[static_cast<std::size_t>(i)];
    auto& g = parts[static_cast<std::size_t>(i)];
    auto& pg = pgs[static_cast<std::size_t>(i)];
    g = Gradients<T>(params.layout_ptr());
    pg = PrefixGrad<T>(params.config(), k);
    const Vec<T> dh = d_rows.row(i).transpose();
    if (dh.isZero(0)) return;
    backward_suffix(params, b.prefix, c, pool_backward<T>(joined_hidden(b.prefix, c), pooling, dh), g, pg);
  });
  detail::reduce_in_order(parts, grads);
  if (k == 0) return;
  PrefixGrad<T> total(params.config(), k);
  for (const auto& pg : pgs) total.add(pg);
  backward_prefix(params, b.prefix, total, grads);
}

// Mean over the batch of -log softmax_b(h_u^T h_b / tau) at the user's own
// target, h_u being the last hidden state of the user prompt. Adds the
// gradient to `grads` when given.
template <class T>
double contrastive_loss(const PolicyParams<T>& params, const std::vector<TokenSequence>& prompts,
                        const std::vector<ItemId>& targets, const std::vector<TokenSequence>& item_prompts,
                        Pooling pooling, double tau, std::type_identity_t<Gradients<T>*> grads = nullptr,
                        int threads = 1) {
  if (prompts.size() != targets.size() || prompts.empty())
    throw DimensionMismatch("contrastive_loss: prompts and targets must be non-empty and aligned");
  const int U = static_cast<int>(prompts.size());
  const auto items = encode_batch_items(params, targets, item_prompts, pooling, threads);
  std::vector<const TokenSequence*> seqs;
  for (const auto& s : prompts) seqs.push_back(&s);
  const auto prefix = encode_shared_prefix(params, seqs);
  const T coef = static_cast<T>(-1.0 / U);
  std::vector<double> losses(static_cast<std::size_t>(U));
  std::vector<Mat<T>> d_rows(static_cast<std::size_t>(U));
  std::vector<Gradients<T>> parts(static_cast<std::size_t>(U));
  std::vector<PrefixGrad<T>> pgs(static_cast<std::size_t>(U));
  parallel_for(U, threads, [&](int u) {
    const auto c = forward_suffix(params, prefix, prompts[static_cast<std::size_t>(u)]);
    const Vec<T> h = c.hidden.row(c.n - 1).transpose();
    const int row = items.index_of(targets[static_cast<std::size_t>(u)]);
    auto& dr = d_rows[static_cast<std::size_t>(u)];
    dr = Mat<T>::Zero(items.rows.rows(), items.rows.cols());
    Vec<T> dh;
    const T lp = rec_log_prob_backward<T>(h, items.rows, row, tau, coef, dh, dr);
    losses[static_cast<std::size_t>(u)] = -static_cast<double>(lp);
    if (grads) {
      auto& g = parts[static_cast<std::size_t>(u)];
      g = Gradients<T>(params.layout_ptr());
      Mat<T> dhidden = Mat<T>::Zero(c.n, c.hidden.cols());
      dhidden.row(c.n - 1) = dh.transpose();
      auto& pg = pgs[static_cast<std::size_t>(u)];
      pg = PrefixGrad<T>(params.config(), prefix.length());
      backward_suffix(params, prefix, c, dhidden, g, pg);
    }
  });
  double loss = 0.0;
  for (double l : losses) loss += l;
  loss /= U;
  if (grads) {
    detail::reduce_in_order(parts, *grads);
    PrefixGrad<T> pg(params.config(), prefix.length());
    for (const auto& x : pgs) pg.add(x);
    backward_prefix(params, prefix, pg, *grads);
    Mat<T> total = Mat<T>::Zero(items.rows.rows(), items.rows.cols());
    for (const auto& dr : d_rows) total += dr;
    backward_batch_items(params, items, total, pooling, *grads, threads);
  }
  return loss;
}

// One user's prompt, target and group of trajectories with their advantages.
template <class T>
struct UserGroup {
  int user_id = -1;
  TokenSequence prompt;
  ItemId target = -1;
  std::vector<Trajectory<T>> trajectories;
  AdvantageGroup advantages;
};

// Per-trajectory log-probabilities of every action under one policy.
template <class T>
struct GroupValues {
  std::vector<std::vector<T>> token_logps;
  std::vector<T> rec_logps;
};

template <class T>
using PolicyValues = std::vector<GroupValues<T>>;

struct ObjectiveConfig {
  double clip_eps = 0.2;
  double tau_sim = 0.1;
  // Sampling temperature; ratios are taken over the same restricted
  // distribution the tokens were drawn from.
  double temperature = 1.5;
  bool normalize_token_terms = false;
  Pooling pooling = Pooling::kLast;
  int threads = 1;
};

enum class Surrogate {
  kClipped,        // the clipped joint objective
  kAdvantageLogp,  // sum of A_i log pi over the same actions (policy gradient)
};

template <class T>
struct ObjectiveResult {
  double objective = 0.0;
  PolicyValues<T> values;  // log-probabilities under the evaluated params
  long token_terms = 0;
  long rec_terms = 0;
  long clipped_terms = 0;
  double max_ratio_deviation = 0.0;  // max |r - 1| over all evaluated terms
};

// Token log-probabilities of a trajectory's reasoning under `params`, each
// over the support the token was sampled from.
template <class T>
std::vector<T> token_logps(const PolicyParams<T>& params, const Trajectory<T>& tr, double temperature) {
  if (tr.support.size() != tr.reasoning.size()) throw DimensionMismatch("token_logps: support length mismatch");
  const int Tn = tr.length();
  std::vector<T> out(static_cast<std::size_t>(Tn));
  if (Tn == 0) return out;
  TokenSequence seq = tr.prompt;
  seq.insert(seq.end(), tr.reasoning.begin(), tr.reasoning.end());
  const auto c = forward(params, seq);
  const int np = static_cast<int>(tr.prompt.size());
  const Mat<T> logits = lm_logits<T>(params, c.hidden.middleRows(np - 1, Tn));
  for (int t = 0; t < Tn; ++t)
    out[static_cast<std::size_t>(t)] = restricted_log_prob<T>(logits.row(t), tr.support[static_cast<std::size_t>(t)],
                                                              tr.reasoning[static_cast<std::size_t>(t)], temperature);
  return out;
}

// r_t = exp(new log-prob - old log-prob) for each reasoning token.
template <class T>
std::vector<T> token_ratios(const PolicyParams<T>& params, const Trajectory<T>& tr, double temperature) {
  if (tr.old_logps.size() != tr.reasoning.size())
    throw DimensionMismatch("token_ratios: " + std::to_string(tr.old_logps.size()) + " old log-probs for " +
                            std::to_string(tr.reasoning.size()) + " tokens");
  auto lp = token_logps(params, tr, temperature);
  for (std::size_t t = 0; t < lp.size(); ++t) lp[t] = std::exp(lp[t] - tr.old_logps[t]);
  return lp;
}

namespace detail {

// Forward caches of one user: the prompt (past the shared prefix) once, each
// continuation on top of the prompt's keys/values.
template <class T>
struct UserPass {
  SeqCache<T> prompt;
  std::vector<SeqCache<T>> cont;

  Vec<T> final_hidden(int i, int length) const {
    if (length == 0) return prompt.hidden.row(prompt.n - 1).transpose();
    return cont[static_cast<std::size_t>(i)].hidden.row(length - 1).transpose();
  }
};

template <class T>
UserPass<T> run_user(const PolicyParams<T>& params, const SharedPrefix<T>& prefix, const UserGroup<T>& ug) {
  UserPass<T> up;
  up.prompt = forward_suffix(params, prefix, ug.prompt);
  const auto kv = kv_state(up.prompt);
  up.cont.resize(ug.trajectories.size());
  for (std::size_t i = 0; i < ug.trajectories.size(); ++i) {
    const auto& r = ug.trajectories[i].reasoning;
    if (!r.empty()) up.cont[i] = forward(params, r, &kv);
  }
  return up;
}

// Rows feeding the LM head for each reasoning token: the prompt's last
// hidden state then every continuation row but the last.
template <class T>
Mat<T> token_inputs(const UserPass<T>& up, int i, int length) {
  Mat<T> x(length, up.prompt.hidden.cols());
  x.row(0) = up.prompt.hidden.row(up.prompt.n - 1);
  if (length > 1) x.bottomRows(length - 1) = up.cont[static_cast<std::size_t>(i)].hidden.topRows(length - 1);
  return x;
}

template <class T>
void check_group(const UserGroup<T>& ug, const GroupValues<T>* old) {
  const std::size_t G = ug.trajectories.size();
  if (G == 0) throw DimensionMismatch("recpo_objective: empty trajectory group");
  if (ug.advantages.advantages.size() != G)
    throw DimensionMismatch("recpo_objective: advantages missing for group");
  for (const auto& tr : ug.trajectories)
    if (tr.support.size() != tr.reasoning.size()) throw DimensionMismatch("recpo_objective: support length mismatch");
  if (old) {
    if (old->token_logps.size() != G || old->rec_logps.size() != G)
      throw DimensionMismatch("recpo_objective: missing old-policy data");
    for (std::size_t i = 0; i < G; ++i)
      if (old->token_logps[i].size() != ug.trajectories[i].reasoning.size())
        throw DimensionMismatch("recpo_objective: old log-prob length mismatch");
  }
}

}  // namespace detail

// The joint objective (maximized):
//   mean_u (1/G) sum_i [ sum_t l_eps(r_it, A_i) + [i = i*] l_eps(r_i,T+1, A_i) ]
// r_it compares token probabilities and r_i,T+1 the in-batch recommendation
// probability of the target under the current and old policies. With
// `old == nullptr` the current params are taken as the old policy, so every
// ratio is exactly 1. Adds the gradient of the objective to `grads` if given.
template <class T>
ObjectiveResult<T> recpo_objective(const PolicyParams<T>& params, const std::vector<UserGroup<T>>& groups,
                                   const std::vector<TokenSequence>& item_prompts, const ObjectiveConfig& cfg,
                                   std::type_identity_t<const PolicyValues<T>*> old,
                                   std::type_identity_t<Gradients<T>*> grads,
                                   Surrogate surrogate = Surrogate::kClipped) {
  if (groups.empty()) throw DimensionMismatch("recpo_objective: empty batch");
  if (old && old->size() != groups.size()) throw DimensionMismatch("recpo_objective: missing old-policy data");
  if (!(cfg.clip_eps > 0)) throw ConfigError("recpo_objective: clip_eps must be > 0");
  const int U = static_cast<int>(groups.size());
  for (int u = 0; u < U; ++u)
    detail::check_group(groups[static_cast<std::size_t>(u)], old ? &(*old)[static_cast<std::size_t>(u)] : nullptr);

  std::vector<ItemId> targets;
  for (const auto& g : groups) targets.push_back(g.target);
  const auto items = encode_batch_items(params, targets, item_prompts, cfg.pooling, cfg.threads);
  std::vector<const TokenSequence*> seqs;
  for (const auto& g : groups) seqs.push_back(&g.prompt);
  const auto prefix = encode_shared_prefix(params, seqs);
  const int d = params.config().width;

  struct UserOut {
    double objective = 0;
    GroupValues<T> values;
    long token_terms = 0, clipped = 0;
    double max_dev = 0;
    Mat<T> d_rows;
    Gradients<T> grads;
    PrefixGrad<T> prefix_grad;
  };
  std::vector<UserOut> outs(static_cast<std::size_t>(U));

  parallel_for(U, cfg.threads, [&](int u) {
    const auto& ug = groups[static_cast<std::size_t>(u)];
    const GroupValues<T>* ov = old ? &(*old)[static_cast<std::size_t>(u)] : nullptr;
    auto& out = outs[static_cast<std::size_t>(u)];
    const int G = static_cast<int>(ug.trajectories.size());
    const int istar = ug.advantages.i_star;
    const int trow = items.index_of(ug.target);
    const double coef = 1.0 / (static_cast<double>(U) * G);
    const auto up = detail::run_user(params, prefix, ug);

    Mat<T> d_prompt;
    std::vector<Mat<T>> d_cont(static_cast<std::size_t>(G));
    if (grads) {
      out.grads = Gradients<T>(params.layout_ptr());
      out.d_rows = Mat<T>::Zero(items.rows.rows(), d);
      d_prompt = Mat<T>::Zero(up.prompt.n, d);
    }
    out.values.token_logps.resize(static_cast<std::size_t>(G));
    out.values.rec_logps.resize(static_cast<std::size_t>(G));

    for (int i = 0; i < G; ++i) {
      const auto& tr = ug.trajectories[static_cast<std::size_t>(i)];
      const double A = ug.advantages.advantages[static_cast<std::size_t>(i)];
      const int Tn = tr.length();
      const double tok_scale = (cfg.normalize_token_terms && Tn > 0) ? 1.0 / Tn : 1.0;
      if (grads) d_cont[static_cast<std::size_t>(i)] = Mat<T>::Zero(Tn, d);

      // Reasoning tokens.
      auto& lps = out.values.token_logps[static_cast<std::size_t>(i)];
      lps.resize(static_cast<std::size_t>(Tn));
      if (Tn > 0) {
        const Mat<T> x = detail::token_inputs(up, i, Tn);
        const Mat<T> logits = lm_logits<T>(params, x);
        Mat<T> dlogits;
        if (grads) dlogits = Mat<T>::Zero(Tn, logits.cols());
        for (int t = 0; t < Tn; ++t) {
          const auto& support = tr.support[static_cast<std::size_t>(t)];
          const TokenId tok = tr.reasoning[static_cast<std::size_t>(t)];
          const T lp = restricted_log_prob<T>(logits.row(t), support, tok, cfg.temperature);
          lps[static_cast<std::size_t>(t)] = lp;
          const T olp = ov ? ov->token_logps[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)] : lp;
          const double r = std::exp(static_cast<double>(lp - olp));
          double dterm;  // d(term)/d(lp)
          if (surrogate == Surrogate::kClipped) {
            out.objective += coef * tok_scale * clipped_term(r, A, cfg.clip_eps);
            dterm = clipped_term_grad(r, A, cfg.clip_eps) * r;
            if (clip_binds(r, A, cfg.clip_eps)) ++out.clipped;
          } else {
            out.objective += coef * tok_scale * A * static_cast<double>(lp);
            dterm = A;
          }
          out.max_dev = std::max(out.max_dev, std::abs(r - 1.0));
          ++out.token_terms;
          if (grads && dterm != 0.0 && support.size() > 1) {
            // d lp / d logit_j = (1[j = tok] - p_j) / temperature on the support.
            const double inv_t = 1.0 / cfg.temperature;
            T m = -std::numeric_limits<T>::infinity();
            for (TokenId id : support) m = std::max(m, logits(t, id) * static_cast<T>(inv_t));
            T z = 0;
            for (TokenId id : support) z += std::exp(logits(t, id) * static_cast<T>(inv_t) - m);
            const T w = static_cast<T>(coef * tok_scale * dterm * inv_t);
            for (TokenId id : support) {
              const T p = std::exp(logits(t, id) * static_cast<T>(inv_t) - m) / z;
              dlogits(t, id) += w * ((id == tok ? T(1) : T(0)) - p);
            }
          }
        }
        if (grads) {
          Mat<T> dx = Mat<T>::Zero(Tn, d);
          lm_backward<T>(params, x, dlogits, dx, out.grads);
          d_prompt.row(up.prompt.n - 1) += dx.row(0);
          if (Tn > 1) d_cont[static_cast<std::size_t>(i)].topRows(Tn - 1) += dx.bottomRows(Tn - 1);
        }
      }

      // Recommendation action, gated to the best trajectory.
      const Vec<T> h = up.final_hidden(i, Tn);
      const bool gated = (i == istar);
      double dterm = 0.0;
      T lp_rec;
      if (gated) {
        // Value first, then the gradient once the ratio is known.
        lp_rec = rec_log_prob<T>(h, items.rows, items.ids, ug.target, cfg.tau_sim);
        const T olp = ov ? ov->rec_logps[static_cast<std::size_t>(i)] : lp_rec;
        const double r = std::exp(static_cast<double>(lp_rec - olp));
        if (surrogate == Surrogate::kClipped) {
          out.objective += coef * clipped_term(r, A, cfg.clip_eps);
          dterm = clipped_term_grad(r, A, cfg.clip_eps) * r;
          if (clip_binds(r, A, cfg.clip_eps)) ++out.clipped;
        } else {
          out.objective += coef * A * static_cast<double>(lp_rec);
          dterm = A;
        }
        out.max_dev = std::max(out.max_dev, std::abs(r - 1.0));
        if (grads && dterm != 0.0) {
          Vec<T> dh;
          rec_log_prob_backward<T>(h, items.rows, trow, cfg.tau_sim, static_cast<T>(coef * dterm), dh, out.d_rows);
          if (Tn == 0)
            d_prompt.row(up.prompt.n - 1) += dh.transpose();
          else
            d_cont[static_cast<std::size_t>(i)].row(Tn - 1) += dh.transpose();
        }
      } else {
        lp_rec = rec_log_prob<T>(h, items.rows, items.ids, ug.target, cfg.tau_sim);
      }
      out.values.rec_logps[static_cast<std::size_t>(i)] = lp_rec;
    }

    if (grads) {
      KvGrad<T> kvg(params.config().layers, up.prompt.start + up.prompt.n, d);
      for (int i = 0; i < G; ++i) {
        if (ug.trajectories[static_cast<std::size_t>(i)].length() == 0) continue;
        backward(params, up.cont[static_cast<std::size_t>(i)], d_cont[static_cast<std::size_t>(i)], out.grads, &kvg);
      }
      out.prefix_grad = PrefixGrad<T>(params.config(), prefix.length());
      backward_suffix(params, prefix, up.prompt, d_prompt, out.grads, out.prefix_grad, &kvg);
    }
  });

  ObjectiveResult<T> res;
  res.values.resize(static_cast<std::size_t>(U));
  for (int u = 0; u < U; ++u) {
    auto& o = outs[static_cast<std::size_t>(u)];
    res.objective += o.objective;
    res.token_terms += o.token_terms;
    res.clipped_terms += o.clipped;
    res.rec_terms += 1;
    res.max_ratio_deviation = std::max(res.max_ratio_deviation, o.max_dev);
    res.values[static_cast<std::size_t>(u)] = std::move(o.values);
  }
  if (grads) {
    Mat<T> d_rows = Mat<T>::Zero(items.rows.rows(), d);
    PrefixGrad<T> pg(params.config(), prefix.length());
    for (int u = 0; u < U; ++u) {
      auto& o = outs[static_cast<std::size_t>(u)];
      grads->flat() += o.grads.flat();
      d_rows += o.d_rows;
      pg.add(o.prefix_grad);
    }
    backward_prefix(params, prefix, pg, *grads);
    backward_batch_items(params, items, d_rows, cfg.pooling, *grads, cfg.threads);
  }
  return res;
}

}  // namespace reasonrec
