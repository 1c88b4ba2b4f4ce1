#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "reasonrec/common.hpp"
#include "reasonrec/params.hpp"

namespace reasonrec {

// Keys and values of positions [0, length) for every layer. Rows past
// `length` are scratch capacity.
template <class T>
struct KvState {
  int length = 0;
  std::vector<Mat<T>> keys, values;
};

// Gradient w.r.t. the keys/values of a run of positions, one matrix per layer.
template <class T>
struct KvGrad {
  KvGrad() = default;
  KvGrad(int layers, int rows, int width) {
    dk.assign(static_cast<std::size_t>(layers), Mat<T>::Zero(rows, width));
    dv.assign(static_cast<std::size_t>(layers), Mat<T>::Zero(rows, width));
  }
  std::vector<Mat<T>> dk, dv;
};

template <class T>
struct LayerCache {
  Mat<T> x_in;
  Mat<T> ln1;
  Vec<T> ln1_mean, ln1_rstd;
  Mat<T> q;             // own queries, n x d
  Mat<T> k_all, v_all;  // past + own, (start + n) x d
  std::vector<Mat<T>> probs;  // per head, n x (start + n)
  Mat<T> attn;
  Mat<T> x_mid;
  Mat<T> ln2;
  Vec<T> ln2_mean, ln2_rstd;
  Mat<T> fc_pre, fc_tanh, fc_act;
};

// Activations of one forward pass over positions [start, start + n).
template <class T>
struct SeqCache {
  int start = 0;
  int n = 0;
  TokenSequence tokens;
  std::vector<LayerCache<T>> layers;
  Mat<T> x_final;
  Mat<T> hidden;  // final-norm output; the model's hidden states
  Vec<T> lnf_mean, lnf_rstd;
};

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;

template <class T>
void layer_norm_forward(const Mat<T>& x, const Eigen::Map<const RowVec<T>>& g,
                        const Eigen::Map<const RowVec<T>>& b, Mat<T>& y, Vec<T>& mean, Vec<T>& rstd) {
  const auto n = x.rows(), d = x.cols();
  y.resize(n, d);
  mean.resize(n);
  rstd.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T m = x.row(i).mean();
    const auto xc = (x.row(i).array() - m).eval();
    const T var = xc.square().mean();
    const T r = T(1) / std::sqrt(var + T(kLayerNormEps));
    mean(i) = m;
    rstd(i) = r;
    y.row(i) = (xc * r * g.array() + b.array()).matrix();
  }
}

template <class T>
void layer_norm_backward(const Mat<T>& x, const Vec<T>& mean, const Vec<T>& rstd,
                         const Eigen::Map<const RowVec<T>>& g, const Mat<T>& dy, Mat<T>& dx,
                         Eigen::Map<RowVec<T>> dg, Eigen::Map<RowVec<T>> db) {
  const auto n = x.rows(), d = x.cols();
  dx.resize(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto xhat = ((x.row(i).array() - mean(i)) * rstd(i)).eval();
    dg.array() += dy.row(i).array() * xhat;
    db += dy.row(i);
    const auto dxhat = (dy.row(i).array() * g.array()).eval();
    const T m1 = dxhat.mean();
    const T m2 = (dxhat * xhat).mean();
    dx.row(i) = ((dxhat - m1 - xhat * m2) * rstd(i)).matrix();
  }
}

inline constexpr double kGeluK = 0.7978845608028654;  // sqrt(2 / pi)
inline constexpr double kGeluC = 0.044715;

template <class T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::tanh(T(kGeluK) * (x + T(kGeluC) * x * x * x)));
}

template <class T>
T gelu_grad(T x) {
  const T u = T(kGeluK) * (x + T(kGeluC) * x * x * x);
  const T t = std::tanh(u);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * T(kGeluK) * (T(1) + T(3 * kGeluC) * x * x);
}

}  // namespace detail

// Pre-norm decoder-only transformer over `tokens`, placed after the positions
// already held in `past` (if any). Causal: row t only sees positions <= t.
template <class T>
SeqCache<T> forward(const PolicyParams<T>& p, std::span<const TokenId> tokens,
                    std::type_identity_t<const KvState<T>*> past = nullptr) {
  const ModelConfig& cfg = p.config();
  const ParamLayout& L = p.layout();
  const int d = cfg.width, H = cfg.heads, hs = d / H, f = cfg.ff_width;
  const int start = past ? past->length : 0;
  const int n = static_cast<int>(tokens.size());
  const int N = start + n;
  if (N > cfg.max_context) {
    throw ContextOverflowError("sequence of " + std::to_string(N) + " positions exceeds max_context " +
                               std::to_string(cfg.max_context));
  }
  for (TokenId t : tokens)
    if (t < 0 || t >= cfg.vocab_size) throw DimensionMismatch("token id " + std::to_string(t) + " out of range");

  SeqCache<T> c;
  c.start = start;
  c.n = n;
  c.tokens.assign(tokens.begin(), tokens.end());
  c.layers.resize(static_cast<std::size_t>(cfg.layers));

  const auto wte = p.mat(L.wte, cfg.vocab_size, d);
  const auto wpe = p.mat(L.wpe, cfg.max_context, d);
  Mat<T> x(n, d);
  for (int i = 0; i < n; ++i) x.row(i) = wte.row(tokens[static_cast<std::size_t>(i)]) + wpe.row(start + i);

  const T scale = T(1) / std::sqrt(static_cast<T>(hs));
  for (int l = 0; l < cfg.layers; ++l) {
    const auto& W = L.layer[static_cast<std::size_t>(l)];
    auto& lc = c.layers[static_cast<std::size_t>(l)];
    lc.x_in = x;
    detail::layer_norm_forward<T>(x, p.row(W.ln1_g, d), p.row(W.ln1_b, d), lc.ln1, lc.ln1_mean, lc.ln1_rstd);

    Mat<T> qkv(n, 3 * d);
    qkv.noalias() = lc.ln1 * p.mat(W.w_qkv, d, 3 * d);
    qkv.rowwise() += p.row(W.b_qkv, 3 * d);
    lc.q = qkv.leftCols(d);
    lc.k_all.resize(N, d);
    lc.v_all.resize(N, d);
    if (start > 0) {
      lc.k_all.topRows(start) = past->keys[static_cast<std::size_t>(l)].topRows(start);
      lc.v_all.topRows(start) = past->values[static_cast<std::size_t>(l)].topRows(start);
    }
    lc.k_all.bottomRows(n) = qkv.middleCols(d, d);
    lc.v_all.bottomRows(n) = qkv.rightCols(d);

    lc.attn.resize(n, d);
    lc.probs.resize(static_cast<std::size_t>(H));
    for (int h = 0; h < H; ++h) {
      Mat<T>& P = lc.probs[static_cast<std::size_t>(h)];
      P.noalias() = lc.q.middleCols(h * hs, hs) * lc.k_all.middleCols(h * hs, hs).transpose();
      P *= scale;
      for (int i = 0; i < n; ++i) {
        const int valid = start + i + 1;
        auto row = P.row(i).head(valid);
        const T m = row.maxCoeff();
        row = (row.array() - m).exp().matrix();
        row /= row.sum();
        if (valid < N) P.row(i).tail(N - valid).setZero();
      }
      lc.attn.middleCols(h * hs, hs).noalias() = P * lc.v_all.middleCols(h * hs, hs);
    }

    lc.x_mid = lc.x_in;
    lc.x_mid.noalias() += lc.attn * p.mat(W.w_o, d, d);
    lc.x_mid.rowwise() += p.row(W.b_o, d);

    detail::layer_norm_forward<T>(lc.x_mid, p.row(W.ln2_g, d), p.row(W.ln2_b, d), lc.ln2, lc.ln2_mean,
                                  lc.ln2_rstd);
    lc.fc_pre.resize(n, f);
    lc.fc_pre.noalias() = lc.ln2 * p.mat(W.w_fc, d, f);
    lc.fc_pre.rowwise() += p.row(W.b_fc, f);
    {
      const auto pre = lc.fc_pre.array();
      lc.fc_tanh = (T(detail::kGeluK) * (pre + T(detail::kGeluC) * pre.cube())).tanh().matrix();
      lc.fc_act = (T(0.5) * pre * (T(1) + lc.fc_tanh.array())).matrix();
    }
    x = lc.x_mid;
    x.noalias() += lc.fc_act * p.mat(W.w_proj, f, d);
    x.rowwise() += p.row(W.b_proj, d);
  }
  c.x_final = std::move(x);
  detail::layer_norm_forward<T>(c.x_final, p.row(L.lnf_g, d), p.row(L.lnf_b, d), c.hidden, c.lnf_mean,
                                c.lnf_rstd);
  return c;
}

template <class T>
SeqCache<T> forward(const PolicyParams<T>& p, const TokenSequence& tokens,
                    std::type_identity_t<const KvState<T>*> past = nullptr) {
  return forward(p, std::span<const TokenId>(tokens.data(), tokens.size()), past);
}

// Reverse pass of `forward`. Accumulates parameter gradients into `g` given
// the gradient of the hidden states. Gradients reaching the keys/values of
// `past` positions are added to `past_grad`; `own_kv_grad` injects gradient
// that later continuations sent to this sequence's own keys/values.
template <class T>
void backward(const PolicyParams<T>& p, const SeqCache<T>& c, const Mat<T>& d_hidden, Gradients<T>& g,
              std::type_identity_t<KvGrad<T>*> past_grad = nullptr,
              std::type_identity_t<const KvGrad<T>*> own_kv_grad = nullptr) {
  const ModelConfig& cfg = p.config();
  const ParamLayout& L = p.layout();
  const int d = cfg.width, H = cfg.heads, hs = d / H, f = cfg.ff_width;
  const int n = c.n, start = c.start, N = start + n;
  if (d_hidden.rows() != n || d_hidden.cols() != d) throw DimensionMismatch("backward: d_hidden shape");
  if (start > 0 && past_grad == nullptr) throw DimensionMismatch("backward: past_grad required");

  Mat<T> dx;
  detail::layer_norm_backward<T>(c.x_final, c.lnf_mean, c.lnf_rstd, p.row(L.lnf_g, d), d_hidden, dx,
                                 g.row(L.lnf_g, d), g.row(L.lnf_b, d));

  const T scale = T(1) / std::sqrt(static_cast<T>(hs));
  Mat<T> d_act, d_pre, d_ln, d_tmp, d_attn, dS, dqkv(n, 3 * d), dk_all(N, d), dv_all(N, d);
  for (int l = cfg.layers - 1; l >= 0; --l) {
    const auto& W = L.layer[static_cast<std::size_t>(l)];
    const auto& lc = c.layers[static_cast<std::size_t>(l)];

    // x_out = x_mid + gelu(ln2 W_fc + b_fc) W_proj + b_proj
    g.mat(W.w_proj, f, d).noalias() += lc.fc_act.transpose() * dx;
    g.row(W.b_proj, d) += dx.colwise().sum();
    d_act.noalias() = dx * p.mat(W.w_proj, f, d).transpose();
    {
      const auto x = lc.fc_pre.array();
      const auto t = lc.fc_tanh.array();
      d_pre = (d_act.array() * (T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t.square()) * T(detail::kGeluK) *
                                                          (T(1) + T(3 * detail::kGeluC) * x.square())))
                  .matrix();
    }
    g.mat(W.w_fc, d, f).noalias() += lc.ln2.transpose() * d_pre;
    g.row(W.b_fc, f) += d_pre.colwise().sum();
    d_ln.noalias() = d_pre * p.mat(W.w_fc, d, f).transpose();
    detail::layer_norm_backward<T>(lc.x_mid, lc.ln2_mean, lc.ln2_rstd, p.row(W.ln2_g, d), d_ln, d_tmp,
                                   g.row(W.ln2_g, d), g.row(W.ln2_b, d));
    Mat<T> d_mid = dx + d_tmp;

    // x_mid = x_in + attn W_o + b_o
    g.mat(W.w_o, d, d).noalias() += lc.attn.transpose() * d_mid;
    g.row(W.b_o, d) += d_mid.colwise().sum();
    d_attn.noalias() = d_mid * p.mat(W.w_o, d, d).transpose();

    for (int h = 0; h < H; ++h) {
      const Mat<T>& P = lc.probs[static_cast<std::size_t>(h)];
      const auto dO = d_attn.middleCols(h * hs, hs);
      dv_all.middleCols(h * hs, hs).noalias() = P.transpose() * dO;
      dS.noalias() = dO * lc.v_all.middleCols(h * hs, hs).transpose();
      for (int i = 0; i < n; ++i) {
        const T dot = dS.row(i).dot(P.row(i));
        dS.row(i) = (P.row(i).array() * (dS.row(i).array() - dot)).matrix();
      }
      dS *= scale;
      dqkv.middleCols(h * hs, hs).noalias() = dS * lc.k_all.middleCols(h * hs, hs);
      dk_all.middleCols(h * hs, hs).noalias() = dS.transpose() * lc.q.middleCols(h * hs, hs);
    }
    if (start > 0) {
      past_grad->dk[static_cast<std::size_t>(l)] += dk_all.topRows(start);
      past_grad->dv[static_cast<std::size_t>(l)] += dv_all.topRows(start);
    }
    dqkv.middleCols(d, d) = dk_all.bottomRows(n);
    dqkv.rightCols(d) = dv_all.bottomRows(n);
    if (own_kv_grad) {
      dqkv.middleCols(d, d) += own_kv_grad->dk[static_cast<std::size_t>(l)];
      dqkv.rightCols(d) += own_kv_grad->dv[static_cast<std::size_t>(l)];
    }

    g.mat(W.w_qkv, d, 3 * d).noalias() += lc.ln1.transpose() * dqkv;
    g.row(W.b_qkv, 3 * d) += dqkv.colwise().sum();
    d_ln.noalias() = dqkv * p.mat(W.w_qkv, d, 3 * d).transpose();
    detail::layer_norm_backward<T>(lc.x_in, lc.ln1_mean, lc.ln1_rstd, p.row(W.ln1_g, d), d_ln, d_tmp,
                                   g.row(W.ln1_g, d), g.row(W.ln1_b, d));
    dx = d_mid + d_tmp;
  }

  auto gwte = g.mat(L.wte, cfg.vocab_size, d);
  auto gwpe = g.mat(L.wpe, cfg.max_context, d);
  for (int i = 0; i < n; ++i) {
    gwte.row(c.tokens[static_cast<std::size_t>(i)]) += dx.row(i);
    gwpe.row(start + i) += dx.row(i);
  }
}

// Language-modeling head: logits = hidden * W_lm^T.
template <class T>
Mat<T> lm_logits(const PolicyParams<T>& p, const Eigen::Ref<const Mat<T>>& hidden) {
  const auto& cfg = p.config();
  Mat<T> out(hidden.rows(), cfg.vocab_size);
  out.noalias() = hidden * p.mat(p.layout().w_lm, cfg.vocab_size, cfg.width).transpose();
  return out;
}

// Reverse of lm_logits for a subset of rows: d_hidden += dlogits W_lm and
// dW_lm += dlogits^T hidden.
template <class T>
void lm_backward(const PolicyParams<T>& p, const Eigen::Ref<const Mat<T>>& hidden, const Mat<T>& dlogits,
                 Eigen::Ref<Mat<T>> d_hidden, Gradients<T>& g) {
  const auto& cfg = p.config();
  const auto W = p.mat(p.layout().w_lm, cfg.vocab_size, cfg.width);
  d_hidden.noalias() += dlogits * W;
  g.mat(p.layout().w_lm, cfg.vocab_size, cfg.width).noalias() += dlogits.transpose() * hidden;
}

template <class T>
KvState<T> kv_state(const SeqCache<T>& c, int capacity = 0) {
  KvState<T> kv;
  kv.length = c.start + c.n;
  const int rows = std::max(capacity, kv.length);
  for (const auto& lc : c.layers) {
    Mat<T> k(rows, lc.k_all.cols()), v(rows, lc.v_all.cols());
    k.topRows(kv.length) = lc.k_all;
    v.topRows(kv.length) = lc.v_all;
    if (rows > kv.length) {
      k.bottomRows(rows - kv.length).setZero();
      v.bottomRows(rows - kv.length).setZero();
    }
    kv.keys.push_back(std::move(k));
    kv.values.push_back(std::move(v));
  }
  return kv;
}

// Appends the keys/values produced by `c` (which must have been run on top of
// `kv`) to `kv`.
template <class T>
void append_kv(KvState<T>& kv, const SeqCache<T>& c) {
  if (c.start != kv.length) throw DimensionMismatch("append_kv: cache does not continue this state");
  for (std::size_t l = 0; l < c.layers.size(); ++l) {
    auto& k = kv.keys[l];
    auto& v = kv.values[l];
    const int need = kv.length + c.n;
    if (k.rows() < need) {
      k.conservativeResize(need, Eigen::NoChange);
      v.conservativeResize(need, Eigen::NoChange);
    }
    k.middleRows(kv.length, c.n) = c.layers[l].k_all.bottomRows(c.n);
    v.middleRows(kv.length, c.n) = c.layers[l].v_all.bottomRows(c.n);
  }
  kv.length += c.n;
}

// Leading tokens shared by a set of sequences, encoded once. Each sequence
// then runs only its own suffix on top of `kv`.
template <class T>
struct SharedPrefix {
  SeqCache<T> cache;
  KvState<T> kv;

  int length() const { return cache.n; }
  const KvState<T>* past() const { return cache.n > 0 ? &kv : nullptr; }
};

// Longest common prefix of `seqs`, capped so every sequence keeps at least
// one token of its own.
inline int common_prefix_length(const std::vector<const TokenSequence*>& seqs) {
  if (seqs.empty()) return 0;
  std::size_t len = seqs.front()->size();
  for (const auto* s : seqs) {
    if (s->empty()) return 0;
    len = std::min(len, s->size() - 1);
    std::size_t k = 0;
    while (k < len && (*s)[k] == (*seqs.front())[k]) ++k;
    len = k;
  }
  return static_cast<int>(len);
}

template <class T>
SharedPrefix<T> encode_prefix(const PolicyParams<T>& p, const TokenSequence& seq, int length) {
  SharedPrefix<T> sp;
  if (length <= 0) return sp;
  sp.cache = forward(p, std::span<const TokenId>(seq.data(), static_cast<std::size_t>(length)));
  sp.kv = kv_state(sp.cache);
  return sp;
}

template <class T>
SharedPrefix<T> encode_shared_prefix(const PolicyParams<T>& p, const std::vector<const TokenSequence*>& seqs) {
  const int len = common_prefix_length(seqs);
  return len > 0 ? encode_prefix(p, *seqs.front(), len) : SharedPrefix<T>{};
}

// Forward pass over the part of `seq` after the shared prefix.
template <class T>
SeqCache<T> forward_suffix(const PolicyParams<T>& p, const SharedPrefix<T>& prefix, const TokenSequence& seq) {
  const auto k = static_cast<std::size_t>(prefix.length());
  if (seq.size() <= k) throw DimensionMismatch("forward_suffix: sequence not longer than the shared prefix");
  return forward(p, std::span<const TokenId>(seq.data() + k, seq.size() - k), prefix.past());
}

// Hidden states of every position: the prefix rows then the suffix rows.
template <class T>
Mat<T> joined_hidden(const SharedPrefix<T>& prefix, const SeqCache<T>& suffix) {
  if (prefix.length() == 0) return suffix.hidden;
  Mat<T> h(prefix.length() + suffix.n, suffix.hidden.cols());
  h.topRows(prefix.length()) = prefix.cache.hidden;
  h.bottomRows(suffix.n) = suffix.hidden;
  return h;
}

// Gradient flowing into a shared prefix from the sequences built on it.
template <class T>
struct PrefixGrad {
  KvGrad<T> kv;
  Mat<T> d_hidden;

  PrefixGrad() = default;
  PrefixGrad(const ModelConfig& cfg, int length)
      : kv(cfg.layers, length, cfg.width), d_hidden(Mat<T>::Zero(length, cfg.width)) {}

  void add(const PrefixGrad& o) {
    for (std::size_t l = 0; l < kv.dk.size(); ++l) {
      kv.dk[l] += o.kv.dk[l];
      kv.dv[l] += o.kv.dv[l];
    }
    d_hidden += o.d_hidden;
  }
};

// Backward through a suffix pass. `d_hidden` covers the suffix rows, or every
// row (prefix first) when it has prefix + suffix rows. `own_kv` optionally
// carries gradients w.r.t. the keys/values of all prefix + suffix positions.
template <class T>
void backward_suffix(const PolicyParams<T>& p, const SharedPrefix<T>& prefix, const SeqCache<T>& suffix,
                     const Mat<T>& d_hidden, Gradients<T>& g, PrefixGrad<T>& pg,
                     const KvGrad<T>* own_kv = nullptr) {
  const int k = prefix.length();
  Mat<T> d_own;
  if (d_hidden.rows() == k + suffix.n && k > 0) {
    pg.d_hidden += d_hidden.topRows(k);
    d_own = d_hidden.bottomRows(suffix.n);
  } else if (d_hidden.rows() == suffix.n) {
    d_own = d_hidden;
  } else {
    throw DimensionMismatch("backward_suffix: d_hidden rows");
  }
  KvGrad<T> own;
  if (own_kv) {
    for (std::size_t l = 0; l < own_kv->dk.size(); ++l) {
      own.dk.push_back(own_kv->dk[l].bottomRows(suffix.n));
      own.dv.push_back(own_kv->dv[l].bottomRows(suffix.n));
      if (k > 0) {
        pg.kv.dk[l] += own_kv->dk[l].topRows(k);
        pg.kv.dv[l] += own_kv->dv[l].topRows(k);
      }
    }
  }
  backward(p, suffix, d_own, g, k > 0 ? &pg.kv : nullptr, own_kv ? &own : nullptr);
}

// Backward through the shared prefix once all suffixes have contributed.
template <class T>
void backward_prefix(const PolicyParams<T>& p, const SharedPrefix<T>& prefix, const PrefixGrad<T>& pg,
                     Gradients<T>& g) {
  if (prefix.length() == 0) return;
  backward(p, prefix.cache, pg.d_hidden, g, nullptr, &pg.kv);
}

// Hidden states and next-token logits for every position of `tokens`.
template <class T>
std::pair<Mat<T>, Mat<T>> forward_outputs(const PolicyParams<T>& p, const TokenSequence& tokens) {
  auto c = forward(p, tokens);
  Mat<T> logits = lm_logits<T>(p, c.hidden);
  return {std::move(c.hidden), std::move(logits)};
}

}  // namespace reasonrec
