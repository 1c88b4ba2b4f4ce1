#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "reasonrec/common.hpp"
#include "reasonrec/params.hpp"

namespace reasonrec {

struct AdamWConfig {
  double lr = 1e-5;
  int warmup_steps = 32;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  // Global gradient-norm clip; 0 disables.
  double max_grad_norm = 1.0;

  void validate() const {
    if (!(lr > 0)) throw ConfigError("train.lr: must be > 0");
    if (warmup_steps < 0) throw ConfigError("train.warmup_steps: must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("train.adam_beta1: must be in [0, 1)");
    if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("train.adam_beta2: must be in [0, 1)");
    if (!(eps > 0)) throw ConfigError("train.adam_eps: must be > 0");
    if (weight_decay < 0) throw ConfigError("train.weight_decay: must be >= 0");
    if (max_grad_norm < 0) throw ConfigError("train.max_grad_norm: must be >= 0");
  }
};

// Linear warm-up to the base rate, then constant.
inline double learning_rate(const AdamWConfig& c, std::int64_t step) {
  if (c.warmup_steps == 0) return c.lr;
  return c.lr * std::min(1.0, static_cast<double>(step + 1) / c.warmup_steps);
}

// Adam with decoupled weight decay. Norm gains and biases (1-row blocks) are
// not decayed.
template <class T>
class AdamW {
 public:
  AdamW() = default;
  AdamW(const PolicyParams<T>& params, AdamWConfig cfg)
      : cfg_(cfg), m_(params.layout_ptr()), v_(params.layout_ptr()), decay_mask_(params.layout_ptr()) {
    cfg_.validate();
    for (const auto& b : params.layout().blocks) {
      const bool decay = b.rows > 1 && b.name != "wpe";
      decay_mask_.block(b).setConstant(decay ? T(1) : T(0));
    }
  }

  // Ascends when `maximize`; returns the gradient norm before clipping.
  double step(PolicyParams<T>& params, const Gradients<T>& grads, bool maximize) {
    const double norm = static_cast<double>(grads.flat().norm());
    if (!std::isfinite(norm)) throw NonFiniteError("non-finite gradient norm", "{\"grad_norm\": null}");
    const double lr = learning_rate(cfg_, t_);
    ++t_;
    double scale = maximize ? -1.0 : 1.0;
    if (cfg_.max_grad_norm > 0 && norm > cfg_.max_grad_norm) scale *= cfg_.max_grad_norm / norm;
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T c1 = static_cast<T>(1.0 / (1.0 - std::pow(cfg_.beta1, static_cast<double>(t_))));
    const T c2 = static_cast<T>(1.0 / (1.0 - std::pow(cfg_.beta2, static_cast<double>(t_))));
    const T s = static_cast<T>(scale), eta = static_cast<T>(lr), wd = static_cast<T>(lr * cfg_.weight_decay);
    const T eps = static_cast<T>(cfg_.eps);
    auto g = grads.flat().array() * s;
    auto& m = m_.flat();
    auto& v = v_.flat();
    m.array() = b1 * m.array() + (T(1) - b1) * g;
    v.array() = b2 * v.array() + (T(1) - b2) * g.square();
    auto& p = params.flat();
    p.array() -= wd * decay_mask_.flat().array() * p.array();
    p.array() -= eta * (m.array() * c1) / ((v.array() * c2).sqrt() + eps);
    params.bump_version();
    return norm;
  }

  std::int64_t steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  AdamWConfig cfg_;
  ParamBuffer<T> m_, v_, decay_mask_;
  std::int64_t t_ = 0;
};

}  // namespace reasonrec
