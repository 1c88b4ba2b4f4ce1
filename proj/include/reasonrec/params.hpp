#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "reasonrec/common.hpp"
#include "reasonrec/tokenizer.hpp"

namespace reasonrec {

struct ModelConfig {
  int layers = 4;
  int heads = 4;
  int width = 64;
  int ff_width = 256;
  int vocab_size = Vocabulary::kSize;
  int max_context = 576;
  // Temperature of every item softmax (contrastive, in-batch, similarity reward).
  double tau_sim = 0.1;
  double init_std = 0.02;

  void validate() const {
    auto fail = [](const std::string& key, const std::string& why) {
      throw ConfigError("model." + key + ": " + why);
    };
    if (layers < 1) fail("layers", "must be >= 1");
    if (heads < 1) fail("heads", "must be >= 1");
    if (width < 1) fail("width", "must be >= 1");
    if (width % heads != 0) fail("width", "must be divisible by heads");
    if (ff_width < 1) fail("ff_width", "must be >= 1");
    if (vocab_size < Vocabulary::kSize) fail("vocab_size", "must cover the byte vocabulary");
    if (max_context < 1) fail("max_context", "must be >= 1");
    if (!(tau_sim > 0)) fail("tau_sim", "must be > 0");
    if (!(init_std > 0)) fail("init_std", "must be > 0");
  }

  bool operator==(const ModelConfig&) const = default;
};

// Offsets of every parameter block inside one flat buffer. Blocks start on
// 16-element boundaries so vectorized kernels see a fixed alignment.
struct ParamLayout {
  struct Block {
    std::string name;
    int rows = 0;
    int cols = 0;
    std::size_t offset = 0;
    std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
  };
  struct Layer {
    std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
  };

  explicit ParamLayout(const ModelConfig& c) {
    const int d = c.width, f = c.ff_width;
    wte = add("wte", c.vocab_size, d);
    wpe = add("wpe", c.max_context, d);
    for (int l = 0; l < c.layers; ++l) {
      const std::string p = "h" + std::to_string(l) + ".";
      Layer L{};
      L.ln1_g = add(p + "ln1.g", 1, d);
      L.ln1_b = add(p + "ln1.b", 1, d);
      L.w_qkv = add(p + "attn.w_qkv", d, 3 * d);
      L.b_qkv = add(p + "attn.b_qkv", 1, 3 * d);
      L.w_o = add(p + "attn.w_o", d, d);
      L.b_o = add(p + "attn.b_o", 1, d);
      L.ln2_g = add(p + "ln2.g", 1, d);
      L.ln2_b = add(p + "ln2.b", 1, d);
      L.w_fc = add(p + "mlp.w_fc", d, f);
      L.b_fc = add(p + "mlp.b_fc", 1, f);
      L.w_proj = add(p + "mlp.w_proj", f, d);
      L.b_proj = add(p + "mlp.b_proj", 1, d);
      layer.push_back(L);
    }
    lnf_g = add("lnf.g", 1, d);
    lnf_b = add("lnf.b", 1, d);
    w_lm = add("lm_head", c.vocab_size, d);
  }

  std::vector<Block> blocks;
  std::vector<Layer> layer;
  std::size_t wte = 0, wpe = 0, lnf_g = 0, lnf_b = 0, w_lm = 0;
  std::size_t total = 0;     // padded buffer length
  std::size_t num_params = 0;

 private:
  std::size_t add(std::string name, int rows, int cols) {
    const std::size_t off = total;
    blocks.push_back({std::move(name), rows, cols, off});
    const std::size_t n = blocks.back().size();
    num_params += n;
    total += (n + 15) / 16 * 16;
    return off;
  }
};

// A flat parameter-shaped buffer (parameters, gradients, optimizer moments).
template <class T>
class ParamBuffer {
 public:
  ParamBuffer() = default;
  explicit ParamBuffer(std::shared_ptr<const ParamLayout> layout)
      : layout_(std::move(layout)), data_(Vec<T>::Zero(static_cast<Eigen::Index>(layout_->total))) {}

  const ParamLayout& layout() const { return *layout_; }
  std::shared_ptr<const ParamLayout> layout_ptr() const { return layout_; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  Vec<T>& flat() { return data_; }
  const Vec<T>& flat() const { return data_; }

  MatMap<T> mat(std::size_t offset, int rows, int cols) { return MatMap<T>(data_.data() + offset, rows, cols); }
  ConstMatMap<T> mat(std::size_t offset, int rows, int cols) const {
    return ConstMatMap<T>(data_.data() + offset, rows, cols);
  }
  Eigen::Map<RowVec<T>> row(std::size_t offset, int cols) { return Eigen::Map<RowVec<T>>(data_.data() + offset, cols); }
  Eigen::Map<const RowVec<T>> row(std::size_t offset, int cols) const {
    return Eigen::Map<const RowVec<T>>(data_.data() + offset, cols);
  }
  MatMap<T> block(const ParamLayout::Block& b) { return mat(b.offset, b.rows, b.cols); }
  ConstMatMap<T> block(const ParamLayout::Block& b) const { return mat(b.offset, b.rows, b.cols); }

  void set_zero() { data_.setZero(); }

 private:
  std::shared_ptr<const ParamLayout> layout_;
  Vec<T> data_;
};

template <class T>
using Gradients = ParamBuffer<T>;

// All trainable parameters of the dual-head policy plus a version counter that
// the trainer bumps on every optimizer update. Copies are deep.
template <class T>
class PolicyParams : public ParamBuffer<T> {
 public:
  PolicyParams() = default;
  explicit PolicyParams(const ModelConfig& config)
      : ParamBuffer<T>(std::make_shared<const ParamLayout>(config)), config_(config) {
    config_.validate();
  }

  // GPT-2 style initialization: N(0, init_std) weights, residual projections
  // scaled by 1/sqrt(2 * layers), unit norm gains, zero biases.
  static PolicyParams initialize(const ModelConfig& config, std::uint64_t seed) {
    PolicyParams p(config);
    const auto& L = p.layout();
    auto rng = root_stream(seed, StreamTag::kInit).engine();
    std::normal_distribution<double> normal(0.0, config.init_std);
    const double resid_scale = 1.0 / std::sqrt(2.0 * config.layers);
    for (const auto& b : L.blocks) {
      auto m = p.block(b);
      const bool is_gain = b.name.ends_with(".g");
      const bool is_bias = b.name.ends_with(".b") || b.name.ends_with(".b_qkv") ||
                           b.name.ends_with(".b_o") || b.name.ends_with(".b_fc") ||
                           b.name.ends_with(".b_proj");
      const bool is_resid = b.name.ends_with(".w_o") || b.name.ends_with(".w_proj");
      for (Eigen::Index i = 0; i < m.size(); ++i) {
        if (is_gain) {
          m.data()[i] = T(1);
        } else if (is_bias) {
          m.data()[i] = T(0);
        } else {
          const double v = normal(rng);
          m.data()[i] = static_cast<T>(is_resid ? v * resid_scale : v);
        }
      }
    }
    return p;
  }

  const ModelConfig& config() const { return config_; }
  std::uint64_t version() const { return version_; }
  void set_version(std::uint64_t v) { version_ = v; }
  void bump_version() { ++version_; }

  PolicyParams snapshot() const { return *this; }
  void restore(const PolicyParams& snap) { *this = snap; }

  template <class U>
  PolicyParams<U> cast() const {
    PolicyParams<U> out(config_);
    out.flat() = this->flat().template cast<U>();
    out.set_version(version_);
    return out;
  }

  bool all_finite() const { return this->flat().allFinite(); }

 private:
  ModelConfig config_;
  std::uint64_t version_ = 0;
};

}  // namespace reasonrec
