#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "reasonrec/common.hpp"
#include "reasonrec/params.hpp"
#include "reasonrec/transformer.hpp"

namespace reasonrec {

enum class Pooling { kLast, kMean, kMax };

inline std::string pooling_name(Pooling p) {
  switch (p) {
    case Pooling::kLast: return "last";
    case Pooling::kMean: return "mean";
    case Pooling::kMax: return "max";
  }
  return "last";
}

inline Pooling parse_pooling(std::string_view s) {
  if (s == "last") return Pooling::kLast;
  if (s == "mean") return Pooling::kMean;
  if (s == "max") return Pooling::kMax;
  throw ConfigError("unknown pooling '" + std::string(s) + "' (expected last|mean|max)");
}

template <class T>
Vec<T> pool_hidden(const Mat<T>& hidden, Pooling strategy) {
  if (hidden.rows() == 0) throw DimensionMismatch("pool_hidden: empty sequence");
  switch (strategy) {
    case Pooling::kLast: return hidden.row(hidden.rows() - 1).transpose();
    case Pooling::kMean: return hidden.colwise().mean().transpose();
    case Pooling::kMax: return hidden.colwise().maxCoeff().transpose();
  }
  return {};
}

// Gradient of pool_hidden w.r.t. every hidden row. Max pooling routes each
// column to its first maximal row.
template <class T>
Mat<T> pool_backward(const Mat<T>& hidden, Pooling strategy, const Vec<T>& d_pooled) {
  const auto n = hidden.rows(), d = hidden.cols();
  Mat<T> dh = Mat<T>::Zero(n, d);
  switch (strategy) {
    case Pooling::kLast:
      dh.row(n - 1) = d_pooled.transpose();
      break;
    case Pooling::kMean:
      dh.rowwise() = d_pooled.transpose() / static_cast<T>(n);
      break;
    case Pooling::kMax:
      for (Eigen::Index j = 0; j < d; ++j) {
        Eigen::Index arg = 0;
        hidden.col(j).maxCoeff(&arg);
        dh(arg, j) = d_pooled(j);
      }
      break;
  }
  return dh;
}

// Item embedding h_v: the backbone's pooled hidden state over the item prompt.
template <class T>
Vec<T> encode_item(const PolicyParams<T>& params, const TokenSequence& item_prompt, Pooling strategy) {
  if (item_prompt.empty()) throw DimensionMismatch("encode_item: empty item prompt");
  return pool_hidden<T>(forward(params, item_prompt).hidden, strategy);
}

// Recommendation head: H_V with one row per catalog item.
template <class T>
struct ItemEmbeddingTable {
  Mat<T> rows;
  std::uint64_t generation = 0;
  Pooling pooling = Pooling::kLast;
  // Parameter version the full table was last refreshed under.
  std::uint64_t param_version = 0;

  int size() const { return static_cast<int>(rows.rows()); }
  int width() const { return static_cast<int>(rows.cols()); }
};

// s(v) = h^T H_V[v] for every item, as one matrix-vector product.
template <class T>
Vec<T> score_items(const Eigen::Ref<const Vec<T>>& h, const Mat<T>& table_rows) {
  if (h.size() != table_rows.cols()) {
    throw DimensionMismatch("score_items: hidden width " + std::to_string(h.size()) +
                            " != table width " + std::to_string(table_rows.cols()));
  }
  Vec<T> s(table_rows.rows());
  s.noalias() = table_rows * h;
  return s;
}

template <class T>
Vec<T> score_items(const Eigen::Ref<const Vec<T>>& h, const ItemEmbeddingTable<T>& table) {
  return score_items<T>(h, table.rows);
}

// Re-encodes every catalog item under `params` and bumps the generation.
template <class T>
void refresh_item_embeddings(const PolicyParams<T>& params, const std::vector<TokenSequence>& item_prompts,
                             ItemEmbeddingTable<T>& table, Pooling strategy, int threads = 1) {
  const int n = static_cast<int>(item_prompts.size());
  std::vector<const TokenSequence*> seqs;
  for (const auto& s : item_prompts) {
    if (s.empty()) throw DimensionMismatch("encode_item: empty item prompt");
    seqs.push_back(&s);
  }
  const auto prefix = encode_shared_prefix(params, seqs);
  Mat<T> rows(n, params.config().width);
  parallel_for(n, threads, [&](int i) {
    const auto c = forward_suffix(params, prefix, item_prompts[static_cast<std::size_t>(i)]);
    if (strategy == Pooling::kLast)
      rows.row(i) = c.hidden.row(c.n - 1);
    else
      rows.row(i) = pool_hidden<T>(joined_hidden(prefix, c), strategy).transpose();
  });
  table.rows = std::move(rows);
  table.pooling = strategy;
  table.param_version = params.version();
  ++table.generation;
}

template <class T>
ItemEmbeddingTable<T> refresh_item_embeddings(const PolicyParams<T>& params,
                                              const std::vector<TokenSequence>& item_prompts, Pooling strategy,
                                              int threads = 1) {
  ItemEmbeddingTable<T> table;
  refresh_item_embeddings(params, item_prompts, table, strategy, threads);
  return table;
}

}  // namespace reasonrec
