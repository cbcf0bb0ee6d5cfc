#pragma once

// Region-language decoder: object queries and per-query text embeddings are
// refined together, layer by layer. Each layer first updates the queries from
// themselves and the image features, then lets every query talk to its own
// K text slots through the same self-attention, and keeps only the text part.

#include <rtgen/featurizer.hpp>

#include <random>
#include <string>
#include <utility>
#include <vector>

namespace rtgen {

template <typename T>
struct QueryState {
  DiffArray<T> queries;  // [N, d]
};

template <typename T>
struct TextState {
  DiffArray<T> embeddings;  // [N, K, d]; rows are (query, slot) pairs

  Index queries() const { return embeddings.dim(0); }
  Index slots() const { return embeddings.dim(1); }
};

template <typename T>
struct DecoderLayerParams {
  MultiHeadAttention<T> self_attn;  // shared by the region and cross-modal stages
  MultiHeadAttention<T> cross_attn;
  FeedForward<T> ffn_region;
  FeedForward<T> ffn_cross;
  LayerNorm<T> norm_self;
  LayerNorm<T> norm_cross;
  LayerNorm<T> norm_region;
  LayerNorm<T> norm_fuse;
  LayerNorm<T> norm_fuse_ffn;

  DecoderLayerParams() = default;
  DecoderLayerParams(const ModelConfig& cfg, std::mt19937_64& rng)
      : self_attn(cfg.d, cfg.heads, rng),
        cross_attn(cfg.d, cfg.heads, rng),
        ffn_region(cfg.d, cfg.ffn_dim, rng),
        ffn_cross(cfg.d, cfg.ffn_dim, rng),
        norm_self(cfg.d),
        norm_cross(cfg.d),
        norm_region(cfg.d),
        norm_fuse(cfg.d),
        norm_fuse_ffn(cfg.d) {}

  void collect(ParameterList<T>& list, const std::string& prefix) const {
    self_attn.collect(list, prefix + ".self_attn");
    cross_attn.collect(list, prefix + ".cross_attn");
    ffn_region.collect(list, prefix + ".ffn_region");
    ffn_cross.collect(list, prefix + ".ffn_cross");
    norm_self.collect(list, prefix + ".norm_self");
    norm_cross.collect(list, prefix + ".norm_cross");
    norm_region.collect(list, prefix + ".norm_region");
    norm_fuse.collect(list, prefix + ".norm_fuse");
    norm_fuse_ffn.collect(list, prefix + ".norm_fuse_ffn");
  }
};

/// Learned slot embeddings e_1..e_K, [K, d].
template <typename T>
DiffArray<T> make_slot_embeddings(const ModelConfig& cfg, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix<T> e(cfg.text_tokens, cfg.d);
  for (Index i = 0; i < e.size(); ++i) e.data()[i] = static_cast<T>(dist(rng));
  return DiffArray<T>::parameter(std::move(e));
}

/// T_1[n, k] = e_k for every query n.
template <typename T>
TextState<T> init_text_state(const DiffArray<T>& slots, Index queries) {
  const Index k = slots.rows();
  std::vector<Index> rows;
  rows.reserve(static_cast<std::size_t>(queries * k));
  for (Index n = 0; n < queries; ++n) {
    for (Index s = 0; s < k; ++s) rows.push_back(s);
  }
  return {reshape(gather_rows(slots, std::move(rows)), Shape{queries, k, slots.cols()})};
}

/// Position encodings added to the cross-attention queries [N, d] and keys
/// [patches, d]; values stay position-free.
template <typename T>
struct CrossPositions {
  DiffArray<T> queries;
  DiffArray<T> memory;
};

/// One decoder layer; `memory` is the encoder output [patches, d].
template <typename T>
std::pair<QueryState<T>, TextState<T>> decoder_layer(const QueryState<T>& state, const TextState<T>& text,
                                                     const DiffArray<T>& memory, const DecoderLayerParams<T>& p,
                                                     const CrossPositions<T>* pos = nullptr) {
  const DiffArray<T>& q = state.queries;
  const Index n = q.rows();
  const Index d = q.cols();
  if (text.embeddings.rank() != 3 || text.queries() != n || text.embeddings.dim(2) != d || memory.cols() != d) {
    throw DimensionError("decoder_layer: Q " + shape_string(q.shape()) + ", T " + shape_string(text.embeddings.shape()) +
                         ", M " + shape_string(memory.shape()));
  }
  const Index k = text.slots();

  // Region-aware update.
  DiffArray<T> x = p.norm_self(add(q, attention(p.self_attn, q, q, q)));
  if (pos) {
    x = p.norm_cross(add(x, attention(p.cross_attn, add(x, pos->queries), add(memory, pos->memory), memory)));
  } else {
    x = p.norm_cross(add(x, attention(p.cross_attn, x, memory, memory)));
  }
  DiffArray<T> q_next = p.norm_region(add(x, p.ffn_region(x)));

  // Language fusion: per query, the sequence [Q_{l+1}[n], T_l[n, 1..K]].
  std::vector<Index> order;
  order.reserve(static_cast<std::size_t>(n * (k + 1)));
  for (Index i = 0; i < n; ++i) {
    order.push_back(i);
    for (Index s = 0; s < k; ++s) order.push_back(n + i * k + s);
  }
  DiffArray<T> h = gather_rows(concat_rows(q_next, reshape(text.embeddings, Shape{n * k, d})), std::move(order));

  // Cross-modal interaction, independently per query.
  h = p.norm_fuse(add(h, attention(p.self_attn, h, h, h, n)));
  h = p.norm_fuse_ffn(add(h, p.ffn_cross(h)));

  // Feature separation: drop the query slot.
  std::vector<Index> text_rows;
  text_rows.reserve(static_cast<std::size_t>(n * k));
  for (Index i = 0; i < n; ++i) {
    for (Index s = 0; s < k; ++s) text_rows.push_back(i * (k + 1) + 1 + s);
  }
  DiffArray<T> t_next = reshape(gather_rows(h, std::move(text_rows)), Shape{n, k, d});
  return {QueryState<T>{q_next}, TextState<T>{t_next}};
}

template <typename T>
std::pair<QueryState<T>, TextState<T>> run_decoder(const QueryState<T>& q1, const TextState<T>& t1,
                                                   const DiffArray<T>& memory,
                                                   const std::vector<DecoderLayerParams<T>>& layers,
                                                   const CrossPositions<T>* pos = nullptr) {
  if (layers.empty()) throw ConfigError("decoder needs at least one layer");
  std::pair<QueryState<T>, TextState<T>> state{q1, t1};
  for (const auto& layer : layers) state = decoder_layer(state.first, state.second, memory, layer, pos);
  return state;
}

}  // namespace rtgen
