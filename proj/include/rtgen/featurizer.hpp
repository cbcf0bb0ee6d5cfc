#pragma once

// Patch featurizer, transformer encoder and top-N object-query selection.

#include <rtgen/layers.hpp>
#include <rtgen/synthdata.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace rtgen {

struct ModelConfig {
  Index d = 64;
  Index queries = 25;
  Index text_tokens = 8;
  Index decoder_layers = 6;
  Index heads = 4;
  Index encoder_layers = 2;
  Index patch = 8;
  Index image_size = 64;
  Index vocab_size = 13;
  Index ffn_dim = 128;
  /// Add patch positions to the decoder's cross-attention queries and keys.
  bool cross_positions = true;

  Index grid() const { return image_size / patch; }
  Index num_patches() const { return grid() * grid(); }

  void validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError(msg); };
    if (d <= 0 || d % 4 != 0) fail("d must be a positive multiple of 4");
    if (heads <= 0 || d % heads != 0) fail("d must be divisible by heads");
    if (patch <= 0 || image_size <= 0 || image_size % patch != 0) fail("image size must be divisible by patch size");
    if (queries <= 0 || queries > num_patches()) fail("query count must be in [1, number of patches]");
    if (text_tokens < 2) fail("text_tokens must be at least 2");
    if (decoder_layers < 1) fail("decoder_layers must be at least 1");
    if (encoder_layers < 0) fail("encoder_layers must be non-negative");
    if (vocab_size < 3) fail("vocab_size must cover the reserved tokens and one word");
    if (ffn_dim <= 0) fail("ffn_dim must be positive");
  }
};

/// Fixed 2-D sinusoidal encodings for a grid x grid patch layout, [grid^2, d].
/// The first half of the features encodes the row, the second half the column.
template <typename T>
Matrix<T> sinusoidal_positions(Index grid, Index d) {
  Matrix<T> pe(grid * grid, d);
  const Index quarter = d / 4;
  for (Index gy = 0; gy < grid; ++gy) {
    for (Index gx = 0; gx < grid; ++gx) {
      const Index row = gy * grid + gx;
      for (Index i = 0; i < quarter; ++i) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(quarter));
        pe(row, 2 * i) = static_cast<T>(std::sin(gy * freq));
        pe(row, 2 * i + 1) = static_cast<T>(std::cos(gy * freq));
        pe(row, 2 * quarter + 2 * i) = static_cast<T>(std::sin(gx * freq));
        pe(row, 2 * quarter + 2 * i + 1) = static_cast<T>(std::cos(gx * freq));
      }
    }
  }
  return pe;
}

template <typename T>
struct FeatureMap {
  DiffArray<T> tokens;   // [patches, d], projection plus position encoding
  Matrix<T> positions;   // [patches, d]
};

template <typename T>
struct EncoderLayer {
  MultiHeadAttention<T> self_attn;
  LayerNorm<T> norm_attn;
  FeedForward<T> ffn;
  LayerNorm<T> norm_ffn;

  EncoderLayer() = default;
  EncoderLayer(const ModelConfig& cfg, std::mt19937_64& rng)
      : self_attn(cfg.d, cfg.heads, rng), norm_attn(cfg.d), ffn(cfg.d, cfg.ffn_dim, rng), norm_ffn(cfg.d) {}

  void collect(ParameterList<T>& list, const std::string& prefix) const {
    self_attn.collect(list, prefix + ".self_attn");
    norm_attn.collect(list, prefix + ".norm_attn");
    ffn.collect(list, prefix + ".ffn");
    norm_ffn.collect(list, prefix + ".norm_ffn");
  }
};

template <typename T>
struct FeaturizerParams {
  Linear<T> patch_proj;
  std::vector<EncoderLayer<T>> encoder;
  Linear<T> score;        // objectness logit per encoder token
  Linear<T> query_proj;

  FeaturizerParams() = default;
  FeaturizerParams(const ModelConfig& cfg, std::mt19937_64& rng)
      : patch_proj(cfg.patch * cfg.patch * 3, cfg.d, rng) {
    for (Index l = 0; l < cfg.encoder_layers; ++l) encoder.emplace_back(cfg, rng);
    score = Linear<T>(cfg.d, 1, rng);
    query_proj = Linear<T>(cfg.d, cfg.d, rng);
  }

  void collect(ParameterList<T>& list, const std::string& prefix) const {
    patch_proj.collect(list, prefix + ".patch_proj");
    for (std::size_t l = 0; l < encoder.size(); ++l) encoder[l].collect(list, prefix + ".encoder" + std::to_string(l));
    score.collect(list, prefix + ".score");
    query_proj.collect(list, prefix + ".query_proj");
  }
};

/// Flattens each P x P x 3 patch (row, column, channel order), projects it to
/// d and adds the patch's position encoding.
template <typename T>
FeatureMap<T> patch_embed(const Image& image, const FeaturizerParams<T>& params, const ModelConfig& cfg) {
  const Index p = cfg.patch;
  if (p <= 0 || image.width % p != 0 || image.height % p != 0) {
    throw ConfigError("image " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                      " is not divisible into " + std::to_string(p) + "-pixel patches");
  }
  if (image.width != cfg.image_size || image.height != cfg.image_size) {
    throw ConfigError("image size does not match model config");
  }
  const Index gx = image.width / p;
  const Index gy = image.height / p;
  Matrix<T> patches(gx * gy, p * p * 3);
  for (Index py = 0; py < gy; ++py) {
    for (Index px = 0; px < gx; ++px) {
      Index col = 0;
      for (Index y = 0; y < p; ++y) {
        for (Index x = 0; x < p; ++x) {
          for (int c = 0; c < 3; ++c) {
            patches(py * gx + px, col++) =
                static_cast<T>(image.value(static_cast<int>(py * p + y), static_cast<int>(px * p + x), c));
          }
        }
      }
    }
  }
  FeatureMap<T> fm;
  fm.positions = sinusoidal_positions<T>(cfg.grid(), cfg.d);
  fm.tokens = add(params.patch_proj(DiffArray<T>::constant(std::move(patches))), DiffArray<T>::constant(fm.positions));
  return fm;
}

/// Post-norm transformer encoder over the patch tokens.
template <typename T>
DiffArray<T> encode(const FeatureMap<T>& fm, const FeaturizerParams<T>& params) {
  DiffArray<T> x = fm.tokens;
  for (const auto& layer : params.encoder) {
    x = layer.norm_attn(add(x, attention(layer.self_attn, x, x, x)));
    x = layer.norm_ffn(add(x, layer.ffn(x)));
  }
  return x;
}

/// Indices of the `n` largest scores, descending, ties to the lower index.
inline std::vector<Index> top_n_indices(std::span<const double> scores, Index n) {
  if (n < 0 || n > static_cast<Index>(scores.size())) {
    throw ConfigError("cannot select " + std::to_string(n) + " of " + std::to_string(scores.size()) + " tokens");
  }
  std::vector<Index> order(scores.size());
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  order.resize(static_cast<std::size_t>(n));
  return order;
}

template <typename T>
struct QuerySelection {
  DiffArray<T> queries;        // [N, d], Q_1
  DiffArray<T> logits;         // [N, 1], selection logits of the chosen tokens
  std::vector<Index> indices;  // encoder token per query
  Matrix<T> all_logits;        // [patches, 1]
};

template <typename T>
QuerySelection<T> select_queries(const DiffArray<T>& features, const FeaturizerParams<T>& params,
                                 const ModelConfig& cfg) {
  if (cfg.queries > features.rows()) {
    throw ConfigError("query count " + std::to_string(cfg.queries) + " exceeds " + std::to_string(features.rows()) +
                      " encoder tokens");
  }
  DiffArray<T> logits = params.score(features);
  std::vector<double> scores(static_cast<std::size_t>(logits.rows()));
  for (Index i = 0; i < logits.rows(); ++i) scores[static_cast<std::size_t>(i)] = static_cast<double>(logits.value()(i, 0));
  QuerySelection<T> sel;
  sel.indices = top_n_indices(scores, cfg.queries);
  sel.all_logits = logits.value();
  DiffArray<T> chosen = gather_rows(features, sel.indices);
  sel.queries = params.query_proj(chosen);
  sel.logits = gather_rows(logits, sel.indices);
  return sel;
}

}  // namespace rtgen
