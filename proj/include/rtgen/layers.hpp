#pragma once

// Parameterized building blocks shared by the encoder, decoder and heads.

#include <rtgen/numcore.hpp>

#include <random>
#include <string>
#include <vector>

namespace rtgen {

template <typename T>
struct NamedParameter {
  std::string name;
  DiffArray<T> array;
};

template <typename T>
using ParameterList = std::vector<NamedParameter<T>>;

/// Uniform Glorot initialization for a fan_in x fan_out weight.
template <typename T>
Matrix<T> xavier_uniform(Index fan_in, Index fan_out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix<T> w(fan_in, fan_out);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(dist(rng));
  return w;
}

template <typename T>
struct Linear {
  DiffArray<T> weight;
  DiffArray<T> bias;

  Linear() = default;
  Linear(Index in, Index out, std::mt19937_64& rng)
      : weight(DiffArray<T>::parameter(xavier_uniform<T>(in, out, rng))),
        bias(DiffArray<T>::parameter(Matrix<T>::Zero(1, out), Shape{out})) {}

  DiffArray<T> operator()(const DiffArray<T>& x) const { return linear(x, weight, bias); }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

template <typename T>
struct LayerNorm {
  DiffArray<T> gamma;
  DiffArray<T> beta;

  LayerNorm() = default;
  explicit LayerNorm(Index d)
      : gamma(DiffArray<T>::parameter(Matrix<T>::Ones(1, d), Shape{d})),
        beta(DiffArray<T>::parameter(Matrix<T>::Zero(1, d), Shape{d})) {}

  DiffArray<T> operator()(const DiffArray<T>& x) const { return layer_norm(x, gamma, beta); }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
};

/// Two-layer ReLU MLP.
template <typename T>
struct FeedForward {
  Linear<T> in;
  Linear<T> out;

  FeedForward() = default;
  FeedForward(Index d, Index hidden, std::mt19937_64& rng) : in(d, hidden, rng), out(hidden, d, rng) {}

  DiffArray<T> operator()(const DiffArray<T>& x) const { return out(relu(in(x))); }

  void collect(ParameterList<T>& list, const std::string& prefix) const {
    in.collect(list, prefix + ".in");
    out.collect(list, prefix + ".out");
  }
};

template <typename T>
struct MultiHeadAttention {
  Linear<T> query;
  Linear<T> key;
  Linear<T> value;
  Linear<T> output;
  Index heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(Index d, Index num_heads, std::mt19937_64& rng)
      : query(d, d, rng), key(d, d, rng), value(d, d, rng), output(d, d, rng), heads(num_heads) {
    if (num_heads <= 0 || d % num_heads != 0) {
      throw ConfigError("width " + std::to_string(d) + " not divisible by " + std::to_string(num_heads) + " heads");
    }
  }

  void collect(ParameterList<T>& list, const std::string& prefix) const {
    query.collect(list, prefix + ".query");
    key.collect(list, prefix + ".key");
    value.collect(list, prefix + ".value");
    output.collect(list, prefix + ".output");
  }
};

/// Projected multi-head attention of `q` over `k`/`v`, each split into
/// `batches` independent sequences along the rows.
template <typename T>
DiffArray<T> attention(const MultiHeadAttention<T>& mha, const DiffArray<T>& q, const DiffArray<T>& k,
                       const DiffArray<T>& v, Index batches = 1, const Mask* mask = nullptr) {
  DiffArray<T> mixed = scaled_dot_attention(mha.query(q), mha.key(k), mha.value(v), batches, mha.heads, mask);
  return mha.output(mixed);
}

}  // namespace rtgen
