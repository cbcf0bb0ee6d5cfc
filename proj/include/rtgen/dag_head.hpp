#pragma once

// DAG text head. Each region's K text embeddings become the vertices of a
// directed acyclic graph: edges only go forward (i -> j with j > i), every
// vertex emits a distribution over the vocabulary, and a name is read along a
// path from the first vertex to the last one.
//
// Everything is kept in log space. Transition rows without a legal successor
// (the last vertex) are all -inf.

#include <rtgen/layers.hpp>
#include <rtgen/types.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rtgen {

class TargetLengthError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
struct DagHeadParams {
  DiffArray<T> w_query;  // [d, d]
  DiffArray<T> w_key;    // [d, d]
  DiffArray<T> w_emit;   // [d, V]

  DagHeadParams() = default;
  DagHeadParams(Index d, Index vocab, std::mt19937_64& rng)
      : w_query(DiffArray<T>::parameter(xavier_uniform<T>(d, d, rng))),
        w_key(DiffArray<T>::parameter(xavier_uniform<T>(d, d, rng))),
        w_emit(DiffArray<T>::parameter(xavier_uniform<T>(d, vocab, rng))) {}

  void collect(ParameterList<T>& list, const std::string& prefix) const {
    list.push_back({prefix + ".w_query", w_query});
    list.push_back({prefix + ".w_key", w_key});
    list.push_back({prefix + ".w_emit", w_emit});
  }
};

template <typename T>
struct TokenDAG {
  DiffArray<T> log_transitions;  // [K, K]
  DiffArray<T> log_emissions;    // [K, V]

  Index vertices() const { return log_transitions.rows(); }
  Index vocab_size() const { return log_emissions.cols(); }
  Matrix<T> transitions() const { return log_transitions.value().unaryExpr([](T v) { return std::exp(v); }); }
  Matrix<T> emissions() const { return log_emissions.value().unaryExpr([](T v) { return std::exp(v); }); }
};

struct NamePrediction {
  TokenSequence token_ids;
  std::vector<Index> path;  // 0-based vertex indices, first 0, last K-1
  double log_score = 0.0;
};

/// Strictly upper-triangular K x K pattern of legal edges.
inline Mask forward_edge_mask(Index k) {
  Mask m = Mask::Constant(k, k, false);
  for (Index i = 0; i < k; ++i) {
    for (Index j = i + 1; j < k; ++j) m(i, j) = true;
  }
  return m;
}

/// DAGs for `regions` stacked regions: `text` is [regions*K, d]. The
/// transition scores are scaled by 1/sqrt(d).
template <typename T>
std::vector<TokenDAG<T>> build_dags(const DiffArray<T>& text, Index regions, const DagHeadParams<T>& params) {
  if (regions <= 0 || text.rows() % regions != 0) throw DimensionError("build_dags: rows not divisible by regions");
  const Index k = text.rows() / regions;
  if (k < 2) throw ConfigError("a token DAG needs at least 2 vertices");
  DiffArray<T> flat = text.rank() == 2 ? text : reshape(text, Shape{text.rows(), text.cols()});
  const T scale = T(1) / std::sqrt(static_cast<T>(text.cols()));
  DiffArray<T> scores = batched_scores(matmul(flat, params.w_query), matmul(flat, params.w_key), regions, scale);
  const Mask mask = forward_edge_mask(k);
  DiffArray<T> log_e = log_softmax(scores, &mask);
  DiffArray<T> log_em = log_softmax(matmul(flat, params.w_emit));
  std::vector<TokenDAG<T>> dags;
  dags.reserve(static_cast<std::size_t>(regions));
  for (Index r = 0; r < regions; ++r) {
    dags.push_back({slice_rows(log_e, r * k, k), slice_rows(log_em, r * k, k)});
  }
  return dags;
}

/// DAG for a single region's [K, d] embeddings.
template <typename T>
TokenDAG<T> build_dag(const DiffArray<T>& region_text, const DagHeadParams<T>& params) {
  return build_dags(region_text, 1, params).front();
}

namespace detail {

template <typename T>
T log_add(T a, T b) {
  constexpr T kNegInf = -std::numeric_limits<T>::infinity();
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const T hi = std::max(a, b);
  return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

}  // namespace detail

/// Negative log marginal likelihood of `target` (which must already end with
/// the end marker) summed over all vertex paths 0 = a_1 < ... < a_m = K-1.
template <typename T>
DiffArray<T> dag_nll(const TokenDAG<T>& dag, std::span<const TokenId> target) {
  const Index k = dag.vertices();
  const Index m = static_cast<Index>(target.size());
  if (m < 2 || m > k) {
    throw TargetLengthError("target length " + std::to_string(m) + " outside [2, " + std::to_string(k) + "]");
  }
  const Index vocab = dag.vocab_size();
  for (TokenId y : target) {
    if (y < 0 || y >= vocab) throw DimensionError("target token " + std::to_string(y) + " outside vocabulary");
  }
  static constexpr T kNegInf = -std::numeric_limits<T>::infinity();
  const Matrix<T>& log_e = dag.log_transitions.value();
  const Matrix<T>& log_em = dag.log_emissions.value();

  // alpha(t, j): log prob of emitting y_1..y_t on a path from vertex 0 that
  // currently sits at vertex j.
  Matrix<T> alpha = Matrix<T>::Constant(m, k, kNegInf);
  alpha(0, 0) = log_em(0, target[0]);
  for (Index t = 1; t < m; ++t) {
    const TokenId y = target[static_cast<std::size_t>(t)];
    for (Index j = t; j < k; ++j) {
      T acc = kNegInf;
      for (Index i = t - 1; i < j; ++i) acc = detail::log_add(acc, alpha(t - 1, i) + log_e(i, j));
      alpha(t, j) = acc + log_em(j, y);
    }
  }
  const T log_z = alpha(m - 1, k - 1);

  Matrix<T> out(1, 1);
  out(0, 0) = -log_z;
  std::vector<TokenId> y(target.begin(), target.end());
  return DiffArray<T>::from_op(
      std::move(out), Shape{}, {dag.log_transitions, dag.log_emissions},
      [alpha = std::move(alpha), y = std::move(y), log_z, k, m](detail::Node<T>& self) {
        auto& pe = detail::parent(self, 0);
        auto& pem = detail::parent(self, 1);
        const Matrix<T>& log_e = pe.value;
        const Matrix<T>& log_em = pem.value;
        // beta(t, i): log prob of emitting y_{t+1}..y_m from vertex i onwards
        // and finishing at the last vertex.
        Matrix<T> beta = Matrix<T>::Constant(m, k, kNegInf);
        beta(m - 1, k - 1) = T(0);
        for (Index t = m - 2; t >= 0; --t) {
          const TokenId next = y[static_cast<std::size_t>(t + 1)];
          for (Index i = 0; i < k; ++i) {
            T acc = kNegInf;
            for (Index j = i + 1; j < k; ++j) acc = detail::log_add(acc, log_e(i, j) + log_em(j, next) + beta(t + 1, j));
            beta(t, i) = acc;
          }
        }
        const T upstream = self.grad(0, 0);
        if (pem.requires_grad) {
          auto& g = pem.grad_buffer();
          for (Index t = 0; t < m; ++t) {
            for (Index j = 0; j < k; ++j) {
              const T post = alpha(t, j) + beta(t, j) - log_z;
              if (post > kNegInf) g(j, y[static_cast<std::size_t>(t)]) -= upstream * std::exp(post);
            }
          }
        }
        if (pe.requires_grad) {
          auto& g = pe.grad_buffer();
          for (Index t = 0; t + 1 < m; ++t) {
            const TokenId next = y[static_cast<std::size_t>(t + 1)];
            for (Index i = 0; i < k; ++i) {
              if (alpha(t, i) == kNegInf) continue;
              for (Index j = i + 1; j < k; ++j) {
                const T edge = alpha(t, i) + log_e(i, j) + log_em(j, next) + beta(t + 1, j) - log_z;
                if (edge > kNegInf) g(i, j) -= upstream * std::exp(edge);
              }
            }
          }
        }
      });
}

/// Argmax token per vertex, ties to the smaller id.
template <typename T>
std::vector<std::pair<TokenId, double>> vertex_argmax(const TokenDAG<T>& dag) {
  const Matrix<T>& log_em = dag.log_emissions.value();
  std::vector<std::pair<TokenId, double>> best;
  for (Index i = 0; i < log_em.rows(); ++i) {
    Index arg = 0;
    for (Index v = 1; v < log_em.cols(); ++v) {
      if (log_em(i, v) > log_em(i, arg)) arg = v;
    }
    best.emplace_back(static_cast<TokenId>(arg), static_cast<double>(log_em(i, arg)));
  }
  return best;
}

/// Truncates at the first end marker, drops padding and collapses
/// consecutive repeats.
inline TokenSequence collapse_tokens(std::span<const TokenId> raw) {
  TokenSequence out;
  for (TokenId t : raw) {
    if (t == kEndToken) break;
    if (t == kPadToken) continue;
    if (!out.empty() && out.back() == t) continue;
    out.push_back(t);
  }
  return out;
}

namespace detail {

template <typename T>
NamePrediction read_path(const TokenDAG<T>& dag, std::vector<Index> path) {
  const auto best = vertex_argmax(dag);
  const Matrix<T>& log_e = dag.log_transitions.value();
  NamePrediction pred;
  TokenSequence raw;
  for (std::size_t s = 0; s < path.size(); ++s) {
    const auto& [token, logp] = best[static_cast<std::size_t>(path[s])];
    raw.push_back(token);
    pred.log_score += logp;
    if (s + 1 < path.size()) pred.log_score += static_cast<double>(log_e(path[s], path[s + 1]));
  }
  pred.token_ids = collapse_tokens(raw);
  pred.path = std::move(path);
  return pred;
}

}  // namespace detail

/// Highest-scoring path from the first to the last vertex, scoring each
/// vertex by its best token. Among equal continuations the smaller next
/// vertex wins.
template <typename T>
NamePrediction viterbi_decode(const TokenDAG<T>& dag) {
  const Index k = dag.vertices();
  const auto best = vertex_argmax(dag);
  const Matrix<T>& log_e = dag.log_transitions.value();
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  std::vector<double> value(static_cast<std::size_t>(k), kNegInf);
  std::vector<Index> next(static_cast<std::size_t>(k), -1);
  value.back() = best.back().second;
  for (Index i = k - 2; i >= 0; --i) {
    double top = kNegInf;
    for (Index j = i + 1; j < k; ++j) {
      const double cand = static_cast<double>(log_e(i, j)) + value[static_cast<std::size_t>(j)];
      if (cand > top) {
        top = cand;
        next[static_cast<std::size_t>(i)] = j;
      }
    }
    value[static_cast<std::size_t>(i)] = best[static_cast<std::size_t>(i)].second + top;
  }
  std::vector<Index> path{0};
  while (path.back() != k - 1) {
    const Index step = next[static_cast<std::size_t>(path.back())];
    path.push_back(step < 0 ? k - 1 : step);
  }
  return detail::read_path(dag, std::move(path));
}

/// Follows the most probable outgoing edge from the first vertex.
template <typename T>
NamePrediction greedy_decode(const TokenDAG<T>& dag) {
  const Index k = dag.vertices();
  const Matrix<T>& log_e = dag.log_transitions.value();
  std::vector<Index> path{0};
  while (path.back() != k - 1) {
    const Index i = path.back();
    Index arg = i + 1;
    for (Index j = i + 2; j < k; ++j) {
      if (log_e(i, j) > log_e(i, arg)) arg = j;
    }
    path.push_back(arg);
  }
  return detail::read_path(dag, std::move(path));
}

}  // namespace rtgen
