#pragma once

// Brute-force references used by the unit tests and the acceptance run.

#include <rtgen/dag_head.hpp>
#include <rtgen/objective.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

namespace rtgen::testing {

/// Every vertex path 0 = a_1 < ... < a_m = K-1 with exactly m vertices.
inline std::vector<std::vector<Index>> paths_of_length(Index k, Index m) {
  std::vector<std::vector<Index>> out;
  std::vector<Index> path{0};
  std::function<void()> grow = [&] {
    const auto len = static_cast<Index>(path.size());
    if (len == m - 1) {
      if (path.back() < k - 1) {
        path.push_back(k - 1);
        out.push_back(path);
        path.pop_back();
      }
      return;
    }
    for (Index v = path.back() + 1; v < k - 1; ++v) {
      path.push_back(v);
      grow();
      path.pop_back();
    }
  };
  if (m == 1) return k == 1 ? std::vector<std::vector<Index>>{{0}} : out;
  grow();
  return out;
}

/// P(y) summed explicitly over all paths, in linear space.
inline double enumerate_likelihood(const Matrix<double>& trans, const Matrix<double>& emit, std::span<const TokenId> y) {
  const Index k = trans.rows();
  const auto m = static_cast<Index>(y.size());
  double total = 0.0;
  for (const auto& path : paths_of_length(k, m)) {
    double p = 1.0;
    for (Index t = 0; t < m; ++t) {
      p *= emit(path[static_cast<std::size_t>(t)], y[static_cast<std::size_t>(t)]);
      if (t + 1 < m) p *= trans(path[static_cast<std::size_t>(t)], path[static_cast<std::size_t>(t + 1)]);
    }
    total += p;
  }
  return total;
}

struct BestPath {
  std::vector<Index> path;
  double score = -std::numeric_limits<double>::infinity();
};

/// Highest-scoring path of any length when each vertex contributes its best
/// token's log-probability. Paths are visited in lexicographic order and a
/// later path wins only with a strictly higher score.
inline BestPath enumerate_viterbi(const Matrix<double>& log_trans, const Matrix<double>& log_emit) {
  const Index k = log_trans.rows();
  std::vector<double> best_token(static_cast<std::size_t>(k));
  for (Index i = 0; i < k; ++i) best_token[static_cast<std::size_t>(i)] = log_emit.row(i).maxCoeff();
  std::vector<std::vector<Index>> all;
  for (Index m = 2; m <= k; ++m) {
    for (auto& p : paths_of_length(k, m)) all.push_back(std::move(p));
  }
  if (k == 1) all.push_back({0});
  std::sort(all.begin(), all.end());
  BestPath best;
  for (const auto& path : all) {
    double s = 0.0;
    for (std::size_t t = 0; t < path.size(); ++t) {
      s += best_token[static_cast<std::size_t>(path[t])];
      if (t + 1 < path.size()) s += log_trans(path[t], path[t + 1]);
    }
    if (s > best.score + 1e-12) best = {path, s};
  }
  return best;
}

/// A token DAG with random logits and the legal-edge mask applied.
inline TokenDAG<double> random_dag(Index k, Index vocab, std::mt19937_64& rng, double spread = 2.0) {
  std::uniform_real_distribution<double> dist(-spread, spread);
  Matrix<double> e(k, k);
  Matrix<double> em(k, vocab);
  for (Index i = 0; i < e.size(); ++i) e.data()[i] = dist(rng);
  for (Index i = 0; i < em.size(); ++i) em.data()[i] = dist(rng);
  const Mask mask = forward_edge_mask(k);
  return {log_softmax(DiffArray<double>::constant(e), &mask), log_softmax(DiffArray<double>::constant(em))};
}

struct BruteAssignment {
  double cost = std::numeric_limits<double>::infinity();
  std::vector<std::pair<Index, Index>> pairs;  // (query, gt), ascending query
};

/// Every injective gt -> query map; ties go to the lexicographically smallest
/// sorted pair list.
inline BruteAssignment brute_force_assignment(const Eigen::MatrixXd& cost) {
  const Index n = cost.rows();
  const Index g = cost.cols();
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  BruteAssignment best;
  const double tol = 1e-9 * (1.0 + cost.cwiseAbs().sum());
  do {
    double c = 0.0;
    std::vector<std::pair<Index, Index>> pairs;
    for (Index i = 0; i < g; ++i) {
      c += cost(perm[static_cast<std::size_t>(i)], i);
      pairs.emplace_back(perm[static_cast<std::size_t>(i)], i);
    }
    std::sort(pairs.begin(), pairs.end());
    if (c < best.cost - tol || (c <= best.cost + tol && pairs < best.pairs)) {
      if (c < best.cost - tol) best.cost = c;
      best.cost = std::min(best.cost, c);
      best.pairs = pairs;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

}  // namespace rtgen::testing
