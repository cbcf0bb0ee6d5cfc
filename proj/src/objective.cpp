#include <rtgen/objective.hpp>

#include <algorithm>
#include <cmath>
#include <limits>

namespace rtgen {

double box_area(const BoxXyxy& b) { return std::max(0.0, b[2] - b[0]) * std::max(0.0, b[3] - b[1]); }

namespace {

double intersection(const BoxXyxy& a, const BoxXyxy& b) {
  const double w = std::min(a[2], b[2]) - std::max(a[0], b[0]);
  const double h = std::min(a[3], b[3]) - std::max(a[1], b[1]);
  return std::max(0.0, w) * std::max(0.0, h);
}

}  // namespace

double iou(const BoxXyxy& a, const BoxXyxy& b) {
  const double inter = intersection(a, b);
  const double uni = box_area(a) + box_area(b) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double giou(const BoxXyxy& a, const BoxXyxy& b) {
  const double inter = intersection(a, b);
  const double uni = box_area(a) + box_area(b) - inter;
  const double hull = (std::max(a[2], b[2]) - std::min(a[0], b[0])) * (std::max(a[3], b[3]) - std::min(a[1], b[1]));
  if (hull <= 0.0) return 0.0;
  const double ratio = uni > 0.0 ? inter / uni : 0.0;
  return ratio - (hull - uni) / hull;
}

Eigen::MatrixXd matching_cost(const BoxPreds& preds, std::span<const BoxCxcywh> gts, const LossWeights& w) {
  const auto n = static_cast<Index>(preds.boxes.size());
  const auto g = static_cast<Index>(gts.size());
  if (static_cast<Index>(preds.objectness_logits.size()) != n) throw DimensionError("matching_cost: logits/boxes count mismatch");
  Eigen::MatrixXd cost(n, g);
  for (Index j = 0; j < n; ++j) {
    const double prob = 1.0 / (1.0 + std::exp(-preds.objectness_logits[static_cast<std::size_t>(j)]));
    const auto& pb = preds.boxes[static_cast<std::size_t>(j)];
    for (Index i = 0; i < g; ++i) {
      const auto& gb = gts[static_cast<std::size_t>(i)];
      double l1 = 0.0;
      for (std::size_t c = 0; c < 4; ++c) l1 += std::abs(pb[c] - gb[c]);
      cost(j, i) = -w.obj * prob + w.reg * l1 + w.iou * (1.0 - giou(to_xyxy(pb), to_xyxy(gb)));
    }
  }
  return cost;
}

namespace {

/// Shortest augmenting path assignment (Jonker-Volgenant potentials) of every
/// row of `cost` (rows <= cols) to a distinct column. Returns col per row.
std::vector<Index> solve_rows(const Eigen::MatrixXd& cost) {
  const Index rows = cost.rows();
  const Index cols = cost.cols();
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(rows + 1), 0.0), v(static_cast<std::size_t>(cols + 1), 0.0);
  std::vector<Index> owner(static_cast<std::size_t>(cols + 1), 0), way(static_cast<std::size_t>(cols + 1), 0);
  for (Index r = 1; r <= rows; ++r) {
    owner[0] = r;
    Index col0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(cols + 1), kInf);
    std::vector<bool> used(static_cast<std::size_t>(cols + 1), false);
    do {
      used[static_cast<std::size_t>(col0)] = true;
      const Index r0 = owner[static_cast<std::size_t>(col0)];
      double delta = kInf;
      Index col1 = 0;
      for (Index c = 1; c <= cols; ++c) {
        if (used[static_cast<std::size_t>(c)]) continue;
        const double cur = cost(r0 - 1, c - 1) - u[static_cast<std::size_t>(r0)] - v[static_cast<std::size_t>(c)];
        if (cur < minv[static_cast<std::size_t>(c)]) {
          minv[static_cast<std::size_t>(c)] = cur;
          way[static_cast<std::size_t>(c)] = col0;
        }
        if (minv[static_cast<std::size_t>(c)] < delta) {
          delta = minv[static_cast<std::size_t>(c)];
          col1 = c;
        }
      }
      for (Index c = 0; c <= cols; ++c) {
        if (used[static_cast<std::size_t>(c)]) {
          u[static_cast<std::size_t>(owner[static_cast<std::size_t>(c)])] += delta;
          v[static_cast<std::size_t>(c)] -= delta;
        } else {
          minv[static_cast<std::size_t>(c)] -= delta;
        }
      }
      col0 = col1;
    } while (owner[static_cast<std::size_t>(col0)] != 0);
    do {
      const Index col1 = way[static_cast<std::size_t>(col0)];
      owner[static_cast<std::size_t>(col0)] = owner[static_cast<std::size_t>(col1)];
      col0 = col1;
    } while (col0 != 0);
  }
  std::vector<Index> col_of_row(static_cast<std::size_t>(rows), -1);
  for (Index c = 1; c <= cols; ++c) {
    if (owner[static_cast<std::size_t>(c)] != 0) col_of_row[static_cast<std::size_t>(owner[static_cast<std::size_t>(c)] - 1)] = c - 1;
  }
  return col_of_row;
}

/// Optimal total cost with gts as rows over queries as columns.
double optimal_cost(const Eigen::MatrixXd& gt_by_query) {
  const auto cols = solve_rows(gt_by_query);
  double total = 0.0;
  for (std::size_t r = 0; r < cols.size(); ++r) total += gt_by_query(static_cast<Index>(r), cols[r]);
  return total;
}

}  // namespace

MatchAssignment hungarian_match(const Eigen::MatrixXd& cost) {
  const Index n = cost.rows();
  const Index g = cost.cols();
  if (n < g) throw DimensionError("hungarian_match: fewer queries than ground truths");
  MatchAssignment out;
  if (g == 0) {
    for (Index j = 0; j < n; ++j) out.unmatched.push_back(j);
    return out;
  }
  const Eigen::MatrixXd base = cost.transpose();
  const double best = optimal_cost(base);
  const double scale = 1.0 + base.cwiseAbs().sum();
  const double tol = 1e-9 * scale;
  const double blocked = 1e6 * scale;

  // Fix pairs one at a time in lexicographic order, keeping only choices
  // that leave the optimum reachable.
  Eigen::MatrixXd work = base;
  std::vector<bool> gt_used(static_cast<std::size_t>(g), false);
  Index next_query = 0;
  for (Index step = 0; step < g; ++step) {
    bool fixed = false;
    for (Index j = next_query; j < n && !fixed; ++j) {
      for (Index i = 0; i < g && !fixed; ++i) {
        if (gt_used[static_cast<std::size_t>(i)]) continue;
        Eigen::MatrixXd trial = work;
        for (Index skipped = next_query; skipped < j; ++skipped) trial.col(skipped).setConstant(blocked);
        const double keep = trial(i, j);
        trial.row(i).setConstant(blocked);
        trial.col(j).setConstant(blocked);
        trial(i, j) = keep;
        if (optimal_cost(trial) <= best + tol) {
          work = std::move(trial);
          gt_used[static_cast<std::size_t>(i)] = true;
          out.pairs.emplace_back(j, i);
          next_query = j + 1;
          fixed = true;
        }
      }
    }
    if (!fixed) throw std::logic_error("hungarian_match: failed to reconstruct optimal assignment");
  }
  std::vector<bool> matched(static_cast<std::size_t>(n), false);
  for (const auto& [j, i] : out.pairs) matched[static_cast<std::size_t>(j)] = true;
  for (Index j = 0; j < n; ++j) {
    if (!matched[static_cast<std::size_t>(j)]) out.unmatched.push_back(j);
  }
  return out;
}

double assignment_cost(const Eigen::MatrixXd& cost, const MatchAssignment& assignment) {
  double total = 0.0;
  for (const auto& [j, i] : assignment.pairs) total += cost(j, i);
  return total;
}

}  // namespace rtgen
