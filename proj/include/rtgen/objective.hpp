#pragma once

// Class-agnostic set-prediction objective: box geometry, bipartite matching
// and the combined regression / GIoU / objectness / DAG loss.

#include <rtgen/dag_head.hpp>
#include <rtgen/types.hpp>

#include <Eigen/Dense>

#include <span>
#include <utility>
#include <vector>

namespace rtgen {

struct LossWeights {
  double reg = 5.0;
  double iou = 2.0;
  double obj = 1.0;
  double dag = 1.0;
};

double box_area(const BoxXyxy& b);
double iou(const BoxXyxy& a, const BoxXyxy& b);
/// Generalized IoU in [-1, 1]; two zero-area boxes give 0.
double giou(const BoxXyxy& a, const BoxXyxy& b);

/// Predicted boxes (normalized cxcywh) and objectness logits, plain values.
struct BoxPreds {
  std::vector<BoxCxcywh> boxes;
  std::vector<double> objectness_logits;
};

/// c[j, i] = w.obj * -sigmoid(logit_j) + w.reg * L1(box_j, gt_i) + w.iou * (1 - giou).
Eigen::MatrixXd matching_cost(const BoxPreds& preds, std::span<const BoxCxcywh> gts, const LossWeights& w);

struct MatchAssignment {
  std::vector<std::pair<Index, Index>> pairs;  // (query, ground truth), ascending query
  std::vector<Index> unmatched;                // ascending
};

/// Minimum-cost assignment of every column (ground truth) to a distinct row
/// (query). Requires rows >= cols. Among optimal assignments the
/// lexicographically smallest sorted pair list is returned.
MatchAssignment hungarian_match(const Eigen::MatrixXd& cost);

/// Total cost of an assignment under `cost`.
double assignment_cost(const Eigen::MatrixXd& cost, const MatchAssignment& assignment);

struct LossBreakdown {
  double total = 0;
  double reg = 0;
  double iou = 0;
  double obj = 0;
  double dag = 0;
};

/// GIoU between predicted cxcywh rows and constant target rows, [M, 1].
template <typename T>
DiffArray<T> giou_rows(const DiffArray<T>& pred, const Matrix<T>& target) {
  auto col = [&](Index c) { return slice_cols(pred, c, 1); };
  auto tcol = [&](Index c) { return DiffArray<T>::constant(Matrix<T>(target.col(c))); };
  const T half = T(0.5);
  DiffArray<T> px1 = sub(col(0), scale(col(2), half));
  DiffArray<T> py1 = sub(col(1), scale(col(3), half));
  DiffArray<T> px2 = add(col(0), scale(col(2), half));
  DiffArray<T> py2 = add(col(1), scale(col(3), half));
  DiffArray<T> tx1 = sub(tcol(0), scale(tcol(2), half));
  DiffArray<T> ty1 = sub(tcol(1), scale(tcol(3), half));
  DiffArray<T> tx2 = add(tcol(0), scale(tcol(2), half));
  DiffArray<T> ty2 = add(tcol(1), scale(tcol(3), half));

  DiffArray<T> area_p = mul(sub(px2, px1), sub(py2, py1));
  DiffArray<T> area_t = mul(sub(tx2, tx1), sub(ty2, ty1));
  DiffArray<T> iw = relu(sub(minimum(px2, tx2), maximum(px1, tx1)));
  DiffArray<T> ih = relu(sub(minimum(py2, ty2), maximum(py1, ty1)));
  DiffArray<T> inter = mul(iw, ih);
  DiffArray<T> uni = sub(add(area_p, area_t), inter);
  DiffArray<T> hull = mul(sub(maximum(px2, tx2), minimum(px1, tx1)), sub(maximum(py2, ty2), minimum(py1, ty1)));
  return sub(div(inter, uni), div(sub(hull, uni), hull));
}

/// Combined loss for one image. `boxes` is [N, 4] normalized cxcywh,
/// `logits` [N, 1]; `dags[j]` belongs to query j. Names are stored without
/// the end marker, which is appended here.
template <typename T>
std::pair<DiffArray<T>, LossBreakdown> total_loss(const DiffArray<T>& boxes, const DiffArray<T>& logits,
                                                  const std::vector<TokenDAG<T>>& dags,
                                                  std::span<const BoxCxcywh> gt_boxes,
                                                  std::span<const TokenSequence> gt_names,
                                                  const MatchAssignment& assignment, const LossWeights& w) {
  const Index n = boxes.rows();
  const Index g = static_cast<Index>(gt_boxes.size());
  if (gt_names.size() != gt_boxes.size()) throw DimensionError("total_loss: boxes and names differ in count");
  if (logits.rows() != n || static_cast<Index>(dags.size()) != n || boxes.cols() != 4) {
    throw DimensionError("total_loss: prediction shapes disagree");
  }
  Matrix<T> obj_target = Matrix<T>::Zero(n, 1);
  for (const auto& [j, i] : assignment.pairs) {
    if (j < 0 || j >= n || i < 0 || i >= g) throw DimensionError("total_loss: assignment index out of range");
    obj_target(j, 0) = T(1);
  }
  const T norm = T(1) / static_cast<T>(std::max<Index>(g, 1));
  LossBreakdown parts;
  DiffArray<T> l_obj = scale(sum(bce_with_logits(logits, obj_target)), norm);
  DiffArray<T> total = scale(l_obj, static_cast<T>(w.obj));
  parts.obj = static_cast<double>(l_obj.item());

  if (!assignment.pairs.empty()) {
    std::vector<Index> rows;
    Matrix<T> target(static_cast<Index>(assignment.pairs.size()), 4);
    for (std::size_t p = 0; p < assignment.pairs.size(); ++p) {
      rows.push_back(assignment.pairs[p].first);
      const auto& b = gt_boxes[static_cast<std::size_t>(assignment.pairs[p].second)];
      for (Index c = 0; c < 4; ++c) target(static_cast<Index>(p), c) = static_cast<T>(b[static_cast<std::size_t>(c)]);
    }
    DiffArray<T> matched = gather_rows(boxes, rows);
    DiffArray<T> l_reg = scale(sum(abs(sub(matched, DiffArray<T>::constant(target)))), norm);
    DiffArray<T> l_iou = scale(sum(add_scalar(scale(giou_rows(matched, target), T(-1)), T(1))), norm);

    // IoU-scaled DAG loss, not normalized by the number of boxes.
    DiffArray<T> l_dag = DiffArray<T>::scalar(T(0));
    for (std::size_t p = 0; p < assignment.pairs.size(); ++p) {
      const auto [j, i] = assignment.pairs[p];
      BoxCxcywh pred_box;
      for (Index c = 0; c < 4; ++c) pred_box[static_cast<std::size_t>(c)] = static_cast<double>(boxes.value()(j, c));
      const double quality = std::clamp(iou(to_xyxy(pred_box), to_xyxy(gt_boxes[static_cast<std::size_t>(i)])), 0.0, 1.0);
      if (quality <= 0.0) continue;
      TokenSequence target_tokens = gt_names[static_cast<std::size_t>(i)];
      target_tokens.push_back(kEndToken);
      l_dag = add(l_dag, scale(dag_nll(dags[static_cast<std::size_t>(j)], target_tokens), static_cast<T>(quality)));
    }
    total = add(total, scale(l_reg, static_cast<T>(w.reg)));
    total = add(total, scale(l_iou, static_cast<T>(w.iou)));
    total = add(total, scale(l_dag, static_cast<T>(w.dag)));
    parts.reg = static_cast<double>(l_reg.item());
    parts.iou = static_cast<double>(l_iou.item());
    parts.dag = static_cast<double>(l_dag.item());
  }
  parts.total = static_cast<double>(total.item());
  return {total, parts};
}

}  // namespace rtgen
