#pragma once

// Open-ended detection scoring: generated names are mapped onto the closest
// ground-truth category, scores are rescaled by that similarity, and AP is
// pooled over all categories with category agreement required for a hit.

#include <rtgen/types.hpp>

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace rtgen {

/// Similarity between a generated name and a category name, in [0, 1].
using SimilarityFn = std::function<double(std::span<const TokenId>, std::span<const TokenId>)>;

/// Dice overlap on token multisets: 2|A ∩ B| / (|A| + |B|).
double dice_similarity(std::span<const TokenId> generated, std::span<const TokenId> reference);

struct Detection {
  BoxCxcywh box{};
  double objectness = 0.0;
  TokenSequence name;
  double final_score = 0.0;
  int category = -1;  // index into the category list after rescaling
  double log_score = 0.0;
};

/// final_score = objectness * max similarity; records the argmax category
/// (first one on ties).
std::vector<Detection> rescale_scores(std::vector<Detection> dets, std::span<const TokenSequence> categories,
                                      const SimilarityFn& similarity = dice_similarity);

struct ImageGroundTruth {
  std::vector<BoxCxcywh> boxes;
  std::vector<int> categories;
};

struct PrCurve {
  double iou_threshold = 0.0;
  std::vector<double> recall;
  std::vector<double> precision;
  std::vector<double> interpolated;  // 101 points, recall 0.00 .. 1.00
  double ap = 0.0;
};

struct EvalReport {
  double ap = 0.0;
  double ap50 = 0.0;
  double ap75 = 0.0;
  std::vector<PrCurve> curves;
};

/// 0.50, 0.55, ..., 0.95.
std::vector<double> coco_iou_thresholds();

EvalReport compute_ap(const std::vector<std::vector<Detection>>& detections, const std::vector<ImageGroundTruth>& gts,
                      std::span<const double> iou_thresholds);
EvalReport compute_ap(const std::vector<std::vector<Detection>>& detections, const std::vector<ImageGroundTruth>& gts);

/// Distinct names in first-seen order.
std::vector<TokenSequence> collect_categories(std::span<const std::vector<TokenSequence>> names_per_image);
int category_index(std::span<const TokenSequence> categories, const TokenSequence& name);

void write_report_json(const std::filesystem::path& path, const EvalReport& report);
/// Columns: iou_threshold,recall,precision (101 interpolated points per threshold).
void write_pr_csv(const std::filesystem::path& path, const EvalReport& report);

}  // namespace rtgen
