#include <rtgen/evaluation.hpp>
#include <rtgen/objective.hpp>

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <stdexcept>

namespace rtgen {

double dice_similarity(std::span<const TokenId> generated, std::span<const TokenId> reference) {
  if (generated.empty() || reference.empty()) return 0.0;
  std::map<TokenId, int> counts;
  for (TokenId t : generated) ++counts[t];
  std::size_t common = 0;
  for (TokenId t : reference) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  return 2.0 * static_cast<double>(common) / static_cast<double>(generated.size() + reference.size());
}

std::vector<Detection> rescale_scores(std::vector<Detection> dets, std::span<const TokenSequence> categories,
                                      const SimilarityFn& similarity) {
  if (categories.empty()) throw std::invalid_argument("rescale_scores: no categories");
  for (auto& det : dets) {
    double best = -1.0;
    int arg = 0;
    for (std::size_t c = 0; c < categories.size(); ++c) {
      const double s = similarity(det.name, categories[c]);
      if (s > best) {
        best = s;
        arg = static_cast<int>(c);
      }
    }
    det.category = arg;
    det.final_score = det.objectness * std::clamp(best, 0.0, 1.0);
  }
  return dets;
}

std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

namespace {

struct Ranked {
  std::size_t image;
  std::size_t index;
  double score;
  double area;
};

PrCurve evaluate_threshold(const std::vector<std::vector<Detection>>& detections, const std::vector<ImageGroundTruth>& gts,
                           const std::vector<Ranked>& ranked, std::size_t total_gt, double threshold) {
  PrCurve curve;
  curve.iou_threshold = threshold;
  std::vector<std::vector<bool>> taken(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) taken[i].assign(gts[i].boxes.size(), false);
  std::size_t tp = 0;
  std::size_t fp = 0;
  for (const auto& r : ranked) {
    const Detection& det = detections[r.image][r.index];
    const auto& gt = gts[r.image];
    double best_iou = -1.0;
    std::ptrdiff_t best = -1;
    for (std::size_t g = 0; g < gt.boxes.size(); ++g) {
      if (taken[r.image][g] || gt.categories[g] != det.category) continue;
      const double overlap = iou(to_xyxy(det.box), to_xyxy(gt.boxes[g]));
      if (overlap >= threshold && overlap > best_iou) {
        best_iou = overlap;
        best = static_cast<std::ptrdiff_t>(g);
      }
    }
    if (best >= 0) {
      taken[r.image][static_cast<std::size_t>(best)] = true;
      ++tp;
    } else {
      ++fp;
    }
    curve.recall.push_back(total_gt ? static_cast<double>(tp) / static_cast<double>(total_gt) : 0.0);
    curve.precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
  }
  std::vector<double> envelope = curve.precision;
  for (std::size_t i = envelope.size(); i-- > 1;) envelope[i - 1] = std::max(envelope[i - 1], envelope[i]);
  curve.interpolated.assign(101, 0.0);
  for (int p = 0; p <= 100; ++p) {
    const double level = p / 100.0;
    auto it = std::lower_bound(curve.recall.begin(), curve.recall.end(), level);
    if (it != curve.recall.end()) curve.interpolated[static_cast<std::size_t>(p)] = envelope[static_cast<std::size_t>(it - curve.recall.begin())];
  }
  curve.ap = total_gt ? std::accumulate(curve.interpolated.begin(), curve.interpolated.end(), 0.0) / 101.0 : 0.0;
  return curve;
}

}  // namespace

EvalReport compute_ap(const std::vector<std::vector<Detection>>& detections, const std::vector<ImageGroundTruth>& gts,
                      std::span<const double> iou_thresholds) {
  if (detections.size() != gts.size()) throw std::invalid_argument("compute_ap: detections and ground truth differ in image count");
  std::vector<Ranked> ranked;
  std::size_t total_gt = 0;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    if (gts[i].boxes.size() != gts[i].categories.size()) throw std::invalid_argument("compute_ap: box/category count mismatch");
    total_gt += gts[i].boxes.size();
    for (std::size_t d = 0; d < detections[i].size(); ++d) {
      const auto& det = detections[i][d];
      ranked.push_back({i, d, det.final_score, det.box[2] * det.box[3]});
    }
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.area > b.area;
  });
  EvalReport report;
  for (double t : iou_thresholds) report.curves.push_back(evaluate_threshold(detections, gts, ranked, total_gt, t));
  if (!report.curves.empty()) {
    double total = 0.0;
    for (const auto& c : report.curves) total += c.ap;
    report.ap = total / static_cast<double>(report.curves.size());
  }
  auto at = [&](double t) {
    for (const auto& c : report.curves) {
      if (std::abs(c.iou_threshold - t) < 1e-9) return c.ap;
    }
    return evaluate_threshold(detections, gts, ranked, total_gt, t).ap;
  };
  report.ap50 = at(0.5);
  report.ap75 = at(0.75);
  return report;
}

EvalReport compute_ap(const std::vector<std::vector<Detection>>& detections, const std::vector<ImageGroundTruth>& gts) {
  const auto t = coco_iou_thresholds();
  return compute_ap(detections, gts, t);
}

std::vector<TokenSequence> collect_categories(std::span<const std::vector<TokenSequence>> names_per_image) {
  std::vector<TokenSequence> out;
  for (const auto& names : names_per_image) {
    for (const auto& n : names) {
      if (std::find(out.begin(), out.end(), n) == out.end()) out.push_back(n);
    }
  }
  return out;
}

int category_index(std::span<const TokenSequence> categories, const TokenSequence& name) {
  auto it = std::find(categories.begin(), categories.end(), name);
  return it == categories.end() ? -1 : static_cast<int>(it - categories.begin());
}

void write_report_json(const std::filesystem::path& path, const EvalReport& report) {
  nlohmann::ordered_json doc;
  doc["AP"] = report.ap;
  doc["AP50"] = report.ap50;
  doc["AP75"] = report.ap75;
  auto& per = doc["per_threshold"] = nlohmann::ordered_json::array();
  for (const auto& c : report.curves) per.push_back({{"iou_threshold", c.iou_threshold}, {"AP", c.ap}});
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << doc.dump(2) << '\n';
}

void write_pr_csv(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "iou_threshold,recall,precision\n";
  for (const auto& c : report.curves) {
    for (std::size_t p = 0; p < c.interpolated.size(); ++p) {
      out << c.iou_threshold << ',' << static_cast<double>(p) / 100.0 << ',' << c.interpolated[p] << '\n';
    }
  }
}

}  // namespace rtgen
