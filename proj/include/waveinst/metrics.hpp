#pragma once

#include <algorithm>
#include <array>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "waveinst/mask.hpp"

namespace waveinst {

inline constexpr int kIouLevels = 10;
inline constexpr int kRecallLevels = 101;

// Same values as the reference evaluator's linspace (0.90 is 0.8999999999999999).
inline const std::array<double, kIouLevels>& iou_thresholds() {
  static const auto t = [] {
    std::array<double, kIouLevels> a{};
    const double step = (0.95 - 0.5) / (kIouLevels - 1);
    for (int i = 0; i < kIouLevels; ++i) a[i] = 0.5 + i * step;
    a.back() = 0.95;
    return a;
  }();
  return t;
}

inline const std::array<double, kRecallLevels>& recall_thresholds() {
  static const auto t = [] {
    std::array<double, kRecallLevels> a{};
    for (int i = 0; i < kRecallLevels; ++i) a[i] = i * 0.01;
    a.back() = 1.0;
    return a;
  }();
  return t;
}

/// |a & b| / |a | b|; two empty masks give 1.
inline double mask_iou(const BinaryMask& a, const BinaryMask& b) {
  require_same_size(a, b, "mask_iou");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const bool x = a.data[i] != 0, y = b.data[i] != 0;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

namespace detail {

// Greedy matching over a precomputed IoU matrix (dets x gts). Detections are
// taken in the given order; among unmatched gts of the same category the
// highest IoU >= threshold wins, later gts winning exact ties as in the
// reference evaluator.
inline std::vector<bool> greedy_match(const std::vector<std::vector<double>>& iou, const std::vector<int>& det_cat,
                                      const std::vector<int>& gt_cat, double threshold) {
  std::vector<bool> tp(det_cat.size(), false);
  std::vector<bool> taken(gt_cat.size(), false);
  for (std::size_t d = 0; d < det_cat.size(); ++d) {
    double best = std::min(threshold, 1 - 1e-10);
    int m = -1;
    for (std::size_t g = 0; g < gt_cat.size(); ++g) {
      if (taken[g] || gt_cat[g] != det_cat[d]) continue;
      if (iou[d][g] < best) continue;
      best = iou[d][g];
      m = static_cast<int>(g);
    }
    if (m >= 0) {
      taken[m] = true;
      tp[d] = true;
    }
  }
  return tp;
}

inline std::vector<std::vector<double>> iou_matrix(const std::vector<Detection>& dets,
                                                   const std::vector<GroundTruth>& gts) {
  std::vector<std::vector<double>> iou(dets.size(), std::vector<double>(gts.size(), 0.0));
  for (std::size_t d = 0; d < dets.size(); ++d)
    for (std::size_t g = 0; g < gts.size(); ++g)
      if (dets[d].category == gts[g].category) iou[d][g] = mask_iou(dets[d].mask, gts[g].mask);
  return iou;
}

}  // namespace detail

/// TP flags for detections already sorted by descending confidence.
inline std::vector<bool> match_detections(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                                          double iou_threshold) {
  std::vector<int> dc, gc;
  for (const auto& d : dets) dc.push_back(d.category);
  for (const auto& g : gts) gc.push_back(g.category);
  return detail::greedy_match(detail::iou_matrix(dets, gts), dc, gc, iou_threshold);
}

struct PrSummary {
  double ap = 0;
  double recall = 0;  // recall reached by the full detection list
};

/// 101-point interpolated AP over the precision envelope. Input pairs are
/// (confidence, is_tp); they are stably sorted by descending confidence.
/// Returns nothing when there is no ground truth (category excluded).
inline std::optional<PrSummary> average_precision(std::vector<std::pair<double, bool>> flags, int gt_count) {
  if (gt_count <= 0) return std::nullopt;
  std::stable_sort(flags.begin(), flags.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  const std::size_t nd = flags.size();
  PrSummary out;
  if (nd == 0) return out;
  std::vector<double> rc(nd), pr(nd);
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < nd; ++i) {
    (flags[i].second ? tp : fp) += 1;
    rc[i] = tp / gt_count;
    pr[i] = tp / (tp + fp);
  }
  for (std::size_t i = nd - 1; i > 0; --i) pr[i - 1] = std::max(pr[i - 1], pr[i]);
  double sum = 0;
  for (double r : recall_thresholds()) {
    const auto it = std::lower_bound(rc.begin(), rc.end(), r);
    if (it != rc.end()) sum += pr[static_cast<std::size_t>(it - rc.begin())];
  }
  out.ap = sum / kRecallLevels;
  out.recall = rc.back();
  return out;
}

struct CategoryMetrics {
  int gt_count = 0;
  int detections = 0;
  double mAP = 0, AP50 = 0, AP75 = 0, AR = 0;
};

/// Reported on the x100 scale.
struct CocoMetrics {
  double mAP = 0, AP50 = 0, AP75 = 0, AR = 0;
  int images = 0;
  std::map<int, CategoryMetrics> per_category;  // categories with ground truth only

  nlohmann::ordered_json to_json(const std::vector<std::string>& names = {}) const {
    nlohmann::ordered_json j;
    j["mAP"] = mAP;
    j["AP50"] = AP50;
    j["AP75"] = AP75;
    j["AR"] = AR;
    j["images"] = images;
    auto& pc = j["per_category"] = nlohmann::ordered_json::object();
    for (const auto& [c, m] : per_category) {
      const std::string key = c < static_cast<int>(names.size()) ? names[c] : std::to_string(c);
      pc[key] = {{"id", c},       {"gt_count", m.gt_count}, {"detections", m.detections}, {"mAP", m.mAP},
                 {"AP50", m.AP50}, {"AP75", m.AP75},         {"AR", m.AR}};
    }
    return j;
  }
};

/// Collects per-image matches; summarize() reduces them to COCO mask
/// metrics. Detections are capped per image and category, highest
/// confidence first.
class EvalAccumulator {
 public:
  explicit EvalAccumulator(int max_detections = 100) : max_dets_(max_detections) {}

  void add_image(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts) {
    ++images_;
    std::map<int, std::vector<int>> det_by_cat, gt_by_cat;
    for (std::size_t i = 0; i < dets.size(); ++i) det_by_cat[dets[i].category].push_back(static_cast<int>(i));
    for (std::size_t i = 0; i < gts.size(); ++i) {
      if (gts[i].mask.height != (gts.front().mask.height) || gts[i].mask.width != gts.front().mask.width)
        throw InputError("EvalAccumulator: ground-truth masks of one image differ in size");
      gt_by_cat[gts[i].category].push_back(static_cast<int>(i));
    }
    for (auto& [c, idx] : gt_by_cat) records_[c].gt_count += static_cast<int>(idx.size());
    for (auto& [c, idx] : det_by_cat) {
      std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return dets[a].score > dets[b].score; });
      if (static_cast<int>(idx.size()) > max_dets_) idx.resize(max_dets_);
      std::vector<Detection> d;
      std::vector<GroundTruth> g;
      for (int i : idx) d.push_back(dets[i]);
      for (int i : gt_by_cat[c]) g.push_back(gts[i]);
      const auto iou = detail::iou_matrix(d, g);
      const std::vector<int> dc(d.size(), c), gc(g.size(), c);
      auto& rec = records_[c];
      for (int t = 0; t < kIouLevels; ++t) {
        const auto tp = detail::greedy_match(iou, dc, gc, iou_thresholds()[t]);
        for (std::size_t k = 0; k < d.size(); ++k) rec.flags[t].emplace_back(d[k].score, tp[k]);
      }
    }
  }

  CocoMetrics summarize() const {
    CocoMetrics out;
    out.images = images_;
    double ap_sum = 0, ar_sum = 0, ap50 = 0, ap75 = 0;
    int valid = 0;
    for (const auto& [c, rec] : records_) {
      if (rec.gt_count == 0) continue;
      CategoryMetrics m;
      m.gt_count = rec.gt_count;
      m.detections = static_cast<int>(rec.flags[0].size());
      for (int t = 0; t < kIouLevels; ++t) {
        const auto s = *average_precision(rec.flags[t], rec.gt_count);
        m.mAP += s.ap;
        m.AR += s.recall;
        if (t == 0) m.AP50 = s.ap;
        if (t == 5) m.AP75 = s.ap;
      }
      m.mAP /= kIouLevels;
      m.AR /= kIouLevels;
      ap_sum += m.mAP;
      ar_sum += m.AR;
      ap50 += m.AP50;
      ap75 += m.AP75;
      ++valid;
      m.mAP *= 100, m.AR *= 100, m.AP50 *= 100, m.AP75 *= 100;
      out.per_category[c] = m;
    }
    if (valid) {
      out.mAP = 100 * ap_sum / valid;
      out.AR = 100 * ar_sum / valid;
      out.AP50 = 100 * ap50 / valid;
      out.AP75 = 100 * ap75 / valid;
    }
    return out;
  }

 private:
  struct Record {
    int gt_count = 0;
    std::array<std::vector<std::pair<double, bool>>, kIouLevels> flags;
  };
  int max_dets_;
  int images_ = 0;
  std::map<int, Record> records_;
};

/// Convenience wrapper: one entry per image in both lists.
inline CocoMetrics coco_map(const std::vector<std::vector<Detection>>& predictions,
                            const std::vector<std::vector<GroundTruth>>& ground_truths, int max_detections = 100) {
  if (predictions.size() != ground_truths.size())
    throw InputError("coco_map: " + std::to_string(predictions.size()) + " prediction lists for " +
                     std::to_string(ground_truths.size()) + " images");
  EvalAccumulator acc(max_detections);
  for (std::size_t i = 0; i < predictions.size(); ++i) acc.add_image(predictions[i], ground_truths[i]);
  return acc.summarize();
}

}  // namespace waveinst
