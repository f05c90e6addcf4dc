#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "scaledet/box.hpp"
#include "scaledet/core_types.hpp"

namespace scaledet {

/// Key points of one matched query: positions in image pixels, attention
/// weights flattened over heads and points (renormalized to sum one), and the
/// matched ground-truth 2D box.
struct KeypointAudit {
  std::vector<std::pair<double, double>> points_px;
  std::vector<double> weights;
  Box gt_box_px;

  void validate() const {
    if (points_px.size() != weights.size())
      throw std::invalid_argument("KeypointAudit: point/weight length mismatch");
  }
};

/// Fraction of key points that land inside their query's matched box.
/// Absent when there are no key points to audit.
inline std::optional<double> position_precision(const std::vector<KeypointAudit>& audits) {
  long total = 0, inside = 0;
  for (const auto& audit : audits) {
    audit.validate();
    for (const auto& [x, y] : audit.points_px) {
      ++total;
      if (audit.gt_box_px.contains(x, y)) ++inside;
    }
  }
  if (total == 0) return std::nullopt;
  return static_cast<double>(inside) / static_cast<double>(total);
}

/// Attention-weighted variant: inside mass divided by total attention mass.
inline std::optional<double> weighted_position_precision(
    const std::vector<KeypointAudit>& audits) {
  double total = 0.0, inside = 0.0;
  for (const auto& audit : audits) {
    audit.validate();
    for (std::size_t i = 0; i < audit.points_px.size(); ++i) {
      total += audit.weights[i];
      if (audit.gt_box_px.contains(audit.points_px[i].first, audit.points_px[i].second))
        inside += audit.weights[i];
    }
  }
  if (total <= 0.0) return std::nullopt;
  return inside / total;
}

/// Expected fraction of a uniformly random point landing inside the matched
/// box: the chance baseline for position precision.
inline std::optional<double> chance_position_precision(const std::vector<KeypointAudit>& audits,
                                                       double image_w, double image_h) {
  if (audits.empty()) return std::nullopt;
  double acc = 0.0;
  for (const auto& audit : audits) acc += audit.gt_box_px.area() / (image_w * image_h);
  return acc / static_cast<double>(audits.size());
}

struct Detection {
  int image = 0;
  double score = 0.0;
  Box box;
};

struct GroundTruthBox {
  int image = 0;
  Box box;
};

/// Average precision at 40 equally spaced recall positions. Detections are
/// processed in descending score order with greedy IoU matching; precision is
/// interpolated as the running maximum over higher recalls. Absent when there
/// are no ground-truth boxes.
inline std::optional<double> ap40(std::vector<Detection> detections,
                                  const std::vector<GroundTruthBox>& ground_truth,
                                  double iou_threshold) {
  if (ground_truth.empty()) return std::nullopt;
  std::vector<int> order(detections.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return detections[static_cast<std::size_t>(a)].score >
           detections[static_cast<std::size_t>(b)].score;
  });

  std::vector<char> gt_used(ground_truth.size(), 0);
  std::vector<double> precision, recall;
  long tp = 0, fp = 0;
  const long n_gt = static_cast<long>(ground_truth.size());
  for (int di : order) {
    const auto& det = detections[static_cast<std::size_t>(di)];
    int best = -1;
    double best_iou = iou_threshold;
    for (std::size_t gi = 0; gi < ground_truth.size(); ++gi) {
      if (gt_used[gi] || ground_truth[gi].image != det.image) continue;
      const double iou = box_iou(det.box, ground_truth[gi].box);
      if (iou >= best_iou) {
        best_iou = iou;
        best = static_cast<int>(gi);
      }
    }
    if (best >= 0) {
      gt_used[static_cast<std::size_t>(best)] = 1;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
  }

  double ap = 0.0;
  for (int k = 1; k <= 40; ++k) {
    const double r = k / 40.0;
    double best_prec = 0.0;
    for (std::size_t i = 0; i < precision.size(); ++i) {
      if (recall[i] >= r) best_prec = std::max(best_prec, precision[i]);
    }
    ap += best_prec;
  }
  return ap / 40.0;
}

/// Mean absolute difference between the expected predicted scale and the
/// ground-truth scale, in feature-map cells, over object queries.
inline double mean_scale_error(const std::vector<ScaleDistribution>& distributions,
                               const std::vector<double>& true_scales, const ScaleSet& scales) {
  if (distributions.size() != true_scales.size())
    throw std::invalid_argument("mean_scale_error: length mismatch");
  if (distributions.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < distributions.size(); ++i) {
    const auto& p = distributions[i];
    if (!p.is_simplex()) throw std::invalid_argument("mean_scale_error: not a simplex");
    double expected = 0.0;
    for (int j = 0; j < scales.count(); ++j)
      expected += p.probs[static_cast<std::size_t>(j)] * scales.scales[static_cast<std::size_t>(j)];
    acc += std::fabs(expected - true_scales[i]);
  }
  return acc / static_cast<double>(distributions.size());
}

/// Flat key -> number report with deterministic ordering.
using MetricsReport = std::map<std::string, double>;

inline std::string report_to_json(const MetricsReport& report) {
  std::ostringstream out;
  out.precision(10);
  out << "{";
  bool first = true;
  for (const auto& [key, value] : report) {
    if (!first) out << ",";
    first = false;
    out << "\n  \"" << key << "\": " << value;
  }
  out << "\n}\n";
  return out.str();
}

}  // namespace scaledet
