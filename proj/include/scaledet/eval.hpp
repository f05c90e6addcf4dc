#pragma once

#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "scaledet/data.hpp"
#include "scaledet/matching.hpp"
#include "scaledet/metrics.hpp"
#include "scaledet/model.hpp"

namespace scaledet {

/// Detached per-query snapshots of one block's predictions, for matching and
/// metric extraction.
inline std::vector<QuerySnapshot> query_snapshots(const BlockPredictions& block) {
  const int n = block.class_logits->value.dim(0);
  const int ncls = block.class_logits->value.dim(1);
  std::vector<QuerySnapshot> snaps(static_cast<std::size_t>(n));
  for (int q = 0; q < n; ++q) {
    QuerySnapshot& s = snaps[static_cast<std::size_t>(q)];
    s.class_probs.resize(static_cast<std::size_t>(ncls));
    s.score = 0.0;
    for (int c = 0; c < ncls; ++c) {
      const double x = block.class_logits->value.at(q, c);
      const double p = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      s.class_probs[static_cast<std::size_t>(c)] = p;
      s.score = std::max(s.score, p);
    }
    s.left = block.lrtb->value.at(q, 0);
    s.right = block.lrtb->value.at(q, 1);
    s.top = block.lrtb->value.at(q, 2);
    s.bottom = block.lrtb->value.at(q, 3);
    s.cx = block.center->value.at(q, 0);
    s.cy = block.center->value.at(q, 1);
  }
  return snaps;
}

/// Key-point audits of one block for the matched queries of one sample.
/// Positions are converted from feature-map cells to image pixels; attention
/// weights are flattened over heads and points and renormalized per query.
inline std::vector<KeypointAudit> block_keypoint_audits(const ForwardResult& fwd,
                                                        const BlockPredictions& block,
                                                        const MatchResult& match,
                                                        const SceneSample& sample) {
  const int gw = fwd.visual_map->value.dim(1), gh = fwd.visual_map->value.dim(0);
  const int m = block.keypoints.heads, k = block.keypoints.points;
  std::vector<KeypointAudit> audits;
  audits.reserve(match.pairs.size());
  for (const auto& [q, j] : match.pairs) {
    KeypointAudit audit;
    const SceneLabel& label = sample.labels[static_cast<std::size_t>(j)];
    audit.gt_box_px = Box{label.box_x1(), label.box_y1(), label.box_x2(), label.box_y2()};
    const double base_cx = to_cells_value(fwd.qx->value[q], gw);
    const double base_cy = to_cells_value(fwd.qy->value[q], gh);
    for (int h = 0; h < m; ++h) {
      for (int p = 0; p < k; ++p) {
        const int flat = (q * m + h) * k + p;
        const double cell_x = base_cx + block.keypoints.offsets_x->value[flat];
        const double cell_y = base_cy + block.keypoints.offsets_y->value[flat];
        audit.points_px.emplace_back((cell_x + 0.5) * kFeatureStride,
                                     (cell_y + 0.5) * kFeatureStride);
        audit.weights.push_back(block.keypoints.attention->value.at(q * m + h, p) / m);
      }
    }
    audits.push_back(std::move(audit));
  }
  return audits;
}

struct EvalDetail {
  MetricsReport report;
  std::optional<double> chance_pp;          // uniform-random baseline, final block
  double out_of_range_scale_fraction = 0.0; // labels outside the preset scale range
};

/// Full evaluation pass: AP40 on final-block detections plus per-block
/// key-point precision and scale-error metrics; the final block is the
/// headline.
inline EvalDetail evaluate_detailed(const Model& model, const std::vector<SceneSample>& samples,
                                    double iou_threshold = 0.5) {
  const ModelConfig& cfg = model.config();
  const int blocks = cfg.decoder_blocks;
  std::vector<std::vector<KeypointAudit>> audits(static_cast<std::size_t>(blocks));
  std::vector<std::vector<ScaleDistribution>> dists(static_cast<std::size_t>(blocks));
  std::vector<std::vector<double>> true_scales(static_cast<std::size_t>(blocks));
  std::vector<Detection> detections;
  std::vector<GroundTruthBox> gt_boxes;

  for (std::size_t si = 0; si < samples.size(); ++si) {
    const SceneSample& sample = samples[si];
    ForwardResult fwd = model.forward(sample, /*training=*/false);
    for (const auto& label : sample.labels) {
      gt_boxes.push_back({static_cast<int>(si),
                          Box{label.box_x1(), label.box_y1(), label.box_x2(), label.box_y2()}});
    }
    for (int b = 0; b < blocks; ++b) {
      const BlockPredictions& block = fwd.blocks[static_cast<std::size_t>(b)];
      const auto snaps = query_snapshots(block);
      const MatchResult match = hungarian_match(snaps, sample.labels, sample.width, sample.height);
      auto block_audits = block_keypoint_audits(fwd, block, match, sample);
      for (auto& a : block_audits) audits[static_cast<std::size_t>(b)].push_back(std::move(a));
      if (block.scale_probs) {
        const auto all_dists = extract_scale_distributions(block.scale_probs);
        for (const auto& [q, j] : match.pairs) {
          dists[static_cast<std::size_t>(b)].push_back(all_dists[static_cast<std::size_t>(q)]);
          true_scales[static_cast<std::size_t>(b)].push_back(
              ground_truth_scale(sample.labels[static_cast<std::size_t>(j)]));
        }
      }
      if (b == blocks - 1) {
        for (int q = 0; q < cfg.queries; ++q) {
          const auto& s = snaps[static_cast<std::size_t>(q)];
          const Box box{(s.cx - s.left) * sample.width, (s.cy - s.top) * sample.height,
                        (s.cx + s.right) * sample.width, (s.cy + s.bottom) * sample.height};
          detections.push_back({static_cast<int>(si), s.score, box});
        }
      }
    }
  }

  EvalDetail detail;
  const ScaleSet scale_set = cfg.use_ssda ? cfg.scale_set() : ScaleSet({1, 3}, 1);
  for (int b = 0; b < blocks; ++b) {
    const std::string suffix = "/block" + std::to_string(b);
    if (auto pp = position_precision(audits[static_cast<std::size_t>(b)]))
      detail.report["position_precision" + suffix] = *pp;
    if (auto wpp = weighted_position_precision(audits[static_cast<std::size_t>(b)]))
      detail.report["weighted_position_precision" + suffix] = *wpp;
    if (cfg.use_ssda && !dists[static_cast<std::size_t>(b)].empty()) {
      detail.report["mean_scale_error" + suffix] = mean_scale_error(
          dists[static_cast<std::size_t>(b)], true_scales[static_cast<std::size_t>(b)], scale_set);
    }
  }
  const int last = blocks - 1;
  if (auto pp = position_precision(audits[static_cast<std::size_t>(last)]))
    detail.report["position_precision"] = *pp;
  if (auto wpp = weighted_position_precision(audits[static_cast<std::size_t>(last)]))
    detail.report["weighted_position_precision"] = *wpp;
  if (cfg.use_ssda && !dists[static_cast<std::size_t>(last)].empty()) {
    detail.report["mean_scale_error"] = mean_scale_error(
        dists[static_cast<std::size_t>(last)], true_scales[static_cast<std::size_t>(last)], scale_set);
  }
  if (auto ap = ap40(detections, gt_boxes, iou_threshold)) detail.report["ap40"] = *ap;
  if (!samples.empty()) {
    detail.chance_pp = chance_position_precision(audits[static_cast<std::size_t>(last)],
                                                 samples[0].width, samples[0].height);
    detail.out_of_range_scale_fraction = out_of_range_scale_fraction(samples, scale_set);
  }
  return detail;
}

inline MetricsReport evaluate_model(const Model& model, const std::vector<SceneSample>& samples,
                                    double iou_threshold = 0.5) {
  return evaluate_detailed(model, samples, iou_threshold).report;
}

// ---------------------------------------------------------------------------
// Inspection overlays
// ---------------------------------------------------------------------------

namespace detail {

struct Canvas {
  int width, height;
  std::vector<std::uint8_t> rgb;

  Canvas(const SceneSample& sample)
      : width(sample.width), height(sample.height),
        rgb(static_cast<std::size_t>(sample.width) * sample.height * 3) {
    for (std::size_t i = 0; i < sample.image.size(); ++i) {
      rgb[3 * i] = rgb[3 * i + 1] = rgb[3 * i + 2] = sample.image[i];
    }
  }

  void set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    if (x < 0 || x >= width || y < 0 || y >= height) return;
    const std::size_t i = 3 * (static_cast<std::size_t>(y) * width + x);
    rgb[i] = r;
    rgb[i + 1] = g;
    rgb[i + 2] = b;
  }

  void rect(const Box& box, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    const int x1 = static_cast<int>(std::lround(box.x1)), x2 = static_cast<int>(std::lround(box.x2));
    const int y1 = static_cast<int>(std::lround(box.y1)), y2 = static_cast<int>(std::lround(box.y2));
    for (int x = x1; x <= x2; ++x) {
      set(x, y1, r, g, b);
      set(x, y2, r, g, b);
    }
    for (int y = y1; y <= y2; ++y) {
      set(x1, y, r, g, b);
      set(x2, y, r, g, b);
    }
  }

  void cross(double cx, double cy, int arm, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    const int x = static_cast<int>(std::lround(cx)), y = static_cast<int>(std::lround(cy));
    for (int d = -arm; d <= arm; ++d) {
      set(x + d, y, r, g, b);
      set(x, y + d, r, g, b);
    }
  }

  void disc(double cx, double cy, int radius, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    const int x0 = static_cast<int>(std::lround(cx)), y0 = static_cast<int>(std::lround(cy));
    for (int dy = -radius; dy <= radius; ++dy)
      for (int dx = -radius; dx <= radius; ++dx)
        if (dx * dx + dy * dy <= radius * radius) set(x0 + dx, y0 + dy, r, g, b);
  }
};

}  // namespace detail

/// Writes an overlay image: ground-truth boxes (green), query positions
/// (blue crosses), and final-block key points as discs colored from yellow
/// (low attention) to red (high attention).
inline void render_inspection(const Model& model, const SceneSample& sample,
                              const std::filesystem::path& out_path) {
  ForwardResult fwd = model.forward(sample, /*training=*/false);
  const BlockPredictions& block = fwd.final_block();
  detail::Canvas canvas(sample);

  for (const auto& label : sample.labels) {
    canvas.rect(Box{label.box_x1(), label.box_y1(), label.box_x2(), label.box_y2()}, 40, 220, 40);
  }

  const int gw = fwd.visual_map->value.dim(1), gh = fwd.visual_map->value.dim(0);
  const int n = model.config().queries, m = block.keypoints.heads, k = block.keypoints.points;
  double max_w = 0.0;
  for (int i = 0; i < block.keypoints.attention->value.size(); ++i)
    max_w = std::max(max_w, block.keypoints.attention->value[i]);
  for (int q = 0; q < n; ++q) {
    const double base_cx = to_cells_value(fwd.qx->value[q], gw);
    const double base_cy = to_cells_value(fwd.qy->value[q], gh);
    for (int h = 0; h < m; ++h) {
      for (int p = 0; p < k; ++p) {
        const int flat = (q * m + h) * k + p;
        const double px = (base_cx + block.keypoints.offsets_x->value[flat] + 0.5) * kFeatureStride;
        const double py = (base_cy + block.keypoints.offsets_y->value[flat] + 0.5) * kFeatureStride;
        const double w = block.keypoints.attention->value.at(q * m + h, p) / (max_w > 0 ? max_w : 1);
        canvas.disc(px, py, 2, 255, static_cast<std::uint8_t>(std::lround(220.0 * (1.0 - w))), 0);
      }
    }
    canvas.cross((base_cx + 0.5) * kFeatureStride, (base_cy + 0.5) * kFeatureStride, 3, 60, 120, 255);
  }
  write_ppm(out_path, canvas.rgb, canvas.width, canvas.height);
}

}  // namespace scaledet
