#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "scaledet/box.hpp"
#include "scaledet/core_types.hpp"
#include "scaledet/graph.hpp"
#include "scaledet/matching.hpp"

namespace scaledet {

// ---------------------------------------------------------------------------
// Scale matching loss and WSM rank weighting
// ---------------------------------------------------------------------------

/// Two readings of the scale-matching loss. Literal averages the per-scale
/// terms |P(q,l)*l - l_hat|; expected penalizes the distance between the
/// expected scale sum_l P(q,l)*l and l_hat.
enum class ScaleLossMode { kLiteral, kExpected };

inline Tensor scale_values_tensor(const ScaleSet& scales) {
  Tensor t({scales.count()});
  for (int i = 0; i < scales.count(); ++i) t[i] = scales.scales[static_cast<std::size_t>(i)];
  return t;
}

/// Expected scale per query: sum_l P(q,l) * l. Input [B, N_l], output [B].
inline Var predicted_scale_expectation(const Var& probs, const ScaleSet& scales) {
  return sum_cols(mul_rowvec(probs, constant(scale_values_tensor(scales))));
}

/// Per-query scale-matching losses. probs [B, N_l], true_scales [B] in cells;
/// output [B], nonnegative.
inline Var scale_losses(const Var& probs, const Tensor& true_scales, const ScaleSet& scales,
                        ScaleLossMode mode) {
  const int b = probs->value.dim(0);
  if (true_scales.size() != b) throw std::invalid_argument("scale_losses: length mismatch");
  Var targets = constant(true_scales);
  if (mode == ScaleLossMode::kExpected) {
    return abs_op(sub(predicted_scale_expectation(probs, scales), targets));
  }
  Var per_scale = abs_op(sub_colvec(mul_rowvec(probs, constant(scale_values_tensor(scales))),
                                    targets));  // [B, N_l]
  return scale(sum_cols(per_scale), 1.0 / scales.count());
}

/// Single-query convenience on plain values.
inline double scale_loss(const ScaleDistribution& p, double true_scale, const ScaleSet& scales,
                         ScaleLossMode mode) {
  if (!p.is_simplex()) throw std::invalid_argument("scale_loss: probabilities not a simplex");
  Tensor probs = Tensor::from(std::vector<double>(p.probs.begin(), p.probs.end()),
                              {1, static_cast<int>(p.probs.size())});
  return scale_losses(constant(probs), Tensor::from({true_scale}, {1}), scales, mode)->value[0];
}

/// Object queries of one training batch with their predicted and true scales,
/// both in feature-map cells.
struct RankBatch {
  std::vector<double> predicted_scales;
  std::vector<double> true_scales;

  int size() const { return static_cast<int>(predicted_scales.size()); }

  void validate() const {
    if (predicted_scales.size() != true_scales.size())
      throw std::invalid_argument("RankBatch: length mismatch");
  }
};

namespace detail {

/// Rank of each element when sorted descending; ties keep original order.
inline std::vector<int> descending_ranks(const std::vector<double>& values) {
  const int n = static_cast<int>(values.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return values[static_cast<std::size_t>(a)] > values[static_cast<std::size_t>(b)];
  });
  std::vector<int> rank(static_cast<std::size_t>(n));
  for (int pos = 0; pos < n; ++pos) rank[static_cast<std::size_t>(order[static_cast<std::size_t>(pos)])] = pos;
  return rank;
}

}  // namespace detail

/// Rank-discrepancy penalty weights: both scale lists are ranked descending
/// and each query is weighted by log(|rank difference| + 1). Weights are zero
/// exactly when the two rankings agree on a query.
inline std::vector<double> wsm_weights(const RankBatch& batch) {
  batch.validate();
  const auto rank_pred = detail::descending_ranks(batch.predicted_scales);
  const auto rank_true = detail::descending_ranks(batch.true_scales);
  std::vector<double> weights(static_cast<std::size_t>(batch.size()));
  for (int i = 0; i < batch.size(); ++i) {
    const double diff = std::fabs(static_cast<double>(rank_true[static_cast<std::size_t>(i)] -
                                                      rank_pred[static_cast<std::size_t>(i)]));
    weights[static_cast<std::size_t>(i)] = std::log(diff + 1.0);
  }
  return weights;
}

/// Weighting schemes for the scale-matching loss: rank discrepancy (default),
/// constant 1, or log of the per-query loss value.
enum class WsmWeightMode { kRank, kConstant, kLogLoss };

inline std::vector<double> wsm_weights_for_mode(const RankBatch& batch,
                                                const std::vector<double>& per_query_losses,
                                                WsmWeightMode mode) {
  switch (mode) {
    case WsmWeightMode::kRank:
      return wsm_weights(batch);
    case WsmWeightMode::kConstant:
      return std::vector<double>(static_cast<std::size_t>(batch.size()), 1.0);
    case WsmWeightMode::kLogLoss: {
      std::vector<double> w(per_query_losses.size());
      for (std::size_t i = 0; i < per_query_losses.size(); ++i)
        w[i] = std::log(std::max(per_query_losses[i], 1e-12));
      return w;
    }
  }
  throw std::logic_error("wsm_weights_for_mode: unknown mode");
}

/// Weighted scale-matching loss: (1/B) * sum W(q) * L(q). The weights are
/// non-differentiable coefficients; gradients flow through the per-query
/// losses only. An empty batch contributes zero.
inline Var wsm_loss(const std::vector<double>& weights, const Var& per_query_losses) {
  const int b = per_query_losses->value.size();
  if (static_cast<int>(weights.size()) != b)
    throw std::invalid_argument("wsm_loss: weight/loss length mismatch");
  if (b == 0) return constant_scalar(0.0);
  Tensor w({b});
  for (int i = 0; i < b; ++i) w[i] = weights[static_cast<std::size_t>(i)];
  return scale(sum_all(mul(per_query_losses, constant(w))), 1.0 / b);
}

// ---------------------------------------------------------------------------
// Classification and box losses
// ---------------------------------------------------------------------------

/// Sigmoid focal loss over all queries and classes, normalized by the number
/// of matched queries (at least one). Targets are 0/1 per class.
inline Var focal_loss(const Var& logits, const Tensor& targets, int num_matched,
                      double alpha = 0.25, double gamma = 2.0) {
  if (!logits->value.same_shape(targets))
    throw std::invalid_argument("focal_loss: shape mismatch");
  if (gamma != 2.0) throw std::invalid_argument("focal_loss: only gamma = 2 is supported");
  Var p = sigmoid(logits);
  Var one_minus_p = add_scalar(neg(p), 1.0);
  // log p = -softplus(-x), log(1-p) = -softplus(x): stable for large |x|.
  Var log_p = neg(softplus(neg(logits)));
  Var log_1mp = neg(softplus(logits));
  Var pos = scale(mul(mul(one_minus_p, one_minus_p), log_p), -alpha);
  Var negt = scale(mul(mul(p, p), log_1mp), -(1.0 - alpha));
  Tensor pos_mask = targets;
  Tensor neg_mask = targets;
  for (int i = 0; i < neg_mask.size(); ++i) neg_mask[i] = 1.0 - neg_mask[i];
  Var total = add(mul(pos, constant(pos_mask)), mul(negt, constant(neg_mask)));
  return scale(sum_all(total), 1.0 / std::max(1, num_matched));
}

/// Mean over queries of the summed absolute error: sum |pred - target| / B.
inline Var l1_loss(const Var& pred, const Tensor& target) {
  if (!pred->value.same_shape(target)) throw std::invalid_argument("l1_loss: shape mismatch");
  const int b = pred->value.dim(0);
  return scale(sum_all(abs_op(sub(pred, constant(target)))), 1.0 / b);
}

/// Differentiable GIoU of predicted corner boxes against constant targets.
/// All inputs are [B] vectors; predicted boxes must satisfy x1 <= x2, y1 <= y2.
inline Var giou_vars(const Var& px1, const Var& py1, const Var& px2, const Var& py2,
                     const Tensor& gx1, const Tensor& gy1, const Tensor& gx2, const Tensor& gy2) {
  Var cx1 = constant(gx1), cy1 = constant(gy1), cx2 = constant(gx2), cy2 = constant(gy2);
  Var iw = relu(sub(min_ew(px2, cx2), max_ew(px1, cx1)));
  Var ih = relu(sub(min_ew(py2, cy2), max_ew(py1, cy1)));
  Var inter = mul(iw, ih);
  Var area_p = mul(sub(px2, px1), sub(py2, py1));
  Tensor area_g(gx1.shape());
  for (int i = 0; i < area_g.size(); ++i) area_g[i] = (gx2[i] - gx1[i]) * (gy2[i] - gy1[i]);
  Var uni = sub(add(area_p, constant(area_g)), inter);
  Var ew = sub(max_ew(px2, cx2), min_ew(px1, cx1));
  Var eh = sub(max_ew(py2, cy2), min_ew(py1, cy1));
  Var enclose = mul(ew, eh);
  return sub(div(inter, uni), div(sub(enclose, uni), enclose));
}

/// Mean of (1 - GIoU) over matched boxes.
inline Var giou_loss(const Var& px1, const Var& py1, const Var& px2, const Var& py2,
                     const std::vector<Box>& gt) {
  const int b = px1->value.size();
  if (static_cast<int>(gt.size()) != b) throw std::invalid_argument("giou_loss: box count");
  Tensor gx1({b}), gy1({b}), gx2({b}), gy2({b});
  for (int i = 0; i < b; ++i) {
    gx1[i] = gt[static_cast<std::size_t>(i)].x1;
    gy1[i] = gt[static_cast<std::size_t>(i)].y1;
    gx2[i] = gt[static_cast<std::size_t>(i)].x2;
    gy2[i] = gt[static_cast<std::size_t>(i)].y2;
  }
  Var g = giou_vars(px1, py1, px2, py2, gx1, gy1, gx2, gy2);
  return mean_all(add_scalar(neg(g), 1.0));
}

// ---------------------------------------------------------------------------
// Depth losses
// ---------------------------------------------------------------------------

/// Minimum box height, in the units of (t + b), accepted by the geometric
/// depth estimate before clamping.
inline constexpr double kMinBoxHeightPx = 1.0;

/// Geometric depth from the pinhole relation: f * h3d / (t + b). The
/// denominator is clamped to one pixel for degenerate boxes.
inline double depth_geo(double focal, double h3d, double t, double b,
                        ClampStats* stats = nullptr) {
  double denom = t + b;
  if (denom <= kMinBoxHeightPx) {
    denom = kMinBoxHeightPx;
    if (stats) ++stats->clamped;
  }
  return focal * h3d / denom;
}

/// Batched differentiable form; tb_pixels is (t + b) in pixels.
inline Var depth_geo_vars(double focal, const Var& h3d, const Var& tb_pixels) {
  return scale(div(h3d, clamp_min(tb_pixels, kMinBoxHeightPx)), focal);
}

inline double depth_fuse(double d_reg, double d_geo, double d_map) {
  return (d_reg + d_geo + d_map) / 3.0;
}

inline Var depth_fuse_vars(const Var& d_reg, const Var& d_geo, const Var& d_map) {
  return scale(add(add(d_reg, d_geo), d_map), 1.0 / 3.0);
}

/// Prediction bundle of a fused depth estimate; sigma is the predicted
/// Laplacian scale.
struct DepthEstimate {
  double d_reg = 0, d_geo = 0, d_map = 0;
  double sigma = 1.0;

  double d_pre() const { return depth_fuse(d_reg, d_geo, d_map); }

  void validate() const {
    if (sigma <= 0) throw std::invalid_argument("DepthEstimate: sigma must be positive");
  }
};

/// Laplacian aleatoric uncertainty loss: (2/sigma) |d_gt - d_pre| + ln sigma.
inline double depth_loss(double d_gt, double d_pre, double sigma) {
  if (sigma <= 0) throw std::invalid_argument("depth_loss: sigma must be positive");
  return 2.0 / sigma * std::fabs(d_gt - d_pre) + std::log(sigma);
}

/// Batched form parameterized by s = ln(sigma), so positivity is structural
/// and the ln(sigma) term is s itself. Output: mean over queries.
inline Var depth_loss_vars(const Tensor& d_gt, const Var& d_pre, const Var& log_sigma) {
  const int b = d_pre->value.size();
  Var sigma = exp_op(log_sigma);
  Var resid = abs_op(sub(d_pre, constant(d_gt)));
  Var term = add(mul(div(constant(Tensor::full({b}, 2.0)), sigma), resid), log_sigma);
  return mean_all(term);
}

// ---------------------------------------------------------------------------
// Composite detection losses
// ---------------------------------------------------------------------------

/// Ground-truth targets gathered for the matched queries of one image.
/// Box quantities are normalized to the image extent.
struct MatchedTargets {
  Tensor lrtb;         // [B, 4]
  Tensor center;       // [B, 2]
  Tensor dims;         // [B, 3] meters
  Tensor angle;        // [B, 2] (sin, cos)
  Tensor depth;        // [B] meters
  Tensor scale_cells;  // [B] ground-truth scale l_hat
  std::vector<Box> boxes;  // normalized corner boxes

  int count() const { return lrtb.ndim() ? lrtb.dim(0) : 0; }
};

/// Matched predictions of one image, rows aligned with MatchedTargets.
struct MatchedPreds {
  Var lrtb;    // [B, 4] normalized
  Var center;  // [B, 2] normalized
  Var dims;    // [B, 3]
  Var angle;   // [B, 2]
  Var d_pre;   // [B] fused depth, meters
  Var log_sigma;  // [B]
};

struct Loss2dTerms {
  Var classification, size2d, center3d, giou;
  Var total;
};

/// 2D objective: focal classification over all queries plus L1 and GIoU terms
/// on the matched boxes.
inline Loss2dTerms loss_2d(const Var& class_logits, const Tensor& class_targets,
                           const MatchedPreds& preds, const MatchedTargets& targets,
                           const LossWeights& weights) {
  Loss2dTerms terms;
  const int matched = targets.count();
  terms.classification = focal_loss(class_logits, class_targets, matched);
  if (matched > 0) {
    terms.size2d = l1_loss(preds.lrtb, targets.lrtb);
    terms.center3d = l1_loss(preds.center, targets.center);
    Var cx = reshape(slice_cols(preds.center, 0, 1), {matched});
    Var cy = reshape(slice_cols(preds.center, 1, 2), {matched});
    Var l = reshape(slice_cols(preds.lrtb, 0, 1), {matched});
    Var r = reshape(slice_cols(preds.lrtb, 1, 2), {matched});
    Var t = reshape(slice_cols(preds.lrtb, 2, 3), {matched});
    Var b = reshape(slice_cols(preds.lrtb, 3, 4), {matched});
    terms.giou = giou_loss(sub(cx, l), sub(cy, t), add(cx, r), add(cy, b), targets.boxes);
  } else {
    terms.size2d = constant_scalar(0.0);
    terms.center3d = constant_scalar(0.0);
    terms.giou = constant_scalar(0.0);
  }
  terms.total = add(add(scale(terms.classification, weights.lambda1),
                        scale(terms.size2d, weights.lambda2)),
                    add(scale(terms.center3d, weights.lambda3), scale(terms.giou, weights.lambda4)));
  return terms;
}

struct Loss3dTerms {
  Var size3d, angle, depth;
  Var total;
};

/// 3D objective: L1 on 3D sizes, L1 on the (sin, cos) orientation encoding,
/// and the Laplacian uncertainty depth loss on the fused estimate.
inline Loss3dTerms loss_3d(const MatchedPreds& preds, const MatchedTargets& targets,
                           const LossWeights& weights) {
  Loss3dTerms terms;
  if (targets.count() > 0) {
    terms.size3d = l1_loss(preds.dims, targets.dims);
    terms.angle = l1_loss(preds.angle, targets.angle);
    terms.depth = depth_loss_vars(targets.depth, preds.d_pre, preds.log_sigma);
  } else {
    terms.size3d = constant_scalar(0.0);
    terms.angle = constant_scalar(0.0);
    terms.depth = constant_scalar(0.0);
  }
  terms.total = add(add(scale(terms.size3d, weights.lambda5), scale(terms.angle, weights.lambda6)),
                    scale(terms.depth, weights.lambda7));
  return terms;
}

/// Composite objective: L_2D + L_3D + lambda8 * L_WSM.
inline Var total_loss(const Var& l2d, const Var& l3d, const Var& lwsm,
                      const LossWeights& weights) {
  return add(add(l2d, l3d), scale(lwsm, weights.lambda8));
}

}  // namespace scaledet
