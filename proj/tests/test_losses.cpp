#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "scaledet/losses.hpp"
#include "scaledet/matching.hpp"
#include "test_util.hpp"

namespace scaledet {
namespace {

using testutil::max_grad_rel_error;

constexpr double kGradTol = 1e-4;

// Exhaustive assignment oracle for small instances.
double brute_force_assignment(const std::vector<std::vector<double>>& cost) {
  const int m = static_cast<int>(cost.size());
  const int n = static_cast<int>(cost[0].size());
  std::vector<int> cols(static_cast<std::size_t>(n));
  std::iota(cols.begin(), cols.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double total = 0;
    for (int i = 0; i < m; ++i) total += cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(cols[static_cast<std::size_t>(i)])];
    best = std::min(best, total);
  } while (std::next_permutation(cols.begin(), cols.end()));
  return best;
}

TEST(HungarianSolver, TwoByTwoExample) {
  const auto assign = solve_assignment({{1, 2}, {2, 1}});
  EXPECT_EQ(assign[0], 0);
  EXPECT_EQ(assign[1], 1);
}

TEST(HungarianSolver, SingleRowPicksArgmin) {
  const auto assign = solve_assignment({{5, 1}});
  EXPECT_EQ(assign[0], 1);
}

TEST(HungarianSolver, MatchesBruteForceOnRandomInstances) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> dist(0.0, 10.0);
  for (int trial = 0; trial < 60; ++trial) {
    const int m = 1 + static_cast<int>(rng() % 6);
    const int n = m + static_cast<int>(rng() % (7 - m));
    std::vector<std::vector<double>> cost(static_cast<std::size_t>(m),
                                          std::vector<double>(static_cast<std::size_t>(n)));
    for (auto& row : cost)
      for (auto& v : row) v = dist(rng);
    const auto assign = solve_assignment(cost);
    double total = 0;
    std::vector<char> used(static_cast<std::size_t>(n), 0);
    for (int i = 0; i < m; ++i) {
      ASSERT_GE(assign[static_cast<std::size_t>(i)], 0);
      ASSERT_FALSE(used[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])]);
      used[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])] = 1;
      total += cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
    }
    EXPECT_NEAR(total, brute_force_assignment(cost), 1e-9);
  }
}

TEST(HungarianMatch, EmptyLabelsLeaveAllQueriesUnmatched) {
  std::vector<QuerySnapshot> queries(3);
  for (auto& q : queries) q.class_probs = {0.5};
  const auto match = hungarian_match(queries, {}, 640, 192);
  EXPECT_TRUE(match.pairs.empty());
  EXPECT_EQ(static_cast<int>(match.unmatched_queries.size()), 3);
}

TEST(HungarianMatch, RejectsMoreLabelsThanQueries) {
  std::vector<QuerySnapshot> queries(1);
  queries[0].class_probs = {0.5};
  std::vector<SceneLabel> labels(2);
  for (auto& l : labels) {
    l.left = l.right = l.top = l.bottom = 8;
    l.depth = 10;
    l.h3d = l.w3d = l.l3d = 1;
  }
  EXPECT_THROW(hungarian_match(queries, labels, 640, 192), std::invalid_argument);
}

TEST(HungarianMatch, PrefersTheOverlappingQuery) {
  SceneLabel label;
  label.center_x = 100;
  label.center_y = 100;
  label.left = label.right = label.top = label.bottom = 20;
  label.depth = 10;
  label.h3d = label.w3d = label.l3d = 1;
  std::vector<QuerySnapshot> queries(2);
  for (auto& q : queries) {
    q.class_probs = {0.9};
    q.left = q.right = 20.0 / 640;
    q.top = q.bottom = 20.0 / 192;
  }
  queries[0].cx = 100.0 / 640;
  queries[0].cy = 100.0 / 192;
  queries[1].cx = 400.0 / 640;
  queries[1].cy = 50.0 / 192;
  const auto match = hungarian_match(queries, {label}, 640, 192);
  ASSERT_EQ(match.pairs.size(), 1u);
  EXPECT_EQ(match.pairs[0].first, 0);
  EXPECT_EQ(match.pairs[0].second, 0);
  ASSERT_EQ(match.unmatched_queries.size(), 1u);
  EXPECT_EQ(match.unmatched_queries[0], 1);
}

TEST(ScaleLoss, LiteralSpecExample) {
  const ScaleSet scales({1, 3, 5, 7, 9}, 1);
  ScaleDistribution p;
  p.probs = {0, 0, 1, 0, 0};
  EXPECT_NEAR(scale_loss(p, 5.0, scales, ScaleLossMode::kLiteral), 4.0, 1e-12);
  EXPECT_NEAR(scale_loss(p, 5.0, scales, ScaleLossMode::kExpected), 0.0, 1e-12);
}

TEST(ScaleLoss, UniformDistributionExpectedModeHitsTheMean) {
  const ScaleSet scales({1, 3, 5, 7, 9}, 1);
  ScaleDistribution p;
  p.probs = {0.2, 0.2, 0.2, 0.2, 0.2};
  EXPECT_NEAR(scale_loss(p, 5.0, scales, ScaleLossMode::kExpected), 0.0, 1e-12);
}

TEST(ScaleLoss, LiteralBoundsTheScaledTargetResidual) {
  // Triangle inequality: sum_l |P_l*l - l_hat| >= |sum_l P_l*l - N_l*l_hat|,
  // i.e. literal >= |E - N_l*l_hat| / N_l. (The tighter-looking bound against
  // |E - l_hat| / N_l is false in general: put P_l proportional to 1/l so
  // every per-scale product matches l_hat while E drifts to N_l*l_hat.)
  const ScaleSet scales({1, 3, 5, 7, 9}, 1);
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    ScaleDistribution p;
    p.probs.resize(5);
    double z = 0;
    for (auto& v : p.probs) {
      v = -std::log(unit(rng));
      z += v;
    }
    for (auto& v : p.probs) v /= z;
    const double target = 1.0 + 8.0 * unit(rng);
    const double literal = scale_loss(p, target, scales, ScaleLossMode::kLiteral);
    double expected_scale = 0;
    for (int i = 0; i < 5; ++i) expected_scale += p.probs[static_cast<std::size_t>(i)] * scales.scales[static_cast<std::size_t>(i)];
    EXPECT_GE(literal + 1e-12, std::fabs(expected_scale - scales.count() * target) / scales.count());
  }
}

TEST(ScaleLoss, GradientBothModes) {
  const ScaleSet scales({1, 3, 5, 7, 9}, 1);
  Var logits = leaf(Tensor::from({0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.6, -0.1, 0.0, 0.4}, {2, 5}));
  const Tensor targets = Tensor::from({4.3, 6.1}, {2});
  for (auto mode : {ScaleLossMode::kLiteral, ScaleLossMode::kExpected}) {
    EXPECT_LT(max_grad_rel_error(
                  [&] {
                    return sum_all(scale_losses(softmax_rows(logits), targets, scales, mode));
                  },
                  {logits}),
              kGradTol);
  }
}

// Independent ranking oracle: counts rather than sorts.
std::vector<int> counting_ranks_desc(const std::vector<double>& values) {
  std::vector<int> ranks(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    int rank = 0;
    for (std::size_t j = 0; j < values.size(); ++j) {
      if (values[j] > values[i]) ++rank;
      else if (values[j] == values[i] && j < i) ++rank;
    }
    ranks[i] = rank;
  }
  return ranks;
}

TEST(WsmWeights, IdenticalRankingsGiveZero) {
  RankBatch batch;
  batch.predicted_scales = {9.1, 5.2, 3.3};
  batch.true_scales = {8.0, 5.0, 2.0};
  for (double w : wsm_weights(batch)) EXPECT_DOUBLE_EQ(w, 0.0);
}

TEST(WsmWeights, HandRankingExample) {
  RankBatch batch;
  batch.true_scales = {9, 5, 3};
  batch.predicted_scales = {4, 8, 3};
  const auto w = wsm_weights(batch);
  EXPECT_NEAR(w[0], std::log(2.0), 1e-12);
  EXPECT_NEAR(w[1], std::log(2.0), 1e-12);
  EXPECT_NEAR(w[2], 0.0, 1e-12);
}

TEST(WsmWeights, ReversedPairBothLogTwo) {
  RankBatch batch;
  batch.true_scales = {2, 7};
  batch.predicted_scales = {7, 2};
  const auto w = wsm_weights(batch);
  EXPECT_NEAR(w[0], std::log(2.0), 1e-12);
  EXPECT_NEAR(w[1], std::log(2.0), 1e-12);
}

TEST(WsmWeights, MatchesCountingOracleOnRandomBatches) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 32);
    RankBatch batch;
    for (int i = 0; i < n; ++i) {
      // Duplicates on purpose: ties must break by original index.
      batch.predicted_scales.push_back(static_cast<double>(rng() % 12));
      batch.true_scales.push_back(static_cast<double>(rng() % 12));
    }
    const auto got = wsm_weights(batch);
    const auto rt = counting_ranks_desc(batch.true_scales);
    const auto rp = counting_ranks_desc(batch.predicted_scales);
    for (int i = 0; i < n; ++i) {
      EXPECT_DOUBLE_EQ(got[static_cast<std::size_t>(i)],
                       std::log(std::abs(rt[static_cast<std::size_t>(i)] -
                                         rp[static_cast<std::size_t>(i)]) + 1.0));
    }
  }
}

TEST(WsmWeights, PermutationEquivariantAndMonotoneInvariant) {
  // Distinct scales: with ties, the stable original-index rule is
  // deliberately order-dependent.
  RankBatch batch;
  batch.true_scales = {9, 5, 3, 7, 4.5};
  batch.predicted_scales = {4.2, 8.1, 3.3, 7.7, 1.2};
  const auto base = wsm_weights(batch);

  const std::vector<int> perm = {3, 0, 4, 1, 2};
  RankBatch permuted;
  for (int i : perm) {
    permuted.true_scales.push_back(batch.true_scales[static_cast<std::size_t>(i)]);
    permuted.predicted_scales.push_back(batch.predicted_scales[static_cast<std::size_t>(i)]);
  }
  const auto pw = wsm_weights(permuted);
  for (std::size_t i = 0; i < perm.size(); ++i)
    EXPECT_DOUBLE_EQ(pw[i], base[static_cast<std::size_t>(perm[i])]);

  RankBatch rescaled = batch;
  for (auto& v : rescaled.predicted_scales) v = std::exp(0.7 * v) + 2.0;  // strictly monotone
  const auto rw = wsm_weights(rescaled);
  for (std::size_t i = 0; i < base.size(); ++i) EXPECT_DOUBLE_EQ(rw[i], base[i]);
}

TEST(WsmLoss, SpecExamples) {
  // All ranks agree -> zero loss.
  Var losses = constant(Tensor::from({4.0, 4.0, 1.0}, {3}));
  EXPECT_DOUBLE_EQ(wsm_loss({0, 0, 0}, losses)->value[0], 0.0);
  // Hand arithmetic: (4 ln2 + 4 ln2) / 3.
  const double expect = (4.0 * std::log(2.0) + 4.0 * std::log(2.0)) / 3.0;
  EXPECT_NEAR(wsm_loss({std::log(2.0), std::log(2.0), 0.0}, losses)->value[0], expect, 1e-12);
  EXPECT_NEAR(expect, 1.848, 2e-3);
  // Singleton batch necessarily has weight zero.
  RankBatch single;
  single.predicted_scales = {3.0};
  single.true_scales = {5.0};
  const auto w = wsm_weights(single);
  EXPECT_DOUBLE_EQ(wsm_loss(w, constant(Tensor::from({2.5}, {1})))->value[0], 0.0);
}

TEST(WsmLoss, NonnegativeForRankWeights) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 16);
    RankBatch batch;
    Tensor losses({n});
    for (int i = 0; i < n; ++i) {
      batch.predicted_scales.push_back((rng() % 90) / 10.0);
      batch.true_scales.push_back((rng() % 90) / 10.0);
      losses[i] = (rng() % 100) / 25.0;
    }
    const double v = wsm_loss(wsm_weights(batch), constant(losses))->value[0];
    EXPECT_GE(v, 0.0);
  }
}

TEST(WsmLoss, GradientFlowsThroughLossesOnly) {
  const ScaleSet scales({1, 3, 5}, 1);
  Var logits = leaf(Tensor::from({0.2, -0.3, 0.4, 0.1, 0.5, -0.2}, {2, 3}));
  const Tensor targets = Tensor::from({2.4, 4.6}, {2});
  const std::vector<double> weights = {std::log(2.0), 0.7};
  EXPECT_LT(max_grad_rel_error(
                [&] {
                  Var per_query =
                      scale_losses(softmax_rows(logits), targets, scales, ScaleLossMode::kLiteral);
                  return wsm_loss(weights, per_query);
                },
                {logits}),
            kGradTol);
}

TEST(WsmLoss, AllThreeWeightModesRunOnTheSameBatch) {
  RankBatch batch;
  batch.predicted_scales = {4.0, 8.0, 3.0};
  batch.true_scales = {9.0, 5.0, 3.0};
  const std::vector<double> losses = {1.5, 0.8, 2.0};
  for (auto mode : {WsmWeightMode::kRank, WsmWeightMode::kConstant, WsmWeightMode::kLogLoss}) {
    const auto w = wsm_weights_for_mode(batch, losses, mode);
    ASSERT_EQ(w.size(), 3u);
    Var loss = wsm_loss(w, constant(Tensor::from({1.5, 0.8, 2.0}, {3})));
    EXPECT_TRUE(std::isfinite(loss->value[0]));
  }
  const auto constant_w = wsm_weights_for_mode(batch, losses, WsmWeightMode::kConstant);
  for (double w : constant_w) EXPECT_DOUBLE_EQ(w, 1.0);
  const auto log_w = wsm_weights_for_mode(batch, losses, WsmWeightMode::kLogLoss);
  EXPECT_NEAR(log_w[0], std::log(1.5), 1e-12);
}

TEST(DepthGeo, SpecExamples) {
  EXPECT_DOUBLE_EQ(depth_geo(100, 2, 25, 15), 5.0);
  EXPECT_DOUBLE_EQ(depth_geo(720, 1.5, 30, 24), 20.0);
  EXPECT_DOUBLE_EQ(depth_geo(100, 2, 40, 40), 0.5 * depth_geo(100, 2, 20, 20));
  ClampStats stats;
  EXPECT_DOUBLE_EQ(depth_geo(100, 2, 0.2, 0.3, &stats), 200.0);  // clamped to 1 px
  EXPECT_EQ(stats.clamped, 1);
}

TEST(DepthFuse, SpecExamples) {
  EXPECT_DOUBLE_EQ(depth_fuse(10, 12, 14), 12.0);
  EXPECT_DOUBLE_EQ(depth_fuse(7.5, 7.5, 7.5), 7.5);
  EXPECT_DOUBLE_EQ(depth_fuse(0, 0, 3), 1.0);
}

TEST(DepthEstimateType, FusesAndValidates) {
  DepthEstimate est{10, 12, 14, 0.5};
  EXPECT_DOUBLE_EQ(est.d_pre(), 12.0);
  EXPECT_NO_THROW(est.validate());
  est.sigma = 0;
  EXPECT_THROW(est.validate(), std::invalid_argument);
}

TEST(DepthLoss, SpecExamples) {
  EXPECT_DOUBLE_EQ(depth_loss(12, 12, 1.0), 0.0);
  EXPECT_NEAR(depth_loss(13, 12, 2.0), 1.0 + std::log(2.0), 1e-12);
  EXPECT_THROW(depth_loss(10, 10, 0.0), std::invalid_argument);
}

TEST(DepthLoss, OptimalSigmaIsTwiceTheResidual) {
  const double r = 1.7;
  const double opt = 2.0 * r;
  const double at_opt = depth_loss(r, 0, opt);
  EXPECT_LT(at_opt, depth_loss(r, 0, opt * 1.01));
  EXPECT_LT(at_opt, depth_loss(r, 0, opt * 0.99));
}

TEST(DepthLoss, GradientThroughFusionAndLogSigma) {
  Var d_reg = leaf(Tensor::from({9.5, 14.2}, {2}));
  Var d_geo = leaf(Tensor::from({10.4, 15.8}, {2}));
  Var d_map = leaf(Tensor::from({11.1, 13.9}, {2}));
  Var log_sigma = leaf(Tensor::from({0.3, -0.2}, {2}));
  const Tensor gt = Tensor::from({10.0, 16.0}, {2});
  EXPECT_LT(max_grad_rel_error(
                [&] {
                  return depth_loss_vars(gt, depth_fuse_vars(d_reg, d_geo, d_map), log_sigma);
                },
                {d_reg, d_geo, d_map, log_sigma}),
            kGradTol);
}

TEST(GiouLoss, IdenticalBoxesGiveZero) {
  Var cx = constant(Tensor::from({0.5}, {1}));
  Var cy = constant(Tensor::from({0.4}, {1}));
  Var l = constant(Tensor::from({0.1}, {1}));
  Var t = constant(Tensor::from({0.05}, {1}));
  const std::vector<Box> gt = {Box{0.4, 0.35, 0.6, 0.45}};
  Var loss = giou_loss(sub(cx, l), sub(cy, t), add(cx, l), add(cy, t), gt);
  EXPECT_NEAR(loss->value[0], 0.0, 1e-12);
}

TEST(GiouLoss, MatchesPlainGiouOnRandomBoxes) {
  std::mt19937_64 rng(19);
  std::uniform_real_distribution<double> unit(0.05, 0.95);
  for (int trial = 0; trial < 200; ++trial) {
    const Box a{unit(rng), unit(rng), 0, 0};
    Box pa{a.x1, a.y1, a.x1 + unit(rng) * 0.5, a.y1 + unit(rng) * 0.5};
    Box gb{unit(rng), unit(rng), 0, 0};
    gb.x2 = gb.x1 + unit(rng) * 0.5;
    gb.y2 = gb.y1 + unit(rng) * 0.5;
    Var px1 = constant(Tensor::from({pa.x1}, {1}));
    Var py1 = constant(Tensor::from({pa.y1}, {1}));
    Var px2 = constant(Tensor::from({pa.x2}, {1}));
    Var py2 = constant(Tensor::from({pa.y2}, {1}));
    Var loss = giou_loss(px1, py1, px2, py2, {gb});
    EXPECT_NEAR(loss->value[0], 1.0 - box_giou(pa, gb), 1e-10);
  }
}

TEST(GiouLoss, GradientOnOverlappingBoxes) {
  Var cx = leaf(Tensor::from({0.523, 0.311}, {2}));
  Var cy = leaf(Tensor::from({0.481, 0.643}, {2}));
  Var l = leaf(Tensor::from({0.113, 0.141}, {2}));
  Var r = leaf(Tensor::from({0.092, 0.123}, {2}));
  Var t = leaf(Tensor::from({0.061, 0.082}, {2}));
  Var b = leaf(Tensor::from({0.073, 0.051}, {2}));
  const std::vector<Box> gt = {Box{0.40, 0.40, 0.62, 0.55}, Box{0.20, 0.55, 0.45, 0.72}};
  EXPECT_LT(max_grad_rel_error(
                [&] { return giou_loss(sub(cx, l), sub(cy, t), add(cx, r), add(cy, b), gt); },
                {cx, cy, l, r, t, b}),
            kGradTol);
}

TEST(FocalLoss, GradientAndPerfectPrediction) {
  Var logits = leaf(Tensor::from({2.3, -1.7, 0.4, -0.6}, {2, 2}));
  Tensor targets = Tensor::zeros({2, 2});
  targets.at(0, 0) = 1.0;
  EXPECT_LT(max_grad_rel_error([&] { return focal_loss(logits, targets, 1); }, {logits}),
            kGradTol);
  // Saturating correct logits drive the loss toward zero.
  Var confident = constant(Tensor::from({30.0, -30.0, -30.0, -30.0}, {2, 2}));
  EXPECT_NEAR(focal_loss(confident, targets, 1)->value[0], 0.0, 1e-9);
}

TEST(CompositeLosses, PerfectPredictionsZeroTheResidualTerms) {
  MatchedTargets targets;
  targets.lrtb = Tensor::from({0.1, 0.1, 0.05, 0.05}, {1, 4});
  targets.center = Tensor::from({0.5, 0.5}, {1, 2});
  targets.dims = Tensor::from({1.5, 1.7, 4.2}, {1, 3});
  targets.angle = Tensor::from({std::sin(0.3), std::cos(0.3)}, {1, 2});
  targets.depth = Tensor::from({12.0}, {1});
  targets.scale_cells = Tensor::from({8.0}, {1});
  targets.boxes = {Box{0.4, 0.45, 0.6, 0.55}};

  MatchedPreds preds;
  preds.lrtb = constant(targets.lrtb);
  preds.center = constant(targets.center);
  preds.dims = constant(targets.dims);
  preds.angle = constant(targets.angle);
  preds.d_pre = constant(targets.depth);
  preds.log_sigma = constant(Tensor::zeros({1}));

  Tensor class_targets = Tensor::from({1.0}, {1, 1});
  Var logits = constant(Tensor::from({3.0}, {1, 1}));
  const LossWeights weights;
  Loss2dTerms l2d = loss_2d(logits, class_targets, preds, targets, weights);
  EXPECT_NEAR(l2d.size2d->value[0], 0.0, 1e-12);
  EXPECT_NEAR(l2d.center3d->value[0], 0.0, 1e-12);
  EXPECT_NEAR(l2d.giou->value[0], 0.0, 1e-12);
  Loss3dTerms l3d = loss_3d(preds, targets, weights);
  EXPECT_NEAR(l3d.total->value[0], 0.0, 1e-12);
}

TEST(CompositeLosses, AnglePeriodicity) {
  MatchedTargets targets;
  const double alpha = 0.8;
  targets.angle = Tensor::from({std::sin(alpha), std::cos(alpha)}, {1, 2});
  targets.dims = Tensor::from({1, 1, 1}, {1, 3});
  targets.depth = Tensor::from({10.0}, {1});
  targets.lrtb = Tensor::from({0.1, 0.1, 0.1, 0.1}, {1, 4});
  targets.center = Tensor::from({0.5, 0.5}, {1, 2});
  targets.scale_cells = Tensor::from({5.0}, {1});
  targets.boxes = {Box{0.4, 0.4, 0.6, 0.6}};

  const double shifted = alpha + 2.0 * M_PI;
  MatchedTargets targets_shifted = targets;
  targets_shifted.angle = Tensor::from({std::sin(shifted), std::cos(shifted)}, {1, 2});

  MatchedPreds preds;
  preds.dims = constant(targets.dims);
  preds.angle = constant(Tensor::from({0.2, 0.9}, {1, 2}));
  preds.d_pre = constant(targets.depth);
  preds.log_sigma = constant(Tensor::zeros({1}));
  preds.lrtb = constant(targets.lrtb);
  preds.center = constant(targets.center);

  const LossWeights weights;
  EXPECT_NEAR(loss_3d(preds, targets, weights).total->value[0],
              loss_3d(preds, targets_shifted, weights).total->value[0], 1e-12);
}

TEST(TotalLoss, SpecExamples) {
  LossWeights weights;
  EXPECT_DOUBLE_EQ(
      total_loss(constant_scalar(0), constant_scalar(0), constant_scalar(0), weights)->value[0],
      0.0);
  EXPECT_DOUBLE_EQ(
      total_loss(constant_scalar(1), constant_scalar(2), constant_scalar(5), weights)->value[0],
      4.0);
  weights.lambda8 = 0.0;
  EXPECT_DOUBLE_EQ(
      total_loss(constant_scalar(1), constant_scalar(2), constant_scalar(5), weights)->value[0],
      3.0);
}

}  // namespace
}  // namespace scaledet
