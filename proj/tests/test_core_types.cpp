#include <gtest/gtest.h>

#include "scaledet/core_types.hpp"

namespace scaledet {
namespace {

TEST(NormalizePosition, SpecExamples) {
  const auto zero = normalize_position({0, 0}, {640, 192});
  EXPECT_DOUBLE_EQ(zero.first, 0.0);
  EXPECT_DOUBLE_EQ(zero.second, 0.0);
  const auto extent = normalize_position({640, 192}, {640, 192});
  EXPECT_DOUBLE_EQ(extent.first, 1.0);
  EXPECT_DOUBLE_EQ(extent.second, 1.0);
  const auto mid = normalize_position({320, 48}, {640, 192});
  EXPECT_DOUBLE_EQ(mid.first, 0.5);
  EXPECT_DOUBLE_EQ(mid.second, 0.25);
}

TEST(NormalizePosition, RoundTripsWithInverse) {
  const std::pair<double, double> size{640, 192};
  const std::pair<double, double> p{123.456, 78.9};
  const auto norm = normalize_position(p, size);
  const auto back = denormalize_position(norm, size);
  EXPECT_NEAR(back.first, p.first, 1e-9);
  EXPECT_NEAR(back.second, p.second, 1e-9);
}

TEST(NormalizePosition, ClampsAndCounts) {
  ClampStats stats;
  const auto clamped = normalize_position({-5, 200}, {640, 192}, &stats);
  EXPECT_DOUBLE_EQ(clamped.first, 0.0);
  EXPECT_DOUBLE_EQ(clamped.second, 1.0);
  EXPECT_EQ(stats.clamped, 1);
  normalize_position({10, 10}, {640, 192}, &stats);
  EXPECT_EQ(stats.clamped, 1);
  EXPECT_THROW(normalize_position({0, 0}, {0, 192}), std::invalid_argument);
}

TEST(GroundTruthScale, SpecExamples) {
  SceneLabel label;
  label.depth = 10;
  label.h3d = label.w3d = label.l3d = 1;
  label.left = 32;
  label.right = 48;
  EXPECT_DOUBLE_EQ(ground_truth_scale(label), 5.0);
  label.left = label.right = 8;
  EXPECT_DOUBLE_EQ(ground_truth_scale(label), 1.0);
  label.left = label.right = 0;
  EXPECT_THROW(ground_truth_scale(label), std::invalid_argument);
}

TEST(GroundTruthScale, LinearInBoxWidth) {
  SceneLabel label;
  label.depth = 10;
  label.h3d = label.w3d = label.l3d = 1;
  label.left = 12.5;
  label.right = 20.5;
  const double base = ground_truth_scale(label);
  label.left *= 2.0;
  label.right *= 2.0;
  EXPECT_NEAR(ground_truth_scale(label), 2.0 * base, 1e-12);
}

TEST(ScaleSetType, ValidatesShape) {
  EXPECT_NO_THROW(ScaleSet({1, 3, 5, 7, 9}, 1));
  EXPECT_NO_THROW(ScaleSet({1, 3, 5}, 3));
  EXPECT_THROW(ScaleSet({3}, 1), std::invalid_argument);         // too few
  EXPECT_THROW(ScaleSet({2, 4}, 1), std::invalid_argument);      // even
  EXPECT_THROW(ScaleSet({5, 3}, 1), std::invalid_argument);      // not increasing
  EXPECT_THROW(ScaleSet({3, 3}, 1), std::invalid_argument);      // not strict
  EXPECT_THROW(ScaleSet({1, 3}, 0), std::invalid_argument);      // bad expansion
  EXPECT_THROW(ScaleSet({-1, 3}, 1), std::invalid_argument);     // nonpositive
}

TEST(MaskSpecType, OffsetsAreClosedUnderNegation) {
  for (int scale : {1, 3, 5, 7, 9}) {
    for (int vexp : {1, 2, 3}) {
      const MaskSpec mask = MaskSpec::make(2.0, 3.0, scale, vexp);
      ASSERT_EQ(static_cast<int>(mask.offsets.size()), scale * scale);
      for (const auto& [dx, dy] : mask.offsets) {
        const bool found = std::any_of(mask.offsets.begin(), mask.offsets.end(),
                                       [&](const std::pair<double, double>& o) {
                                         return o.first == -dx && o.second == -dy;
                                       });
        EXPECT_TRUE(found);
      }
    }
  }
  EXPECT_THROW(MaskSpec::make(0, 0, 4, 1), std::invalid_argument);
}

TEST(MaskSpecType, VerticalExpansionStretchesRows) {
  const MaskSpec mask = MaskSpec::make(0, 0, 3, 3);
  double max_dy = 0;
  for (const auto& [dx, dy] : mask.offsets) max_dy = std::max(max_dy, dy);
  EXPECT_DOUBLE_EQ(max_dy, 3.0);
}

TEST(ScaleDistributionType, SimplexCheck) {
  ScaleDistribution p;
  p.probs = {0.2, 0.3, 0.5};
  EXPECT_TRUE(p.is_simplex());
  p.probs = {0.2, 0.3, 0.4};
  EXPECT_FALSE(p.is_simplex());
  p.probs = {-0.1, 0.6, 0.5};
  EXPECT_FALSE(p.is_simplex());
}

TEST(SceneLabelType, ValidationAndDerivedBox) {
  SceneLabel label;
  label.left = 10;
  label.right = 14;
  label.top = 6;
  label.bottom = 8;
  label.center_x = 100;
  label.center_y = 50;
  label.depth = 12;
  label.h3d = 1.5;
  label.w3d = 1.7;
  label.l3d = 4.0;
  EXPECT_NO_THROW(label.validate());
  EXPECT_DOUBLE_EQ(label.box_x1(), 90);
  EXPECT_DOUBLE_EQ(label.box_x2(), 114);
  EXPECT_DOUBLE_EQ(label.width2d_cells(), 1.5);
  label.depth = 0;
  EXPECT_THROW(label.validate(), std::invalid_argument);
}

TEST(LossWeightsType, DefaultsMatchConfiguredValues) {
  const LossWeights w;
  EXPECT_DOUBLE_EQ(w.lambda1, 2.0);
  EXPECT_DOUBLE_EQ(w.lambda2, 10.0);
  EXPECT_DOUBLE_EQ(w.lambda3, 5.0);
  EXPECT_DOUBLE_EQ(w.lambda4, 2.0);
  EXPECT_DOUBLE_EQ(w.lambda5, 1.0);
  EXPECT_DOUBLE_EQ(w.lambda6, 1.0);
  EXPECT_DOUBLE_EQ(w.lambda7, 1.0);
  EXPECT_DOUBLE_EQ(w.lambda8, 0.2);
  LossWeights bad;
  bad.lambda3 = -1;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(FeatureMapType, RejectsNonFinite) {
  Tensor t({2, 2, 3});
  EXPECT_NO_THROW(FeatureMap{t});
  t.at(0, 1, 2) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(FeatureMap{t}, std::invalid_argument);
}

TEST(CalibrationType, Validation) {
  Calibration calib;
  EXPECT_NO_THROW(calib.validate());
  calib.focal_length = 0;
  EXPECT_THROW(calib.validate(), std::invalid_argument);
}

}  // namespace
}  // namespace scaledet
