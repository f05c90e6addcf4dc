#pragma once

#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

#include "scaledet/tensor.hpp"

namespace scaledet {

/// Feature-map cells per image pixel along each axis.
inline constexpr int kFeatureStride = 16;

/// Dense H x W x C grid of embeddings on the stride-16 grid. Immutable value
/// object; visual and depth maps for one image share the same extent.
struct FeatureMap {
  Tensor values;  // [height, width, channels]

  FeatureMap() = default;
  explicit FeatureMap(Tensor t) : values(std::move(t)) {
    if (values.ndim() != 3) throw std::invalid_argument("FeatureMap: expected rank-3 tensor");
    if (!values.all_finite()) throw std::invalid_argument("FeatureMap: non-finite values");
  }

  int height() const { return values.dim(0); }
  int width() const { return values.dim(1); }
  int channels() const { return values.dim(2); }
  bool same_extent(const FeatureMap& o) const { return values.shape() == o.values.shape(); }
};

/// One decoder slot: a feature embedding plus a normalized 2D position in
/// [0,1]^2 relative to the feature-map extent.
struct Query {
  std::vector<double> feature;
  double x = 0.5;
  double y = 0.5;

  void validate() const {
    if (x < 0.0 || x > 1.0 || y < 0.0 || y > 1.0)
      throw std::invalid_argument("Query: position outside [0,1]^2");
    for (double v : feature)
      if (!std::isfinite(v)) throw std::invalid_argument("Query: non-finite feature");
  }
};

/// The preset mask side lengths, in feature-map cells, plus the per-category
/// vertical expansion factor applied to mask rows.
struct ScaleSet {
  std::vector<int> scales;
  int vertical_expansion = 1;

  ScaleSet() = default;
  ScaleSet(std::vector<int> s, int vexp) : scales(std::move(s)), vertical_expansion(vexp) {
    validate();
  }

  int count() const { return static_cast<int>(scales.size()); }

  void validate() const {
    if (scales.size() < 2) throw std::invalid_argument("ScaleSet: need at least two scales");
    if (vertical_expansion < 1) throw std::invalid_argument("ScaleSet: vertical expansion < 1");
    int prev = 0;
    for (int s : scales) {
      if (s <= 0 || s % 2 == 0)
        throw std::invalid_argument("ScaleSet: scales must be odd and positive");
      if (s <= prev) throw std::invalid_argument("ScaleSet: scales must be strictly increasing");
      prev = s;
    }
  }
};

/// The sampling grid of one mask: l x l offsets centered on zero, vertical
/// steps stretched by the scale set's expansion factor.
struct MaskSpec {
  double center_x = 0.0;  // continuous feature-map cells
  double center_y = 0.0;
  int scale = 1;
  std::vector<std::pair<double, double>> offsets;  // (dx, dy * v)

  static MaskSpec make(double cx, double cy, int scale, int vexp) {
    if (scale <= 0 || scale % 2 == 0) throw std::invalid_argument("MaskSpec: scale must be odd");
    MaskSpec m;
    m.center_x = cx;
    m.center_y = cy;
    m.scale = scale;
    const int half = (scale - 1) / 2;
    m.offsets.reserve(static_cast<std::size_t>(scale) * scale);
    for (int dy = -half; dy <= half; ++dy)
      for (int dx = -half; dx <= half; ++dx)
        m.offsets.emplace_back(static_cast<double>(dx), static_cast<double>(dy) * vexp);
    return m;
  }
};

/// Per-query probability vector over the preset scales, aligned
/// index-for-index with ScaleSet::scales.
struct ScaleDistribution {
  std::vector<double> probs;

  bool is_simplex(double tol = 1e-6) const {
    double s = 0.0;
    for (double p : probs) {
      if (p < 0.0) return false;
      s += p;
    }
    return std::fabs(s - 1.0) <= tol;
  }
};

/// Ground-truth object record shared by the synthetic generator and the
/// KITTI-format parser. Box edges are distances from the projected 3D center,
/// in image pixels.
struct SceneLabel {
  int class_id = 0;
  double left = 0.0, right = 0.0, top = 0.0, bottom = 0.0;  // (l, r, t, b) >= 0
  double center_x = 0.0, center_y = 0.0;                    // projected 3D center, pixels
  double h3d = 0.0, w3d = 0.0, l3d = 0.0;                   // meters
  double alpha = 0.0;                                       // yaw, radians
  double depth = 0.0;                                       // meters
  bool truncated = false;

  double width2d_cells() const { return (left + right) / kFeatureStride; }

  double box_x1() const { return center_x - left; }
  double box_x2() const { return center_x + right; }
  double box_y1() const { return center_y - top; }
  double box_y2() const { return center_y + bottom; }

  void validate() const {
    if (left < 0 || right < 0 || top < 0 || bottom < 0)
      throw std::invalid_argument("SceneLabel: negative box extent");
    if (depth <= 0) throw std::invalid_argument("SceneLabel: nonpositive depth");
    if (h3d <= 0 || w3d <= 0 || l3d <= 0)
      throw std::invalid_argument("SceneLabel: nonpositive 3D dimensions");
  }
};

struct Calibration {
  double focal_length = 700.0;  // pixels
  double cx = 0.0, cy = 0.0;    // principal point, pixels

  void validate() const {
    if (focal_length <= 0) throw std::invalid_argument("Calibration: focal length <= 0");
  }
};

/// Balancing weights of the composite training loss.
struct LossWeights {
  double lambda1 = 2.0;   // classification (focal)
  double lambda2 = 10.0;  // 2D size L1
  double lambda3 = 5.0;   // projected 3D center L1
  double lambda4 = 2.0;   // GIoU
  double lambda5 = 1.0;   // 3D size L1
  double lambda6 = 1.0;   // orientation
  double lambda7 = 1.0;   // depth
  double lambda8 = 0.2;   // weighted scale matching

  void validate() const {
    for (double v : {lambda1, lambda2, lambda3, lambda4, lambda5, lambda6, lambda7, lambda8}) {
      if (!(v >= 0.0) || !std::isfinite(v))
        throw std::invalid_argument("LossWeights: weights must be finite and >= 0");
    }
  }
};

/// Counts clamped inputs so callers can surface silent range fixes.
struct ClampStats {
  long clamped = 0;
};

/// Maps pixel coordinates to the normalized [0,1]^2 frame. Out-of-range
/// pixels are clamped to the image and counted in `stats` when provided.
inline std::pair<double, double> normalize_position(std::pair<double, double> pixel_xy,
                                                    std::pair<double, double> image_size,
                                                    ClampStats* stats = nullptr) {
  if (image_size.first <= 0 || image_size.second <= 0)
    throw std::invalid_argument("normalize_position: image size must be positive");
  double x = pixel_xy.first, y = pixel_xy.second;
  if (x < 0 || x > image_size.first || y < 0 || y > image_size.second) {
    x = std::min(std::max(x, 0.0), image_size.first);
    y = std::min(std::max(y, 0.0), image_size.second);
    if (stats) ++stats->clamped;
  }
  return {x / image_size.first, y / image_size.second};
}

inline std::pair<double, double> denormalize_position(std::pair<double, double> norm_xy,
                                                      std::pair<double, double> image_size) {
  return {norm_xy.first * image_size.first, norm_xy.second * image_size.second};
}

/// Ground-truth scale of a label: 2D box width on the stride-16 grid.
inline double ground_truth_scale(const SceneLabel& label) {
  const double width = label.left + label.right;
  if (width <= 0.0)
    throw std::invalid_argument("ground_truth_scale: degenerate zero-width box");
  return width / kFeatureStride;
}

}  // namespace scaledet
