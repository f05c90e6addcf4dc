#pragma once

#include <algorithm>
#include <cmath>

namespace scaledet {

/// Axis-aligned box with corner coordinates (x1 <= x2, y1 <= y2).
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return std::max(0.0, x2 - x1); }
  double height() const { return std::max(0.0, y2 - y1); }
  double area() const { return width() * height(); }
  bool contains(double x, double y) const { return x >= x1 && x <= x2 && y >= y1 && y <= y2; }
};

inline double box_intersection(const Box& a, const Box& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return (w > 0 && h > 0) ? w * h : 0.0;
}

inline double box_iou(const Box& a, const Box& b) {
  const double inter = box_intersection(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

/// Generalized IoU: IoU minus the fraction of the enclosing box not covered
/// by the union. Stays informative (negative) for disjoint boxes.
inline double box_giou(const Box& a, const Box& b) {
  const double inter = box_intersection(a, b);
  const double uni = a.area() + b.area() - inter;
  const double ew = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
  const double eh = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
  const double enclose = ew * eh;
  const double iou = uni > 0 ? inter / uni : 0.0;
  return enclose > 0 ? iou - (enclose - uni) / enclose : iou;
}

}  // namespace scaledet
