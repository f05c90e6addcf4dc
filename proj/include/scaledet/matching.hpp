#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

#include "scaledet/box.hpp"
#include "scaledet/core_types.hpp"

namespace scaledet {

/// One-to-one query/label assignment. Matched queries are the object queries;
/// the rest are non-object queries.
struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  // (query index, label index)
  std::vector<int> unmatched_queries;
};

/// Exact minimum-cost assignment on an m x n cost matrix (m <= n) via
/// shortest augmenting paths with potentials, O(m^2 n). Returns the column
/// assigned to each row.
inline std::vector<int> solve_assignment(const std::vector<std::vector<double>>& cost) {
  const int m = static_cast<int>(cost.size());
  if (m == 0) return {};
  const int n = static_cast<int>(cost[0].size());
  if (n < m) throw std::invalid_argument("solve_assignment: need rows <= cols");
  const double inf = std::numeric_limits<double>::infinity();

  // 1-indexed potentials; p[j] is the row matched to column j.
  std::vector<double> u(m + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= m; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = -1;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<int> row_to_col(m, -1);
  for (int j = 1; j <= n; ++j) {
    if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
  }
  return row_to_col;
}

/// Detached per-query prediction snapshot used to build the matching cost.
/// Box quantities are normalized to the image extent.
struct QuerySnapshot {
  std::vector<double> class_probs;
  double left = 0, right = 0, top = 0, bottom = 0;  // normalized (l, r, t, b)
  double cx = 0, cy = 0;                            // normalized center
  double score = 0;                                 // max class probability

  Box box() const { return Box{cx - left, cy - top, cx + right, cy + bottom}; }
};

/// Matching cost between one query and one label, mirroring the 2D loss
/// weights: 2 * (1 - p_class) + 10 * L1(normalized box) + 2 * (1 - GIoU).
inline double match_cost(const QuerySnapshot& q, const SceneLabel& label, double image_w,
                         double image_h) {
  const double p_cls =
      label.class_id < static_cast<int>(q.class_probs.size()) ? q.class_probs[label.class_id] : 0.0;
  const double l1 = std::fabs(q.left - label.left / image_w) +
                    std::fabs(q.right - label.right / image_w) +
                    std::fabs(q.top - label.top / image_h) +
                    std::fabs(q.bottom - label.bottom / image_h);
  const Box gt{label.box_x1() / image_w, label.box_y1() / image_h, label.box_x2() / image_w,
               label.box_y2() / image_h};
  return 2.0 * (1.0 - p_cls) + 10.0 * l1 + 2.0 * (1.0 - box_giou(q.box(), gt));
}

/// Globally optimal one-to-one pairing of labels to queries.
inline MatchResult hungarian_match(const std::vector<QuerySnapshot>& queries,
                                   const std::vector<SceneLabel>& labels, double image_w,
                                   double image_h) {
  const int n_queries = static_cast<int>(queries.size());
  const int n_labels = static_cast<int>(labels.size());
  if (n_labels > n_queries)
    throw std::invalid_argument("hungarian_match: more labels than queries");

  MatchResult result;
  if (n_labels == 0) {
    result.unmatched_queries.resize(static_cast<std::size_t>(n_queries));
    for (int i = 0; i < n_queries; ++i) result.unmatched_queries[static_cast<std::size_t>(i)] = i;
    return result;
  }

  std::vector<std::vector<double>> cost(static_cast<std::size_t>(n_labels),
                                        std::vector<double>(static_cast<std::size_t>(n_queries)));
  for (int j = 0; j < n_labels; ++j)
    for (int i = 0; i < n_queries; ++i)
      cost[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] =
          match_cost(queries[static_cast<std::size_t>(i)], labels[static_cast<std::size_t>(j)],
                     image_w, image_h);

  const auto assign = solve_assignment(cost);
  std::vector<char> matched(static_cast<std::size_t>(n_queries), 0);
  for (int j = 0; j < n_labels; ++j) {
    result.pairs.emplace_back(assign[static_cast<std::size_t>(j)], j);
    matched[static_cast<std::size_t>(assign[static_cast<std::size_t>(j)])] = 1;
  }
  for (int i = 0; i < n_queries; ++i)
    if (!matched[static_cast<std::size_t>(i)]) result.unmatched_queries.push_back(i);
  return result;
}

}  // namespace scaledet
