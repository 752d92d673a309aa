#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <vector>

#include "pfloc/errors.hpp"
#include "pfloc/geometry.hpp"

namespace pfloc {

// Minimum-cost assignment of every row to a distinct column, rows <= cols.
// Potentials-based Hungarian method, O(rows^2 * cols).
inline std::vector<int> hungarian_assign(const Eigen::MatrixXd& cost) {
  const int n = static_cast<int>(cost.rows());
  const int m = static_cast<int>(cost.cols());
  if (n == 0) return {};
  if (n > m) throw InvalidParam("hungarian_assign: more rows than columns");
  if (!cost.allFinite()) throw InvalidParam("hungarian_assign: non-finite cost");

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = -1;
      double delta = inf;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
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
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= m; ++j)
    if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

// Optimal-subpattern-assignment distance between point sets: optimal matching
// of the smaller set into the larger with distances clamped at the cutoff, a
// cutoff-sized penalty per unmatched point, order-p mean.
inline double ospa(const std::vector<Vec3>& x, const std::vector<Vec3>& y,
                   double cutoff = 50.0, double order = 1.0) {
  if (cutoff <= 0.0) throw InvalidParam("ospa: cutoff must be positive");
  if (order < 1.0) throw InvalidParam("ospa: order must be >= 1");
  if (x.empty() && y.empty()) return 0.0;
  const std::vector<Vec3>& small = x.size() <= y.size() ? x : y;
  const std::vector<Vec3>& big = x.size() <= y.size() ? y : x;
  const int n = static_cast<int>(small.size());
  const int m = static_cast<int>(big.size());
  if (n == 0) return cutoff;

  Eigen::MatrixXd cost(n, m);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j)
      cost(i, j) = std::pow(std::min(cutoff, (small[i] - big[j]).norm()), order);
  const std::vector<int> match = hungarian_assign(cost);
  double total = std::pow(cutoff, order) * (m - n);
  for (int i = 0; i < n; ++i) total += cost(i, match[i]);
  return std::pow(total / m, 1.0 / order);
}

}  // namespace pfloc
