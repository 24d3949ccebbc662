#pragma once

// Minimum-cost injective assignment of n rows to m columns (n <= m) by the
// augmenting-path Kuhn-Munkres method with row/column potentials.

#include <cstddef>
#include <limits>
#include <stdexcept>
#include <vector>

namespace pbseg {

// cost is row-major n x m; returns per-row column indices; total gets the
// minimal summed cost if non-null
inline std::vector<std::size_t> solve_assignment(const std::vector<double>& cost, std::size_t n, std::size_t m,
                                                 double* total = nullptr) {
  if (n == 0) {
    if (total) *total = 0.0;
    return {};
  }
  if (n > m) throw std::invalid_argument("solve_assignment: more rows than columns");
  if (cost.size() != n * m) throw std::invalid_argument("solve_assignment: cost matrix size mismatch");

  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> match(m + 1, 0);  // column -> row (1-based, 0 = unmatched)
  std::vector<std::size_t> way(m + 1, 0);

  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, kInf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = match[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<std::size_t> row_to_col(n, 0);
  double sum = 0.0;
  for (std::size_t j = 1; j <= m; ++j) {
    if (match[j] != 0) {
      row_to_col[match[j] - 1] = j - 1;
      sum += cost[(match[j] - 1) * m + (j - 1)];
    }
  }
  if (total) *total = sum;
  return row_to_col;
}

}  // namespace pbseg
