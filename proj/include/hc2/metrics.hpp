#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "hc2/error.hpp"
#include "hc2/matrix.hpp"

namespace hc2 {

/**
 * Area under the ROC curve via the rank-sum statistic.
 *
 * Tied scores share their average rank, which counts a tied
 * positive/negative pair as one half. Returns nullopt when only one class is
 * present (the metric is undefined there, not zero).
 */
inline std::optional<double> auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double positives = 0.0, rank_sum = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    // Ranks i+1 .. j+1 averaged.
    const double avg_rank = 0.5 * static_cast<double>(i + j + 2);
    for (std::size_t k = i; k <= j; ++k) {
      if (labels[order[k]] == 1) {
        positives += 1.0;
        rank_sum += avg_rank;
      } else if (labels[order[k]] != 0) {
        throw DataError("auc: labels must be 0 or 1");
      }
    }
    i = j + 1;
  }
  const double negatives = static_cast<double>(n) - positives;
  if (positives == 0.0 || negatives == 0.0) return std::nullopt;
  return (rank_sum - positives * (positives + 1.0) / 2.0) / (positives * negatives);
}

struct UniformityResult {
  double value = 0.0;
  std::size_t skipped = 0;  // zero-norm rows left out
};

/// ln mean_{i<j} exp(-2 |u_i - u_j|^2) over length-normalised rows. Lower
/// means the rows spread more evenly over the sphere.
inline UniformityResult uniformity(const Matrix& reprs) {
  UniformityResult r;
  std::vector<std::vector<double>> unit;
  for (std::size_t i = 0; i < reprs.rows(); ++i) {
    const auto row = reprs.row(i);
    const double norm = std::sqrt(dot(row, row));
    if (norm == 0.0) {
      ++r.skipped;
      continue;
    }
    auto& u = unit.emplace_back(row.begin(), row.end());
    for (double& v : u) v /= norm;
  }
  if (unit.size() < 2) throw ContractError("uniformity needs at least two non-zero vectors");
  double acc = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < unit.size(); ++i)
    for (std::size_t j = i + 1; j < unit.size(); ++j) {
      acc += std::exp(-2.0 * squared_distance(unit[i], unit[j]));
      ++pairs;
    }
  r.value = std::log(acc / static_cast<double>(pairs));
  return r;
}

}  // namespace hc2
