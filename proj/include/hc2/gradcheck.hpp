#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "hc2/autodiff.hpp"
#include "hc2/error.hpp"

namespace hc2 {

/// Largest relative disagreement between an analytic gradient and central
/// differences of f:  |analytic - fd| / max(|analytic|, |fd|, 1e-6)  over
/// coordinates. The floor sits about ten times above the roundoff of a central
/// difference at eps = 1e-5 for O(1) function values.
inline double max_relative_error(const std::function<double(std::span<const double>)>& f,
                                 std::span<const double> x, std::span<const double> analytic, double eps) {
  if (!(eps > 0.0)) throw ConfigError("finite-difference step must be positive");
  if (analytic.size() != x.size()) throw DimensionError("analytic gradient length differs from x");
  std::vector<double> probe(x.begin(), x.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + eps;
    const double up = f(probe);
    probe[i] = saved - eps;
    const double down = f(probe);
    probe[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("non-finite function value during finite differences at coordinate " + std::to_string(i));
    }
    const double fd = (up - down) / (2.0 * eps);
    worst = std::max(worst, std::abs(analytic[i] - fd) / std::max({std::abs(analytic[i]), std::abs(fd), 1e-6}));
  }
  return worst;
}

/// Checks backward() against central differences for a graph built from a
/// single leaf. `build` receives the leaf and must return a scalar node; it is
/// called once with a variable leaf and 2n times with constant leaves.
inline double finite_difference_check(const std::function<DiffNode(const DiffNode&)>& build, const Matrix& x,
                                      double eps) {
  const DiffNode leaf = variable(x);
  const DiffNode root = build(leaf);
  backward(root);
  std::vector<double> analytic(leaf.grad().data().begin(), leaf.grad().data().end());
  auto f = [&](std::span<const double> v) {
    Matrix m(x.rows(), x.cols(), std::vector<double>(v.begin(), v.end()));
    return build(constant(std::move(m))).scalar();
  };
  return max_relative_error(f, x.data(), analytic, eps);
}

}  // namespace hc2
