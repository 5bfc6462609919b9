#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "hc2/error.hpp"
#include "hc2/matrix.hpp"

namespace hc2 {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First and second moment estimates, one pair per parameter tensor.
struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::size_t step = 0;
};

/// One bias-corrected Adam update. `names` (optional) labels tensors in errors.
inline void adam_step(std::span<Matrix* const> params, std::span<const Matrix> grads, AdamState& state,
                      const AdamOptions& opt, std::span<const std::string> names = {}) {
  if (params.size() != grads.size()) throw DimensionError("adam: parameter and gradient counts differ");
  auto name_of = [&](std::size_t i) { return i < names.size() ? names[i] : "tensor " + std::to_string(i); };
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->same_shape(grads[i])) {
      throw DimensionError("adam: gradient " + grads[i].shape_str() + " for " + name_of(i) + " of shape " +
                           params[i]->shape_str());
    }
    for (double g : grads[i].data())
      if (std::isnan(g)) throw NumericError("NaN gradient for parameter " + name_of(i));
  }
  if (state.m.empty()) {
    for (const Matrix* p : params) {
      state.m.emplace_back(p->rows(), p->cols());
      state.v.emplace_back(p->rows(), p->cols());
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(opt.beta1, t);
  const double c2 = 1.0 - std::pow(opt.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data();
    auto g = grads[i].data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = opt.beta1 * m[j] + (1.0 - opt.beta1) * g[j];
      v[j] = opt.beta2 * v[j] + (1.0 - opt.beta2) * g[j] * g[j];
      p[j] -= opt.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + opt.eps);
    }
  }
}

}  // namespace hc2
