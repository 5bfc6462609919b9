#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

#include "hc2/error.hpp"
#include "hc2/matrix.hpp"
#include "hc2/rng.hpp"

namespace hc2 {

namespace detail {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Map<RowMajor> eigen_map(Matrix& m) {
  return {m.data().data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}
inline Eigen::Map<const RowMajor> eigen_map(const Matrix& m) {
  return {m.data().data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}

struct Node {
  Matrix value;
  Matrix grad;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents that accept gradient.
  std::function<void(Node&)> backward;
  const char* op = "leaf";
  bool requires_grad = false;
  bool detached = false;
  bool backward_done = false;

  bool accepts_grad() const noexcept { return requires_grad && !detached; }
};

}  // namespace detail

/// Handle to a value in a reverse-mode differentiation graph.
///
/// Handles are cheap to copy and share the underlying node. A graph lives as
/// long as its root handle; dropping the root after a step frees every node.
class DiffNode {
 public:
  DiffNode() = default;
  explicit DiffNode(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  double scalar() const {
    if (node_->value.size() != 1) throw ContractError("scalar() on a " + node_->value.shape_str() + " node");
    return node_->value[0];
  }
  bool requires_grad() const { return node_->requires_grad; }
  bool detached() const { return node_->detached; }
  bool valid() const noexcept { return static_cast<bool>(node_); }

  detail::Node& node() const { return *node_; }
  const std::shared_ptr<detail::Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline DiffNode make_leaf(Matrix value, bool requires_grad, bool detached) {
  auto n = std::make_shared<Node>();
  n->grad = Matrix(value.rows(), value.cols());
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->detached = detached;
  return DiffNode(std::move(n));
}

inline DiffNode make_op(const char* op, Matrix value, std::vector<std::shared_ptr<Node>> parents,
                        std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->grad = Matrix(value.rows(), value.cols());
  n->value = std::move(value);
  n->op = op;
  n->requires_grad = std::any_of(parents.begin(), parents.end(),
                                 [](const auto& p) { return p->accepts_grad(); });
  n->parents = std::move(parents);
  if (n->requires_grad) n->backward = std::move(backward);
  return DiffNode(std::move(n));
}

inline void require_same_shape(const char* op, const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  }
}

}  // namespace detail

/// Leaf that receives gradients.
inline DiffNode variable(Matrix value) { return detail::make_leaf(std::move(value), true, false); }

/// Leaf treated as a constant.
inline DiffNode constant(Matrix value) { return detail::make_leaf(std::move(value), false, false); }

/// Copy of x's value cut from the graph; never receives gradient.
inline DiffNode detach(const DiffNode& x) { return detail::make_leaf(x.value(), false, true); }

inline DiffNode matmul(const DiffNode& a, const DiffNode& b) {
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  if (A.cols() != B.rows()) {
    throw DimensionError("matmul: shape mismatch " + A.shape_str() + " x " + B.shape_str());
  }
  Matrix out(A.rows(), B.cols());
  detail::eigen_map(out).noalias() = detail::eigen_map(A) * detail::eigen_map(B);
  return detail::make_op("matmul", std::move(out), {a.ptr(), b.ptr()}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto g = detail::eigen_map(self.grad);
    if (pa.accepts_grad()) detail::eigen_map(pa.grad).noalias() += g * detail::eigen_map(pb.value).transpose();
    if (pb.accepts_grad()) detail::eigen_map(pb.grad).noalias() += detail::eigen_map(pa.value).transpose() * g;
  });
}

inline DiffNode add(const DiffNode& a, const DiffNode& b) {
  detail::require_same_shape("add", a.value(), b.value());
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return detail::make_op("add", std::move(out), {a.ptr(), b.ptr()}, [](detail::Node& self) {
    for (auto& p : self.parents) {
      if (!p->accepts_grad()) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

/// x (n x m) plus a 1 x m bias broadcast over rows.
inline DiffNode add_bias(const DiffNode& x, const DiffNode& bias) {
  const Matrix& X = x.value();
  const Matrix& b = bias.value();
  if (b.rows() != 1 || b.cols() != X.cols()) {
    throw DimensionError("add_bias: shape mismatch " + X.shape_str() + " + " + b.shape_str());
  }
  Matrix out = X;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += b[j];
  return detail::make_op("add_bias", std::move(out), {x.ptr(), bias.ptr()}, [](detail::Node& self) {
    auto& px = *self.parents[0];
    auto& pb = *self.parents[1];
    if (px.accepts_grad())
      for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
    if (pb.accepts_grad())
      for (std::size_t i = 0; i < self.grad.rows(); ++i)
        for (std::size_t j = 0; j < self.grad.cols(); ++j) pb.grad[j] += self.grad(i, j);
  });
}

inline DiffNode scale(const DiffNode& x, double c) {
  Matrix out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c;
  return detail::make_op("scale", std::move(out), {x.ptr()}, [c](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += c * self.grad[i];
  });
}

/// Sum of all elements, 1 x 1.
inline DiffNode sum(const DiffNode& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return detail::make_op("sum", Matrix::scalar(s), {x.ptr()}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    const double g = self.grad[0];
    for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += g;
  });
}

inline DiffNode relu(const DiffNode& x) {
  Matrix out = x.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return detail::make_op("relu", std::move(out), {x.ptr()}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    // Subgradient at exactly 0 is 0.
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (p.value[i] > 0.0) p.grad[i] += self.grad[i];
  });
}

inline double stable_sigmoid(double x) {
  if (x >= 30.0) return 1.0 / (1.0 + std::exp(-x));
  if (x <= -30.0) return std::exp(x);
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline DiffNode sigmoid(const DiffNode& x) {
  Matrix out = x.value();
  for (double& v : out.data()) v = stable_sigmoid(v);
  return detail::make_op("sigmoid", std::move(out), {x.ptr()}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double s = self.value[i];
      p.grad[i] += self.grad[i] * s * (1.0 - s);
    }
  });
}

/// Inverted dropout. Rate 0 returns x itself without consuming randomness.
inline DiffNode dropout(const DiffNode& x, double rate, RngStream& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  Matrix mask(x.rows(), x.cols());
  Matrix out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = rng.uniform() < rate ? 0.0 : keep_scale;
    out[i] *= mask[i];
  }
  return detail::make_op("dropout", std::move(out), {x.ptr()},
                         [mask = std::move(mask)](detail::Node& self) {
                           auto& p = *self.parents[0];
                           for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += mask[i] * self.grad[i];
                         });
}

/// Inner product of two equal-length vectors (row or column), 1 x 1.
inline DiffNode dot(const DiffNode& u, const DiffNode& v) {
  const Matrix& U = u.value();
  const Matrix& V = v.value();
  if (!U.is_vector() || !V.is_vector() || U.size() != V.size()) {
    throw DimensionError("dot: shape mismatch " + U.shape_str() + " . " + V.shape_str());
  }
  const double s = hc2::dot(U.data(), V.data());
  return detail::make_op("dot", Matrix::scalar(s), {u.ptr(), v.ptr()}, [](detail::Node& self) {
    auto& pu = *self.parents[0];
    auto& pv = *self.parents[1];
    const double g = self.grad[0];
    if (pu.accepts_grad())
      for (std::size_t i = 0; i < pu.grad.size(); ++i) pu.grad[i] += g * pv.value[i];
    if (pv.accepts_grad())
      for (std::size_t i = 0; i < pv.grad.size(); ++i) pv.grad[i] += g * pu.value[i];
  });
}

/// Row-wise inner products of two n x m matrices, n x 1.
inline DiffNode rows_dot(const DiffNode& a, const DiffNode& b) {
  detail::require_same_shape("rows_dot", a.value(), b.value());
  const std::size_t n = a.rows();
  Matrix out(n, 1);
  for (std::size_t i = 0; i < n; ++i) out[i] = hc2::dot(a.value().row(i), b.value().row(i));
  return detail::make_op("rows_dot", std::move(out), {a.ptr(), b.ptr()}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const std::size_t m = pa.value.cols();
    for (std::size_t i = 0; i < self.grad.rows(); ++i) {
      const double g = self.grad[i];
      if (pa.accepts_grad())
        for (std::size_t j = 0; j < m; ++j) pa.grad(i, j) += g * pb.value(i, j);
      if (pb.accepts_grad())
        for (std::size_t j = 0; j < m; ++j) pb.grad(i, j) += g * pa.value(i, j);
    }
  });
}

/// Rows of x selected by index (repeats allowed); backward scatter-adds.
/// Doubles as embedding lookup when x is an embedding table.
inline DiffNode gather_rows(const DiffNode& x, std::vector<std::size_t> index) {
  const Matrix& X = x.value();
  Matrix out(index.size(), X.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= X.rows()) {
      throw IndexError("gather_rows: row " + std::to_string(index[i]) + " out of range for " + X.shape_str());
    }
    std::copy(X.row(index[i]).begin(), X.row(index[i]).end(), out.row(i).begin());
  }
  return detail::make_op("gather_rows", std::move(out), {x.ptr()},
                         [index = std::move(index)](detail::Node& self) {
                           auto& p = *self.parents[0];
                           for (std::size_t i = 0; i < index.size(); ++i) {
                             auto src = self.grad.row(i);
                             auto dst = p.grad.row(index[i]);
                             for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
                           }
                         });
}

/// Horizontal concatenation of blocks with equal row counts.
inline DiffNode concat_cols(const std::vector<DiffNode>& parts) {
  if (parts.empty()) throw ContractError("concat_cols of nothing");
  const std::size_t n = parts.front().rows();
  std::size_t width = 0;
  for (const auto& p : parts) {
    if (p.rows() != n) {
      throw DimensionError("concat_cols: row mismatch " + parts.front().value().shape_str() + " vs " +
                           p.value().shape_str());
    }
    width += p.cols();
  }
  Matrix out(n, width);
  std::vector<std::shared_ptr<detail::Node>> parents;
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out(i, off + j) = p.value()(i, j);
    off += p.cols();
    parents.push_back(p.ptr());
  }
  return detail::make_op("concat_cols", std::move(out), std::move(parents), [](detail::Node& self) {
    std::size_t off = 0;
    for (auto& p : self.parents) {
      const std::size_t w = p->value.cols();
      if (p->accepts_grad())
        for (std::size_t i = 0; i < self.grad.rows(); ++i)
          for (std::size_t j = 0; j < w; ++j) p->grad(i, j) += self.grad(i, off + j);
      off += w;
    }
  });
}

/// Vertical concatenation of blocks with equal column counts.
inline DiffNode concat_rows(const std::vector<DiffNode>& parts) {
  if (parts.empty()) throw ContractError("concat_rows of nothing");
  const std::size_t m = parts.front().cols();
  std::size_t height = 0;
  for (const auto& p : parts) {
    if (p.cols() != m) {
      throw DimensionError("concat_rows: column mismatch " + parts.front().value().shape_str() + " vs " +
                           p.value().shape_str());
    }
    height += p.rows();
  }
  Matrix out(height, m);
  std::vector<std::shared_ptr<detail::Node>> parents;
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off * m));
    off += p.rows();
    parents.push_back(p.ptr());
  }
  return detail::make_op("concat_rows", std::move(out), std::move(parents), [](detail::Node& self) {
    std::size_t off = 0;
    const std::size_t m = self.grad.cols();
    for (auto& p : self.parents) {
      const std::size_t n = p->value.size();
      if (p->accepts_grad())
        for (std::size_t i = 0; i < n; ++i) p->grad[i] += self.grad[off * m + i];
      off += p->value.rows();
    }
  });
}

/// Places the entries of a P x 1 column at distinct (row, col) cells of a
/// rows x cols matrix; all other cells are 0.
inline DiffNode scatter_cells(const DiffNode& values, std::vector<std::size_t> cell_rows,
                              std::vector<std::size_t> cell_cols, std::size_t rows, std::size_t cols) {
  const Matrix& V = values.value();
  if (V.cols() != 1 || V.rows() != cell_rows.size() || cell_rows.size() != cell_cols.size()) {
    throw DimensionError("scatter_cells: " + V.shape_str() + " values for " + std::to_string(cell_rows.size()) +
                         " cells");
  }
  Matrix out(rows, cols);
  for (std::size_t i = 0; i < cell_rows.size(); ++i) {
    if (cell_rows[i] >= rows || cell_cols[i] >= cols) throw IndexError("scatter_cells: cell out of range");
    out(cell_rows[i], cell_cols[i]) = V[i];
  }
  return detail::make_op("scatter_cells", std::move(out), {values.ptr()},
                         [cell_rows = std::move(cell_rows), cell_cols = std::move(cell_cols)](detail::Node& self) {
                           auto& p = *self.parents[0];
                           for (std::size_t i = 0; i < cell_rows.size(); ++i)
                             p.grad[i] += self.grad(cell_rows[i], cell_cols[i]);
                         });
}

inline constexpr double kProbabilityClamp = 1e-12;

/// Sum over rows of binary cross-entropy between predictions (n x 1, in (0,1))
/// and labels. Predictions are clamped to [1e-12, 1 - 1e-12]; clamped entries
/// pass no gradient.
inline DiffNode bce_sum(const DiffNode& pred, std::span<const double> labels) {
  const Matrix& P = pred.value();
  if (P.cols() != 1 || P.rows() != labels.size()) {
    throw DimensionError("bce_sum: predictions " + P.shape_str() + " vs " + std::to_string(labels.size()) +
                         " labels");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double p = std::clamp(P[i], kProbabilityClamp, 1.0 - kProbabilityClamp);
    total += -(labels[i] * std::log(p) + (1.0 - labels[i]) * std::log(1.0 - p));
  }
  return detail::make_op("bce_sum", Matrix::scalar(total), {pred.ptr()},
                         [y = std::vector<double>(labels.begin(), labels.end())](detail::Node& self) {
                           auto& pp = *self.parents[0];
                           const double g = self.grad[0];
                           for (std::size_t i = 0; i < y.size(); ++i) {
                             const double p = pp.value[i];
                             if (p < kProbabilityClamp || p > 1.0 - kProbabilityClamp) continue;
                             pp.grad[i] += g * (-(y[i] / p) + (1.0 - y[i]) / (1.0 - p));
                           }
                         });
}

/// Weighted InfoNCE averaged over rows.
///
/// Row a of `scores` holds similarity logits; column 0 is the positive. Row a
/// contributes  P / (P + sum_c N_c)  with  P = w_a0 exp(s_a0 / tau)  and
/// N_c = w_ac exp(s_ac / tau). A weight of 0 marks an absent candidate, which
/// lets rows carry different candidate counts. Weights are constants. With
/// `log_form` a row's loss is -ln(ratio), otherwise -ratio. Exponents are
/// shifted by the row maximum. `per_row`, when given, receives each row's loss.
inline DiffNode info_nce(const DiffNode& scores, const Matrix& weights, double tau, bool log_form,
                         std::vector<double>* per_row = nullptr) {
  const Matrix& S = scores.value();
  detail::require_same_shape("info_nce", S, weights);
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
  const std::size_t rows = S.rows(), cols = S.cols();
  if (rows == 0 || cols < 2) throw ContractError("info_nce needs at least one row with a positive and a negative");
  // Softmax-style probabilities of each candidate within its row.
  Matrix prob(rows, cols);
  std::vector<double> ratio(rows);
  double total = 0.0;
  if (per_row) per_row->assign(rows, 0.0);
  for (std::size_t a = 0; a < rows; ++a) {
    if (!(weights(a, 0) > 0.0)) throw ContractError("info_nce: positive weight must be > 0");
    bool any_negative = false;
    double shift = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) {
      if (weights(a, c) > 0.0) {
        shift = std::max(shift, S(a, c) / tau);
        any_negative = any_negative || c > 0;
      }
    }
    if (!any_negative) throw ContractError("info_nce: row " + std::to_string(a) + " has no negatives");
    double denom = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (weights(a, c) > 0.0) {
        prob(a, c) = weights(a, c) * std::exp(S(a, c) / tau - shift);
        denom += prob(a, c);
      }
    }
    double log_denom = std::log(denom);
    for (std::size_t c = 0; c < cols; ++c) prob(a, c) /= denom;
    ratio[a] = prob(a, 0);
    // -ln(ratio) from logs directly; avoids log(0) when the ratio underflows.
    const double row_loss = log_form
        ? -(std::log(weights(a, 0)) + S(a, 0) / tau - shift - log_denom)
        : -ratio[a];
    if (per_row) (*per_row)[a] = row_loss;
    total += row_loss;
  }
  const double inv_rows = 1.0 / static_cast<double>(rows);
  return detail::make_op(
      "info_nce", Matrix::scalar(total * inv_rows), {scores.ptr()},
      [prob = std::move(prob), ratio = std::move(ratio), tau, log_form, inv_rows](detail::Node& self) {
        auto& ps = *self.parents[0];
        const double g = self.grad[0] * inv_rows / tau;
        for (std::size_t a = 0; a < prob.rows(); ++a) {
          for (std::size_t c = 0; c < prob.cols(); ++c) {
            const double indicator = c == 0 ? 1.0 : 0.0;
            // d(-ln r)/ds = (p_c - [c=0]) / tau ; d(-r)/ds = -r ([c=0] - p_c) / tau
            const double d = log_form ? prob(a, c) - indicator : -ratio[a] * (indicator - prob(a, c));
            ps.grad(a, c) += g * d;
          }
        }
      });
}

/// Runs reverse-mode accumulation from a scalar root.
///
/// Every reachable node accepting gradient ends up holding d(root)/d(node).
/// Each node is visited once in reverse topological order. Calling again on
/// the same root without zero_grad() is an error.
inline void backward(const DiffNode& root) {
  if (root.value().size() != 1) {
    throw ContractError("backward requires a scalar root, got " + root.value().shape_str());
  }
  auto& r = root.node();
  if (r.backward_done) throw GraphError("backward already ran on this root; call zero_grad first");

  // Iterative DFS post-order with colouring for cycle detection.
  enum class Mark : unsigned char { kActive, kDone };
  std::unordered_map<const detail::Node*, Mark> marks;
  std::vector<detail::Node*> order;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{&r, 0}};
  marks[&r] = Mark::kActive;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (!parent->requires_grad) continue;
      auto it = marks.find(parent);
      if (it == marks.end()) {
        marks[parent] = Mark::kActive;
        stack.emplace_back(parent, 0);
      } else if (it->second == Mark::kActive) {
        throw GraphError(std::string("cycle detected at node produced by ") + parent->op);
      }
    } else {
      marks[node] = Mark::kDone;
      order.push_back(node);
      stack.pop_back();
    }
  }

  r.grad.fill(0.0);
  r.grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && n->accepts_grad()) n->backward(*n);
  }
  r.backward_done = true;
}

/// Clears gradients on every node reachable from root and re-arms backward().
inline void zero_grad(const DiffNode& root) {
  std::vector<detail::Node*> stack{&root.node()};
  std::unordered_map<const detail::Node*, bool> seen{{&root.node(), true}};
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    n->grad.fill(0.0);
    n->backward_done = false;
    for (auto& p : n->parents) {
      if (seen.emplace(p.get(), true).second) stack.push_back(p.get());
    }
  }
}

}  // namespace hc2
