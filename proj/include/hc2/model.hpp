#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "hc2/autodiff.hpp"
#include "hc2/error.hpp"
#include "hc2/matrix.hpp"
#include "hc2/rng.hpp"

namespace hc2 {

/// Dataset shape: scenario count K and per-field vocabulary sizes (F = vocab.size()).
struct Schema {
  std::size_t scenarios = 0;
  std::vector<std::size_t> vocab;

  std::size_t fields() const noexcept { return vocab.size(); }
  friend bool operator==(const Schema&, const Schema&) = default;
};

/// One labeled impression.
struct Sample {
  std::uint32_t scenario = 0;
  std::uint8_t label = 0;
  std::vector<std::uint32_t> features;

  friend bool operator==(const Sample&, const Sample&) = default;
};

inline void validate(const Sample& s, const Schema& schema) {
  if (s.scenario >= schema.scenarios) {
    throw DataError("scenario " + std::to_string(s.scenario) + " outside [0, " + std::to_string(schema.scenarios) + ")");
  }
  if (s.label > 1) throw DataError("label " + std::to_string(s.label) + " is not binary");
  if (s.features.size() != schema.fields()) {
    throw DataError("sample has " + std::to_string(s.features.size()) + " features, schema expects " +
                    std::to_string(schema.fields()));
  }
  for (std::size_t f = 0; f < s.features.size(); ++f) {
    if (s.features[f] >= schema.vocab[f]) {
      throw DataError("field " + std::to_string(f) + ": id " + std::to_string(s.features[f]) +
                      " outside vocabulary of size " + std::to_string(schema.vocab[f]));
    }
  }
}

/// Layer widths. Every hidden layer is ReLU-activated, including the last
/// shared layer whose output is the shared representation z.
struct Architecture {
  std::size_t embed_dim = 8;
  std::vector<std::size_t> shared_widths{64, 64};
  std::vector<std::size_t> tower_widths{32, 32};

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct Dense {
  Matrix weight;  // in x out
  Matrix bias;    // 1 x out
};

/// All learned parameters: shared embedding tables, shared MLP f, and per
/// scenario a tower g^(k) followed by a one-logit output head.
struct ModelParams {
  Schema schema;
  Architecture arch;
  std::vector<Matrix> embed_tables;
  std::vector<Dense> shared;
  std::vector<std::vector<Dense>> towers;
  std::vector<Dense> heads;

  std::size_t input_width() const { return schema.fields() * arch.embed_dim; }
  std::size_t shared_width() const { return arch.shared_widths.empty() ? input_width() : arch.shared_widths.back(); }
  std::size_t tower_width() const { return arch.tower_widths.empty() ? shared_width() : arch.tower_widths.back(); }

  /// Zero-filled parameters of the right shapes.
  static ModelParams zeros(const Schema& schema, const Architecture& arch) {
    if (schema.scenarios == 0) throw ConfigError("model needs at least one scenario");
    if (schema.fields() == 0) throw ConfigError("model needs at least one feature field");
    if (arch.embed_dim == 0) throw ConfigError("embedding width must be positive");
    ModelParams p;
    p.schema = schema;
    p.arch = arch;
    for (std::size_t v : schema.vocab) p.embed_tables.emplace_back(v, arch.embed_dim);
    std::size_t in = p.input_width();
    for (std::size_t w : arch.shared_widths) {
      if (w == 0) throw ConfigError("layer width must be positive");
      p.shared.push_back({Matrix(in, w), Matrix(1, w)});
      in = w;
    }
    const std::size_t z = in;
    p.towers.resize(schema.scenarios);
    for (auto& tower : p.towers) {
      std::size_t tin = z;
      for (std::size_t w : arch.tower_widths) {
        if (w == 0) throw ConfigError("layer width must be positive");
        tower.push_back({Matrix(tin, w), Matrix(1, w)});
        tin = w;
      }
    }
    for (std::size_t k = 0; k < schema.scenarios; ++k) p.heads.push_back({Matrix(p.tower_width(), 1), Matrix(1, 1)});
    return p;
  }

  /// Xavier-uniform weights (limit sqrt(6 / (fan_in + fan_out))), zero biases.
  static ModelParams initialize(const Schema& schema, const Architecture& arch, RngStream& rng) {
    ModelParams p = zeros(schema, arch);
    auto xavier = [&rng](Matrix& m) {
      const double limit = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
      for (double& v : m.data()) v = (2.0 * rng.uniform() - 1.0) * limit;
    };
    for (auto& t : p.embed_tables) xavier(t);
    for (auto& l : p.shared) xavier(l.weight);
    for (auto& tower : p.towers)
      for (auto& l : tower) xavier(l.weight);
    for (auto& h : p.heads) xavier(h.weight);
    return p;
  }

  /// Every tensor in declaration order: embeddings, shared, towers, heads.
  std::vector<Matrix*> tensors() {
    std::vector<Matrix*> out;
    for (auto& t : embed_tables) out.push_back(&t);
    for (auto& l : shared) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    for (auto& tower : towers)
      for (auto& l : tower) {
        out.push_back(&l.weight);
        out.push_back(&l.bias);
      }
    for (auto& h : heads) {
      out.push_back(&h.weight);
      out.push_back(&h.bias);
    }
    return out;
  }
  std::vector<const Matrix*> tensors() const {
    auto out = const_cast<ModelParams*>(this)->tensors();
    return {out.begin(), out.end()};
  }

  std::vector<std::string> tensor_names() const {
    std::vector<std::string> out;
    for (std::size_t f = 0; f < embed_tables.size(); ++f) out.push_back("embed[" + std::to_string(f) + "]");
    for (std::size_t l = 0; l < shared.size(); ++l) {
      out.push_back("shared[" + std::to_string(l) + "].weight");
      out.push_back("shared[" + std::to_string(l) + "].bias");
    }
    for (std::size_t k = 0; k < towers.size(); ++k)
      for (std::size_t l = 0; l < towers[k].size(); ++l) {
        out.push_back("tower[" + std::to_string(k) + "][" + std::to_string(l) + "].weight");
        out.push_back("tower[" + std::to_string(k) + "][" + std::to_string(l) + "].bias");
      }
    for (std::size_t k = 0; k < heads.size(); ++k) {
      out.push_back("head[" + std::to_string(k) + "].weight");
      out.push_back("head[" + std::to_string(k) + "].bias");
    }
    return out;
  }
};

struct DenseNodes {
  DiffNode weight;
  DiffNode bias;
};

/// Graph leaves for one step, mirroring ModelParams.
struct BoundParams {
  const ModelParams* source = nullptr;
  std::vector<DiffNode> embed_tables;
  std::vector<DenseNodes> shared;
  std::vector<std::vector<DenseNodes>> towers;
  std::vector<DenseNodes> heads;

  std::size_t scenarios() const { return towers.size(); }

  /// Leaves in the same order as ModelParams::tensors().
  std::vector<DiffNode> leaves() const {
    std::vector<DiffNode> out(embed_tables.begin(), embed_tables.end());
    for (const auto& l : shared) {
      out.push_back(l.weight);
      out.push_back(l.bias);
    }
    for (const auto& tower : towers)
      for (const auto& l : tower) {
        out.push_back(l.weight);
        out.push_back(l.bias);
      }
    for (const auto& h : heads) {
      out.push_back(h.weight);
      out.push_back(h.bias);
    }
    return out;
  }

  /// Gradients collected after backward(), aligned with ModelParams::tensors().
  std::vector<Matrix> gradients() const {
    std::vector<Matrix> out;
    for (const auto& leaf : leaves()) out.push_back(leaf.grad());
    return out;
  }
};

/// Copies parameters into fresh leaves; `trainable` selects variable vs constant.
inline BoundParams bind(const ModelParams& p, bool trainable = true) {
  auto leaf = [trainable](const Matrix& m) { return trainable ? variable(m) : constant(m); };
  BoundParams b;
  b.source = &p;
  for (const auto& t : p.embed_tables) b.embed_tables.push_back(leaf(t));
  for (const auto& l : p.shared) b.shared.push_back({leaf(l.weight), leaf(l.bias)});
  for (const auto& tower : p.towers) {
    auto& bt = b.towers.emplace_back();
    for (const auto& l : tower) bt.push_back({leaf(l.weight), leaf(l.bias)});
  }
  for (const auto& h : p.heads) b.heads.push_back({leaf(h.weight), leaf(h.bias)});
  return b;
}

/// Concatenated field embeddings, one row per sample (n x F*d).
inline DiffNode embed_batch(std::span<const Sample> batch, const BoundParams& params) {
  const std::size_t fields = params.embed_tables.size();
  std::vector<DiffNode> parts;
  parts.reserve(fields);
  for (std::size_t f = 0; f < fields; ++f) {
    const std::size_t vocab = params.embed_tables[f].rows();
    std::vector<std::size_t> ids(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      if (batch[i].features.size() != fields) {
        throw DataError("sample has " + std::to_string(batch[i].features.size()) + " features, model expects " +
                        std::to_string(fields));
      }
      ids[i] = batch[i].features[f];
      if (ids[i] >= vocab) {
        throw DataError("field " + std::to_string(f) + ": id " + std::to_string(ids[i]) +
                        " outside vocabulary of size " + std::to_string(vocab));
      }
    }
    parts.push_back(gather_rows(params.embed_tables[f], std::move(ids)));
  }
  return concat_cols(parts);
}

inline DiffNode embed(const Sample& sample, const BoundParams& params) {
  return embed_batch(std::span<const Sample>(&sample, 1), params);
}

inline DiffNode dense_relu(const DiffNode& x, const DenseNodes& layer) {
  return relu(add_bias(matmul(x, layer.weight), layer.bias));
}

/// z = f(e): ReLU MLP over the embedding rows.
inline DiffNode shared_forward(const DiffNode& e, const BoundParams& params) {
  DiffNode x = e;
  for (const auto& layer : params.shared) x = dense_relu(x, layer);
  return x;
}

/// h = g^(k)(z), with dropout after each layer's activation.
inline DiffNode specific_forward(std::size_t k, const DiffNode& z, const BoundParams& params, double dropout_rate,
                                 RngStream& rng) {
  if (k >= params.towers.size()) {
    throw IndexError("scenario " + std::to_string(k) + " has no tower (K = " + std::to_string(params.towers.size()) +
                     ")");
  }
  DiffNode x = z;
  for (const auto& layer : params.towers[k]) x = dropout(dense_relu(x, layer), dropout_rate, rng);
  return x;
}

/// Dropout-free tower pass.
inline DiffNode specific_forward(std::size_t k, const DiffNode& z, const BoundParams& params) {
  RngStream unused;
  return specific_forward(k, z, params, 0.0, unused);
}

/// y_hat = sigmoid(h . w_k + b_k), one column.
inline DiffNode predict(const DiffNode& h, std::size_t k, const BoundParams& params) {
  if (k >= params.heads.size()) throw IndexError("scenario " + std::to_string(k) + " has no output head");
  return sigmoid(add_bias(matmul(h, params.heads[k].weight), params.heads[k].bias));
}

/// Forward pass of a mixed-scenario batch; all matrices are in batch order.
struct BatchForward {
  DiffNode embeddings;  // e, n x F*d
  DiffNode shared;      // z, n x dz
  DiffNode specific;    // h, n x dh (own tower, dropout off)
  DiffNode predictions; // y_hat, n x 1
  std::vector<std::vector<std::size_t>> rows_by_scenario;
};

inline std::vector<std::vector<std::size_t>> group_by_scenario(std::span<const Sample> batch, std::size_t scenarios) {
  std::vector<std::vector<std::size_t>> rows(scenarios);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i].scenario >= scenarios) {
      throw IndexError("scenario " + std::to_string(batch[i].scenario) + " has no tower (K = " +
                       std::to_string(scenarios) + ")");
    }
    rows[batch[i].scenario].push_back(i);
  }
  return rows;
}

/// Runs `tower(k, rows of z)` for each scenario group and reassembles the
/// results in batch order.
template <typename TowerFn>
DiffNode route_by_scenario(const DiffNode& z, const std::vector<std::vector<std::size_t>>& rows_by_scenario,
                           TowerFn&& tower) {
  std::vector<DiffNode> blocks;
  std::vector<std::size_t> position(z.rows());
  std::size_t next = 0;
  for (std::size_t k = 0; k < rows_by_scenario.size(); ++k) {
    const auto& rows = rows_by_scenario[k];
    if (rows.empty()) continue;
    blocks.push_back(tower(k, gather_rows(z, rows)));
    for (std::size_t r : rows) position[r] = next++;
  }
  return gather_rows(concat_rows(blocks), std::move(position));
}

inline BatchForward forward_batch(std::span<const Sample> batch, const BoundParams& params) {
  if (batch.empty()) throw ContractError("forward pass over an empty batch");
  BatchForward out;
  out.rows_by_scenario = group_by_scenario(batch, params.scenarios());
  out.embeddings = embed_batch(batch, params);
  out.shared = shared_forward(out.embeddings, params);
  out.specific = route_by_scenario(out.shared, out.rows_by_scenario, [&](std::size_t k, const DiffNode& zk) {
    return specific_forward(k, zk, params);
  });
  out.predictions = route_by_scenario(out.specific, out.rows_by_scenario, [&](std::size_t k, const DiffNode& hk) {
    return predict(hk, k, params);
  });
  return out;
}

inline std::vector<double> labels_of(std::span<const Sample> batch) {
  std::vector<double> y(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) y[i] = batch[i].label;
  return y;
}

/// Batch-mean binary cross-entropy of predictions against the batch labels.
inline DiffNode main_loss(const BatchForward& fwd, std::span<const Sample> batch) {
  if (batch.empty()) throw ContractError("main_loss over an empty batch");
  const auto y = labels_of(batch);
  return scale(bce_sum(fwd.predictions, y), 1.0 / static_cast<double>(batch.size()));
}

inline DiffNode main_loss(std::span<const Sample> batch, const BoundParams& params) {
  if (batch.empty()) throw ContractError("main_loss over an empty batch");
  return main_loss(forward_batch(batch, params), batch);
}

}  // namespace hc2
