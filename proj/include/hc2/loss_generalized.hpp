#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "hc2/autodiff.hpp"
#include "hc2/error.hpp"
#include "hc2/sampling.hpp"

namespace hc2 {

inline constexpr double kDefaultWeightClamp = 1e-2;

/// Reciprocal similarity weight 1 / max(e_i . e_j, eps). A plain double, so
/// it never carries gradient.
inline double reciprocal_weight(std::span<const double> e_i, std::span<const double> e_j,
                                double eps = kDefaultWeightClamp) {
  if (!(eps > 0.0)) throw ConfigError("weight clamp must be positive");
  return 1.0 / std::max(dot(e_i, e_j), eps);
}

enum class PairRole { kPositive, kNegative };

struct WeightedPair {
  double weight = 1.0;
  DiffNode representation;
  PairRole role = PairRole::kNegative;
};

/// Weighted contrastive loss for a single anchor over shared representations.
inline DiffNode generalized_loss(const DiffNode& anchor_z, const WeightedPair& positive,
                                 std::span<const WeightedPair> negatives, double tau, bool log_form = true) {
  if (negatives.empty()) throw ContractError("generalized loss needs at least one negative");
  if (positive.role != PairRole::kPositive) throw ContractError("first pair must have the positive role");
  std::vector<DiffNode> scores{dot(anchor_z, positive.representation)};
  Matrix weights(1, negatives.size() + 1);
  weights[0] = positive.weight;
  for (std::size_t i = 0; i < negatives.size(); ++i) {
    if (negatives[i].role != PairRole::kNegative) throw ContractError("negative pair with the positive role");
    scores.push_back(dot(anchor_z, negatives[i].representation));
    weights[i + 1] = negatives[i].weight;
  }
  for (double w : weights.data()) {
    if (!(w > 0.0) || !std::isfinite(w)) throw ContractError("contrastive weights must be positive and finite");
  }
  return info_nce(concat_cols(scores), weights, tau, log_form);
}

struct GeneralizedOptions {
  double tau = 0.1;
  bool log_form = true;
  bool use_weights = true;
  double weight_clamp = kDefaultWeightClamp;
};

/// Batch form: mean over the given contrastive sets. `shared` is the
/// differentiable z of the batch (rows align with `batch`); bank and diffused
/// candidates enter as constants. `per_anchor` receives each set's loss.
inline DiffNode generalized_loss_batch(const DiffNode& shared, std::span<const ContrastiveSet> sets,
                                       const EmbeddedBatch& batch, const MemoryBank& bank,
                                       const GeneralizedOptions& opt, std::vector<double>* per_anchor = nullptr) {
  if (sets.empty()) throw ContractError("generalized loss over no anchors");
  const std::size_t rows = shared.rows(), width = shared.cols();
  std::vector<double> constants;
  std::size_t n_const = 0;
  std::size_t max_cols = 0;
  for (const auto& s : sets) max_cols = std::max(max_cols, s.negatives.size() + 1);

  std::vector<std::size_t> anchor_rows, cand_rows, cell_r, cell_c;
  Matrix weights(sets.size(), max_cols);
  for (std::size_t a = 0; a < sets.size(); ++a) {
    const auto& set = sets[a];
    const auto anchor_embed = batch.embed.row(set.anchor);
    auto place = [&](const CandidateRef& ref, std::size_t col) {
      const auto info = resolve(ref, &set, batch, bank);
      std::size_t row = 0;
      if (ref.source == Provenance::kInBatch) {
        row = ref.index;
      } else {
        if (info.shared.size() != width) throw DimensionError("candidate width differs from the batch representation");
        constants.insert(constants.end(), info.shared.begin(), info.shared.end());
        row = rows + n_const++;
      }
      anchor_rows.push_back(set.anchor);
      cand_rows.push_back(row);
      cell_r.push_back(a);
      cell_c.push_back(col);
      weights(a, col) = opt.use_weights ? reciprocal_weight(anchor_embed, info.embed, opt.weight_clamp) : 1.0;
    };
    place(set.positive, 0);
    for (std::size_t j = 0; j < set.negatives.size(); ++j) place(set.negatives[j], j + 1);
  }
  DiffNode candidates = shared;
  if (n_const > 0) candidates = concat_rows({shared, constant(Matrix(n_const, width, std::move(constants)))});
  const DiffNode flat = rows_dot(gather_rows(shared, std::move(anchor_rows)), gather_rows(candidates, std::move(cand_rows)));
  const DiffNode scores = scatter_cells(flat, std::move(cell_r), std::move(cell_c), sets.size(), max_cols);
  return info_nce(scores, weights, opt.tau, opt.log_form, per_anchor);
}

}  // namespace hc2
