#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <vector>

#include "hc2/autodiff.hpp"
#include "hc2/error.hpp"
#include "hc2/model.hpp"
#include "hc2/rng.hpp"

namespace hc2 {

/// Representations entering the individual loss for one anchor.
struct IndividualTriple {
  DiffNode h;                       // anchor through its own tower, dropout off
  DiffNode h_aug;                   // same z, same tower, dropout on
  std::vector<DiffNode> neg_other;  // other-scenario samples through their own towers
  std::vector<DiffNode> neg_cross;  // within-scenario negatives through a foreign tower
};

/// Second pass through tower k with fresh dropout masks.
inline DiffNode augment_positive(std::size_t k, const DiffNode& z, const BoundParams& params, double rate,
                                 RngStream& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("augmentation dropout rate must lie in [0, 1)");
  return specific_forward(k, z, params, rate, rng);
}

/// Hard negative: a within-scenario negative's z encoded by tower k' != k.
inline DiffNode cross_scenario_negative(std::size_t k_prime, std::size_t anchor_scenario, const DiffNode& z_neg,
                                        const BoundParams& params) {
  if (k_prime == anchor_scenario) throw ContractError("cross-scenario encoding needs a foreign tower");
  return specific_forward(k_prime, z_neg, params);
}

inline DiffNode individual_loss(const IndividualTriple& t, double tau, bool log_form = true) {
  if (t.neg_other.empty() && t.neg_cross.empty()) throw ContractError("individual loss needs at least one negative");
  std::vector<DiffNode> scores{dot(t.h, t.h_aug)};
  for (const auto& n : t.neg_other) scores.push_back(dot(t.h, n));
  for (const auto& n : t.neg_cross) scores.push_back(dot(t.h, n));
  return info_nce(concat_cols(scores), Matrix(1, scores.size(), 1.0), tau, log_form);
}

/// Negatives drawn for one anchor of the batch.
struct IndividualSelection {
  std::size_t anchor = 0;
  std::vector<std::size_t> other;  // batch rows from other scenarios
  struct Cross {
    std::size_t row;    // within-scenario batch row, != anchor
    std::size_t tower;  // foreign tower
  };
  std::vector<Cross> cross;
};

/// For every anchor: up to `negatives` other-scenario rows (uniform, without
/// replacement) and `negatives` cross-encoded pairs, each with a uniform
/// within-scenario row and a uniform foreign tower. Anchors left without any
/// negative are omitted.
inline std::vector<IndividualSelection> select_individual(std::span<const std::uint32_t> scenarios,
                                                          std::size_t scenario_count, std::size_t negatives,
                                                          RngStream& rng) {
  std::vector<std::vector<std::size_t>> by_scenario(scenario_count);
  for (std::size_t i = 0; i < scenarios.size(); ++i) by_scenario.at(scenarios[i]).push_back(i);
  std::vector<IndividualSelection> out;
  std::vector<std::size_t> others;
  for (std::size_t a = 0; a < scenarios.size(); ++a) {
    const std::uint32_t k = scenarios[a];
    IndividualSelection sel;
    sel.anchor = a;
    others.clear();
    for (std::size_t j = 0; j < scenarios.size(); ++j)
      if (scenarios[j] != k) others.push_back(j);
    const std::size_t take = std::min(negatives, others.size());
    for (std::size_t i : rng.sample_without_replacement(others.size(), take)) sel.other.push_back(others[i]);
    const auto& same = by_scenario[k];
    if (scenario_count > 1 && same.size() > 1) {
      for (std::size_t n = 0; n < negatives; ++n) {
        // Uniform over same-scenario rows excluding the anchor.
        std::size_t pick = rng.uniform_index(same.size() - 1);
        if (same[pick] == a) pick = same.size() - 1;
        std::size_t tower = rng.uniform_index(scenario_count - 1);
        if (tower >= k) ++tower;
        sel.cross.push_back({same[pick], tower});
      }
    }
    if (!sel.other.empty() || !sel.cross.empty()) out.push_back(std::move(sel));
  }
  return out;
}

/// Batch form: mean individual loss over the selections.
///
/// `shared` and `specific` are the batch's z and h (batch order); the
/// augmented positives are produced here with dropout at `rate`.
inline DiffNode individual_loss_batch(const DiffNode& shared, const DiffNode& specific,
                                      const std::vector<std::vector<std::size_t>>& rows_by_scenario,
                                      std::span<const IndividualSelection> selections, const BoundParams& params,
                                      double rate, RngStream& dropout_rng, double tau, bool log_form,
                                      std::vector<double>* per_anchor = nullptr) {
  if (selections.empty()) throw ContractError("individual loss over no anchors");
  const std::size_t n = shared.rows();
  const DiffNode augmented = route_by_scenario(shared, rows_by_scenario, [&](std::size_t k, const DiffNode& zk) {
    return augment_positive(k, zk, params, rate, dropout_rng);
  });

  // Cross-encoded negatives, grouped per foreign tower.
  std::vector<std::vector<std::size_t>> cross_rows(params.scenarios());
  std::vector<std::vector<std::size_t>> cross_slot(params.scenarios());
  std::size_t cross_count = 0;
  for (const auto& sel : selections)
    for (const auto& c : sel.cross) {
      cross_rows[c.tower].push_back(c.row);
      cross_slot[c.tower].push_back(cross_count++);
    }
  std::vector<DiffNode> blocks{augmented, specific};
  std::vector<std::size_t> cross_position(cross_count);
  std::size_t next = 2 * n;
  for (std::size_t k = 0; k < cross_rows.size(); ++k) {
    if (cross_rows[k].empty()) continue;
    blocks.push_back(specific_forward(k, gather_rows(shared, cross_rows[k]), params));
    for (std::size_t s : cross_slot[k]) cross_position[s] = next++;
  }
  const DiffNode candidates = concat_rows(blocks);

  std::size_t max_cols = 0;
  for (const auto& sel : selections) max_cols = std::max(max_cols, 1 + sel.other.size() + sel.cross.size());
  std::vector<std::size_t> anchor_rows, cand_rows, cell_r, cell_c;
  Matrix weights(selections.size(), max_cols);
  std::size_t cross_seen = 0;
  for (std::size_t a = 0; a < selections.size(); ++a) {
    const auto& sel = selections[a];
    std::size_t col = 0;
    auto place = [&](std::size_t cand) {
      anchor_rows.push_back(sel.anchor);
      cand_rows.push_back(cand);
      cell_r.push_back(a);
      cell_c.push_back(col);
      weights(a, col) = 1.0;
      ++col;
    };
    place(sel.anchor);
    for (std::size_t j : sel.other) place(n + j);
    for (std::size_t c = 0; c < sel.cross.size(); ++c) place(cross_position[cross_seen++]);
  }
  const DiffNode flat = rows_dot(gather_rows(specific, std::move(anchor_rows)), gather_rows(candidates, std::move(cand_rows)));
  const DiffNode scores = scatter_cells(flat, std::move(cell_r), std::move(cell_c), selections.size(), max_cols);
  return info_nce(scores, weights, tau, log_form, per_anchor);
}

}  // namespace hc2
