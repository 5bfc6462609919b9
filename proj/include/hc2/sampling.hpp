#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hc2/error.hpp"
#include "hc2/matrix.hpp"
#include "hc2/rng.hpp"

namespace hc2 {

// ---------------------------------------------------------------------------
// Forward diffusion
// ---------------------------------------------------------------------------

/// Linear variance schedule and its running products alpha_bar_t = prod_{i<=t} (1 - beta_i).
/// Index t - 1 holds step t.
struct DiffusionSchedule {
  std::vector<double> beta;
  std::vector<double> alpha_bar;

  std::size_t steps() const noexcept { return beta.size(); }
};

inline DiffusionSchedule build_schedule(double beta_start, double beta_end, std::size_t steps) {
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("diffusion schedule needs 0 < beta_start <= beta_end < 1, got [" + std::to_string(beta_start) +
                      ", " + std::to_string(beta_end) + "]");
  }
  if (steps < 1) throw ConfigError("diffusion schedule needs at least one step");
  DiffusionSchedule s;
  s.beta.resize(steps);
  s.alpha_bar.resize(steps);
  double running = 1.0;
  for (std::size_t t = 0; t < steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(steps - 1);
    s.beta[t] = beta_start + (beta_end - beta_start) * frac;
    running *= 1.0 - s.beta[t];
    s.alpha_bar[t] = running;
  }
  return s;
}

/// sqrt(alpha_bar_t) z + sqrt(1 - alpha_bar_t) noise, with the noise supplied.
inline std::vector<double> diffuse_with_noise(std::span<const double> z, std::size_t t,
                                              const DiffusionSchedule& schedule, std::span<const double> noise) {
  if (t < 1 || t > schedule.steps()) {
    throw IndexError("diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(schedule.steps()) + "]");
  }
  if (noise.size() != z.size()) throw DimensionError("noise length differs from representation length");
  const double ab = schedule.alpha_bar[t - 1];
  const double signal = std::sqrt(ab), spread = std::sqrt(1.0 - ab);
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = signal * z[i] + spread * noise[i];
  return out;
}

/// Closed-form sample of the forward process at step t.
inline std::vector<double> diffuse(std::span<const double> z, std::size_t t, const DiffusionSchedule& schedule,
                                   RngStream& rng) {
  if (t < 1 || t > schedule.steps()) {
    throw IndexError("diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(schedule.steps()) + "]");
  }
  std::vector<double> noise(z.size());
  for (double& m : noise) m = rng.normal();
  return diffuse_with_noise(z, t, schedule, noise);
}

/// The same distribution reached by t one-step transitions
/// x_s = sqrt(1 - beta_s) x_{s-1} + sqrt(beta_s) m_s.
inline std::vector<double> diffuse_chain(std::span<const double> z, std::size_t t, const DiffusionSchedule& schedule,
                                         RngStream& rng) {
  if (t < 1 || t > schedule.steps()) {
    throw IndexError("diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(schedule.steps()) + "]");
  }
  std::vector<double> x(z.begin(), z.end());
  for (std::size_t s = 0; s < t; ++s) {
    const double keep = std::sqrt(1.0 - schedule.beta[s]), spread = std::sqrt(schedule.beta[s]);
    for (double& v : x) v = keep * v + spread * rng.normal();
  }
  return x;
}

// ---------------------------------------------------------------------------
// k-means
// ---------------------------------------------------------------------------

/// Nearest centroid by squared Euclidean distance; lowest index wins ties.
inline std::size_t assign_cluster(std::span<const double> point, const Matrix& centroids) {
  if (centroids.rows() == 0) throw ContractError("assign_cluster with no centroids");
  if (centroids.cols() != point.size()) {
    throw DimensionError("point of length " + std::to_string(point.size()) + " vs centroids " + centroids.shape_str());
  }
  std::size_t best = 0;
  double best_d = squared_distance(point, centroids.row(0));
  for (std::size_t c = 1; c < centroids.rows(); ++c) {
    const double d = squared_distance(point, centroids.row(c));
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

inline double within_cluster_ss(const Matrix& points, const Matrix& centroids, std::span<const std::size_t> assignment) {
  double s = 0.0;
  for (std::size_t i = 0; i < points.rows(); ++i) s += squared_distance(points.row(i), centroids.row(assignment[i]));
  return s;
}

struct KMeansResult {
  Matrix centroids;
  std::vector<std::size_t> assignment;
  std::vector<double> inertia;  // within-cluster sum of squares after each iteration
  std::size_t iterations = 0;
  bool converged = false;
};

/// Lloyd's algorithm over the rows of `points`.
///
/// Centroids start at C distinct points drawn uniformly. A cluster left empty
/// after an update is re-seeded with the point farthest from its own centroid
/// (taken only from clusters with more than one member). Stops after `iters`
/// iterations or once assignments no longer change.
inline KMeansResult kmeans_fit(const Matrix& points, std::size_t clusters, std::size_t iters, RngStream& rng) {
  const std::size_t n = points.rows(), d = points.cols();
  if (n == 0) throw ConfigError("k-means over no points");
  if (clusters == 0 || clusters > n) {
    throw ConfigError("k-means cluster count " + std::to_string(clusters) + " must lie in [1, " + std::to_string(n) +
                      "]");
  }
  KMeansResult r;
  r.centroids = Matrix(clusters, d);
  const auto seeds = rng.sample_without_replacement(n, clusters);
  for (std::size_t c = 0; c < clusters; ++c) {
    std::copy(points.row(seeds[c]).begin(), points.row(seeds[c]).end(), r.centroids.row(c).begin());
  }
  r.assignment.assign(n, 0);
  std::vector<std::size_t> counts(clusters);

  auto recompute_means = [&] {
    Matrix sums(clusters, d);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = r.assignment[i];
      ++counts[c];
      for (std::size_t j = 0; j < d; ++j) sums(c, j) += points(i, j);
    }
    for (std::size_t c = 0; c < clusters; ++c) {
      if (counts[c] == 0) continue;
      for (std::size_t j = 0; j < d; ++j) r.centroids(c, j) = sums(c, j) / static_cast<double>(counts[c]);
    }
  };

  for (std::size_t it = 0; it < iters; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = assign_cluster(points.row(i), r.centroids);
      if (it == 0 || c != r.assignment[i]) changed = true;
      r.assignment[i] = c;
    }
    if (!changed) {
      r.converged = true;
      break;
    }
    recompute_means();
    for (std::size_t c = 0; c < clusters; ++c) {
      if (counts[c] != 0) continue;
      std::size_t far = n;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[r.assignment[i]] < 2) continue;
        const double dist = squared_distance(points.row(i), r.centroids.row(r.assignment[i]));
        if (dist > far_d) {
          far_d = dist;
          far = i;
        }
      }
      if (far == n) continue;  // every remaining cluster is a singleton
      r.assignment[far] = c;
      recompute_means();
    }
    r.inertia.push_back(within_cluster_ss(points, r.centroids, r.assignment));
    ++r.iterations;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Memory bank
// ---------------------------------------------------------------------------

/// Detached snapshot of one sample's representations.
struct MemoryBankEntry {
  std::vector<double> shared;  // z
  std::vector<double> embed;   // e, used for similarity weights and clustering
  std::uint8_t label = 0;
  std::uint32_t scenario = 0;
  std::size_t cluster = 0;

  friend bool operator==(const MemoryBankEntry&, const MemoryBankEntry&) = default;
};

/// Fixed-capacity FIFO ring buffer.
class MemoryBank {
 public:
  explicit MemoryBank(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw ConfigError("memory bank capacity must be positive");
    slots_.reserve(capacity);
  }

  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t size() const noexcept { return slots_.size(); }
  bool empty() const noexcept { return slots_.empty(); }

  void push(MemoryBankEntry entry) {
    if (slots_.size() < capacity_) {
      slots_.push_back(std::move(entry));
    } else {
      slots_[cursor_] = std::move(entry);
    }
    cursor_ = (cursor_ + 1) % capacity_;
  }

  /// Storage slot access; slot order is stable between pushes.
  const MemoryBankEntry& operator[](std::size_t slot) const { return slots_[slot]; }
  MemoryBankEntry& operator[](std::size_t slot) { return slots_[slot]; }

  /// Entries from oldest to newest.
  std::vector<MemoryBankEntry> ordered() const {
    std::vector<MemoryBankEntry> out;
    out.reserve(slots_.size());
    const std::size_t start = slots_.size() < capacity_ ? 0 : cursor_;
    for (std::size_t i = 0; i < slots_.size(); ++i) out.push_back(slots_[(start + i) % slots_.size()]);
    return out;
  }

 private:
  std::size_t capacity_;
  std::size_t cursor_ = 0;
  std::vector<MemoryBankEntry> slots_;
};

// ---------------------------------------------------------------------------
// Contrastive candidate selection
// ---------------------------------------------------------------------------

/// Detached view of the current batch used for candidate selection.
struct EmbeddedBatch {
  std::vector<std::uint32_t> scenario;
  std::vector<std::uint8_t> label;
  Matrix shared;                     // z rows
  Matrix embed;                      // e rows
  std::vector<std::size_t> cluster;  // empty unless clusters are available

  std::size_t size() const noexcept { return scenario.size(); }
};

enum class Provenance : std::uint8_t { kInBatch, kBank, kDiffused };

struct CandidateRef {
  Provenance source = Provenance::kInBatch;
  std::size_t index = 0;  // batch row, bank slot, or position in ContrastiveSet::diffused

  friend bool operator==(const CandidateRef&, const CandidateRef&) = default;
};

/// A synthesized negative and the label-aware negative it was derived from.
struct DiffusedNegative {
  std::vector<double> shared;
  CandidateRef origin;
  std::size_t step = 0;
};

struct ContrastiveSet {
  std::size_t anchor = 0;
  CandidateRef positive;
  std::vector<CandidateRef> negatives;  // label-aware, then diffused entries
  std::vector<DiffusedNegative> diffused;
};

struct CandidateInfo {
  std::uint32_t scenario;
  std::uint8_t label;
  std::span<const double> shared;
  std::span<const double> embed;
};

/// Resolves a reference to its scenario, label and vectors. Diffused entries
/// report their origin's scenario, label and embedding.
inline CandidateInfo resolve(const CandidateRef& ref, const ContrastiveSet* set, const EmbeddedBatch& batch,
                             const MemoryBank& bank) {
  switch (ref.source) {
    case Provenance::kInBatch:
      return {batch.scenario[ref.index], batch.label[ref.index], batch.shared.row(ref.index), batch.embed.row(ref.index)};
    case Provenance::kBank: {
      const auto& e = bank[ref.index];
      return {e.scenario, e.label, e.shared, e.embed};
    }
    case Provenance::kDiffused: {
      if (set == nullptr) throw ContractError("diffused reference without its contrastive set");
      const auto& d = set->diffused[ref.index];
      CandidateInfo origin = resolve(d.origin, set, batch, bank);
      origin.shared = d.shared;
      return origin;
    }
  }
  throw ContractError("unknown candidate provenance");
}

/// Label-aware selection for one anchor.
///
/// Positive: uniform over other-scenario, same-label entries of batch and bank.
/// Negatives: up to `negatives` drawn uniformly without replacement from
/// other-scenario, opposite-label entries. With `fine`, each pool is first
/// restricted to the anchor's cluster, falling back to the full pool when the
/// restriction is empty. Returns nullopt when no positive or no negative exists.
inline std::optional<ContrastiveSet> select_contrastive(std::size_t anchor, const EmbeddedBatch& batch,
                                                        const MemoryBank& bank, std::size_t negatives, bool fine,
                                                        RngStream& rng) {
  if (anchor >= batch.size()) throw IndexError("anchor " + std::to_string(anchor) + " outside the batch");
  if (fine && batch.cluster.size() != batch.size()) {
    throw ContractError("fine-grained selection needs cluster assignments for the batch");
  }
  const auto a_scenario = batch.scenario[anchor];
  const auto a_label = batch.label[anchor];
  const std::size_t a_cluster = fine ? batch.cluster[anchor] : 0;

  std::vector<CandidateRef> pos, neg, pos_near, neg_near;
  for (auto* pool : {&pos, &neg, &pos_near, &neg_near}) pool->reserve(batch.size() + bank.size());
  auto consider = [&](CandidateRef ref, std::uint32_t scenario, std::uint8_t label, std::size_t cluster) {
    if (scenario == a_scenario) return;
    const bool near = fine && cluster == a_cluster;
    if (label == a_label) {
      pos.push_back(ref);
      if (near) pos_near.push_back(ref);
    } else {
      neg.push_back(ref);
      if (near) neg_near.push_back(ref);
    }
  };
  for (std::size_t j = 0; j < batch.size(); ++j) {
    if (j == anchor) continue;
    consider({Provenance::kInBatch, j}, batch.scenario[j], batch.label[j], fine ? batch.cluster[j] : 0);
  }
  for (std::size_t s = 0; s < bank.size(); ++s) {
    consider({Provenance::kBank, s}, bank[s].scenario, bank[s].label, bank[s].cluster);
  }
  const auto& pos_pool = fine && !pos_near.empty() ? pos_near : pos;
  const auto& neg_pool = fine && !neg_near.empty() ? neg_near : neg;
  if (pos_pool.empty() || neg_pool.empty()) return std::nullopt;

  ContrastiveSet set;
  set.anchor = anchor;
  set.positive = pos_pool[rng.uniform_index(pos_pool.size())];
  const std::size_t take = std::min(negatives, neg_pool.size());
  for (std::size_t i : rng.sample_without_replacement(neg_pool.size(), take)) set.negatives.push_back(neg_pool[i]);
  if (set.negatives.empty()) return std::nullopt;
  return set;
}

/// Appends `count` diffusion-noised copies of the set's label-aware negatives.
/// Each copy picks its source uniformly and its step uniformly from [1, T].
inline void add_diffused_negatives(ContrastiveSet& set, std::size_t count, const EmbeddedBatch& batch,
                                   const MemoryBank& bank, const DiffusionSchedule& schedule, RngStream& rng) {
  const std::size_t sources = set.negatives.size();
  if (sources == 0 || count == 0) return;
  for (std::size_t i = 0; i < count; ++i) {
    const CandidateRef origin = set.negatives[rng.uniform_index(sources)];
    if (origin.source == Provenance::kDiffused) throw ContractError("diffused entries cannot seed diffusion");
    const std::size_t t = 1 + rng.uniform_index(schedule.steps());
    const auto info = resolve(origin, &set, batch, bank);
    set.diffused.push_back({diffuse(info.shared, t, schedule, rng), origin, t});
  }
  for (std::size_t i = 0; i < count; ++i) set.negatives.push_back({Provenance::kDiffused, set.diffused.size() - count + i});
}

}  // namespace hc2
