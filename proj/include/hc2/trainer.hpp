#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "hc2/adam.hpp"
#include "hc2/autodiff.hpp"
#include "hc2/data.hpp"
#include "hc2/error.hpp"
#include "hc2/loss_generalized.hpp"
#include "hc2/loss_individual.hpp"
#include "hc2/metrics.hpp"
#include "hc2/model.hpp"
#include "hc2/rng.hpp"
#include "hc2/sampling.hpp"

namespace hc2 {

/// Components that can be switched off to reproduce the ablation variants.
struct AblationFlags {
  bool g_loss = true;  // generalized contrastive loss
  bool noise = true;   // diffusion-noised negatives
  bool weight = true;  // reciprocal similarity weights
  bool s_loss = true;  // individual contrastive loss
  bool fine = true;    // cluster-restricted candidate pools

  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

struct TrainConfig {
  double tau = 0.1;
  double lambda1 = 0.1;
  double lambda2 = 0.1;
  double lr = 1e-3;
  std::size_t batch = 256;
  std::size_t epochs = 5;
  std::size_t negatives = 8;
  std::size_t bank = 2048;
  std::size_t clusters = 8;
  std::size_t refresh = 200;
  std::size_t kmeans_iters = 10;
  std::size_t diff_steps = 50;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::optional<std::size_t> diffused;  // diffused negatives per anchor; ceil(N/2) when unset
  double dropout = 0.1;
  double weight_clamp = kDefaultWeightClamp;
  AblationFlags flags;
  bool log_form = true;
  std::uint64_t seed = 42;
  Architecture arch;
  std::size_t uniformity_samples = 500;

  std::size_t diffused_count() const { return diffused.value_or((negatives + 1) / 2); }
  bool generalized_active() const { return flags.g_loss && lambda1 > 0.0; }
  bool individual_active() const { return flags.s_loss && lambda2 > 0.0; }

  void validate() const {
    if (!(tau > 0.0)) throw ConfigError("tau must be positive");
    if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw ConfigError("lambda1 and lambda2 must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (batch < 2) throw ConfigError("batch size must be at least 2");
    if (negatives < 1) throw ConfigError("negatives must be at least 1");
    if (bank < 1) throw ConfigError("bank capacity must be at least 1");
    if (clusters < 1) throw ConfigError("cluster count must be at least 1");
    if (refresh < 1) throw ConfigError("cluster refresh interval must be at least 1");
    if (kmeans_iters < 1) throw ConfigError("k-means iterations must be at least 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    if (!(weight_clamp > 0.0)) throw ConfigError("weight clamp must be positive");
    build_schedule(beta_start, beta_end, diff_steps);
  }
};

/// Mutable training state apart from the parameters. Every stochastic phase
/// owns its own stream so switching one loss off leaves the others' draws
/// untouched.
struct TrainState {
  explicit TrainState(const TrainConfig& cfg)
      : bank(cfg.bank),
        schedule(build_schedule(cfg.beta_start, cfg.beta_end, cfg.diff_steps)),
        init(cfg.seed, "init"),
        batching(cfg.seed, "batching"),
        dropout(cfg.seed, "dropout"),
        sample_g(cfg.seed, "sampling/generalized"),
        sample_s(cfg.seed, "sampling/individual"),
        diffusion(cfg.seed, "diffusion"),
        kmeans(cfg.seed, "kmeans") {}

  MemoryBank bank;
  Matrix centroids;  // empty until the first clustering
  DiffusionSchedule schedule;
  RngStream init, batching, dropout, sample_g, sample_s, diffusion, kmeans;
  std::size_t step = 0;
};

/// Sampling decisions for one step, taken from detached values.
struct LossPlan {
  EmbeddedBatch view;
  std::vector<ContrastiveSet> generalized;
  std::vector<std::size_t> skipped_anchors;
  std::vector<IndividualSelection> individual;
};

struct LossBreakdown {
  DiffNode total;
  DiffNode main;
  double generalized = 0.0;  // L_g before lambda1, 0 when inactive
  double individual = 0.0;   // L_s before lambda2, 0 when inactive
  std::vector<double> generalized_per_anchor;
  std::vector<double> individual_per_anchor;
};

inline EmbeddedBatch make_view(std::span<const Sample> batch, const BatchForward& fwd, const Matrix& centroids) {
  EmbeddedBatch v;
  for (const auto& s : batch) {
    v.scenario.push_back(s.scenario);
    v.label.push_back(s.label);
  }
  v.embed = fwd.embeddings.value();
  v.shared = fwd.shared.value();
  if (centroids.rows() > 0)
    for (std::size_t i = 0; i < batch.size(); ++i) v.cluster.push_back(assign_cluster(v.embed.row(i), centroids));
  return v;
}

/// Re-fits cluster centroids on the embeddings of bank plus batch and
/// re-labels every bank entry.
inline void refresh_clusters(TrainState& state, const Matrix& batch_embed, const TrainConfig& cfg) {
  const std::size_t width = batch_embed.cols();
  Matrix points(state.bank.size() + batch_embed.rows(), width);
  for (std::size_t s = 0; s < state.bank.size(); ++s)
    std::copy(state.bank[s].embed.begin(), state.bank[s].embed.end(), points.row(s).begin());
  std::copy(batch_embed.data().begin(), batch_embed.data().end(),
            points.data().begin() + static_cast<std::ptrdiff_t>(state.bank.size() * width));
  const std::size_t c = std::min(cfg.clusters, points.rows());
  state.centroids = kmeans_fit(points, c, cfg.kmeans_iters, state.kmeans).centroids;
  for (std::size_t s = 0; s < state.bank.size(); ++s) state.bank[s].cluster = assign_cluster(state.bank[s].embed, state.centroids);
}

inline LossPlan plan_losses([[maybe_unused]] std::span<const Sample> batch, [[maybe_unused]] const BatchForward& fwd,
                            [[maybe_unused]] TrainState& state, [[maybe_unused]] const TrainConfig& cfg) {
  LossPlan plan;
#ifndef HC2_NO_CONTRASTIVE
  if (cfg.generalized_active()) {
    const bool fine = cfg.flags.fine && state.centroids.rows() > 0;
    plan.view = make_view(batch, fwd, fine ? state.centroids : Matrix());
    for (std::size_t a = 0; a < batch.size(); ++a) {
      auto set = select_contrastive(a, plan.view, state.bank, cfg.negatives, fine, state.sample_g);
      if (!set) {
        plan.skipped_anchors.push_back(a);
        continue;
      }
      if (cfg.flags.noise) {
        add_diffused_negatives(*set, cfg.diffused_count(), plan.view, state.bank, state.schedule, state.diffusion);
      }
      plan.generalized.push_back(std::move(*set));
    }
  }
  if (cfg.individual_active()) {
    std::vector<std::uint32_t> scenarios;
    for (const auto& s : batch) scenarios.push_back(s.scenario);
    plan.individual = select_individual(scenarios, fwd.rows_by_scenario.size(), cfg.negatives, state.sample_s);
  }
#endif
  return plan;
}

/// L = L_main + lambda1 L_g + lambda2 L_s for a planned step.
inline LossBreakdown build_losses(std::span<const Sample> batch, const BatchForward& fwd,
                                  [[maybe_unused]] const BoundParams& params, [[maybe_unused]] const LossPlan& plan,
                                  [[maybe_unused]] const MemoryBank& bank, [[maybe_unused]] RngStream& dropout_rng,
                                  [[maybe_unused]] const TrainConfig& cfg) {
  LossBreakdown out;
  out.main = main_loss(fwd, batch);
  out.total = out.main;
#ifndef HC2_NO_CONTRASTIVE
  if (cfg.generalized_active() && !plan.generalized.empty()) {
    const GeneralizedOptions opt{cfg.tau, cfg.log_form, cfg.flags.weight, cfg.weight_clamp};
    const DiffNode g = generalized_loss_batch(fwd.shared, plan.generalized, plan.view, bank, opt,
                                              &out.generalized_per_anchor);
    out.generalized = g.scalar();
    out.total = add(out.total, scale(g, cfg.lambda1));
  }
  if (cfg.individual_active() && !plan.individual.empty()) {
    const DiffNode s = individual_loss_batch(fwd.shared, fwd.specific, fwd.rows_by_scenario, plan.individual, params,
                                             cfg.dropout, dropout_rng, cfg.tau, cfg.log_form,
                                             &out.individual_per_anchor);
    out.individual = s.scalar();
    out.total = add(out.total, scale(s, cfg.lambda2));
  }
#endif
  if (!std::isfinite(out.total.scalar())) {
    char msg[192];
    std::snprintf(msg, sizeof msg, "non-finite loss: total=%g main=%g generalized=%g individual=%g",
                  out.total.scalar(), out.main.scalar(), out.generalized, out.individual);
    throw NumericError(msg);
  }
  return out;
}

struct StepResult {
  BatchForward forward;
  LossPlan plan;
  LossBreakdown losses;
};

/// Forward pass, cluster refresh when due, candidate selection and the
/// combined objective for one batch.
inline StepResult total_loss(std::span<const Sample> batch, const BoundParams& params, TrainState& state,
                             const TrainConfig& cfg) {
  StepResult r;
  r.forward = forward_batch(batch, params);
#ifndef HC2_NO_CONTRASTIVE
  if (cfg.generalized_active() && cfg.flags.fine && state.step % cfg.refresh == 0) {
    refresh_clusters(state, r.forward.embeddings.value(), cfg);
  }
#endif
  r.plan = plan_losses(batch, r.forward, state, cfg);
  r.losses = build_losses(batch, r.forward, params, r.plan, state.bank, state.dropout, cfg);
  return r;
}

/// Snapshots post-update representations of a batch into the bank.
inline void push_to_bank(std::span<const Sample> batch, const ModelParams& params, TrainState& state) {
  const BoundParams frozen = bind(params, false);
  const DiffNode e = embed_batch(batch, frozen);
  const DiffNode z = shared_forward(e, frozen);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    MemoryBankEntry entry;
    entry.embed.assign(e.value().row(i).begin(), e.value().row(i).end());
    entry.shared.assign(z.value().row(i).begin(), z.value().row(i).end());
    entry.label = batch[i].label;
    entry.scenario = batch[i].scenario;
    entry.cluster = state.centroids.rows() > 0 ? assign_cluster(entry.embed, state.centroids) : 0;
    state.bank.push(std::move(entry));
  }
}

// ---------------------------------------------------------------------------
// Evaluation and metrics
// ---------------------------------------------------------------------------

/// One metrics line. scenario = -1 is the aggregate over all scenarios.
/// auc and loss_main are measured on the test split; loss_g, loss_s and
/// skipped summarise the training epoch (0 for the pre-training row).
struct MetricsRow {
  long epoch = 0;
  long scenario = -1;
  std::optional<double> auc;
  double loss_main = 0.0;
  double loss_g = 0.0;
  double loss_s = 0.0;
  std::size_t skipped = 0;
};

inline constexpr const char* kMetricsHeader = "epoch,scenario,auc,loss_main,loss_g,loss_s,skipped";

inline std::string format_metrics_row(const MetricsRow& r) {
  char buf[256];
  char auc_text[32] = "nan";
  if (r.auc) std::snprintf(auc_text, sizeof auc_text, "%.6f", *r.auc);
  std::snprintf(buf, sizeof buf, "%ld,%ld,%s,%.6f,%.6f,%.6f,%zu", r.epoch, r.scenario, auc_text, r.loss_main, r.loss_g,
                r.loss_s, r.skipped);
  return buf;
}

inline void write_metrics(std::ostream& out, std::span<const MetricsRow> rows) {
  out << kMetricsHeader << '\n';
  for (const auto& r : rows) out << format_metrics_row(r) << '\n';
}

struct Evaluation {
  std::vector<std::optional<double>> auc;  // per scenario
  std::vector<double> loss;                // per scenario test BCE
  std::vector<std::size_t> count;
  std::optional<double> pooled_auc;
  double pooled_loss = 0.0;
  UniformityResult uniformity;
};

/// Test-split predictions with dropout off; the uniformity of shared
/// representations is computed over up to `uniformity_samples` evenly spaced
/// samples.
inline Evaluation evaluate(const ModelParams& params, std::span<const Sample> samples,
                           std::size_t uniformity_samples = 500) {
  const std::size_t k_count = params.schema.scenarios;
  Evaluation ev;
  ev.auc.resize(k_count);
  ev.loss.assign(k_count, 0.0);
  ev.count.assign(k_count, 0);
  std::vector<double> scores;
  std::vector<std::vector<double>> by_k_scores(k_count);
  std::vector<std::vector<int>> by_k_labels(k_count);
  std::vector<int> labels;
  const BoundParams frozen = bind(params, false);
  constexpr std::size_t kChunk = 1024;
  for (std::size_t start = 0; start < samples.size(); start += kChunk) {
    const auto chunk = samples.subspan(start, std::min(kChunk, samples.size() - start));
    const BatchForward fwd = forward_batch(chunk, frozen);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const double p = fwd.predictions.value()[i];
      const double clamped = std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp);
      const double bce = chunk[i].label ? -std::log(clamped) : -std::log(1.0 - clamped);
      const std::size_t k = chunk[i].scenario;
      ev.loss[k] += bce;
      ev.pooled_loss += bce;
      ++ev.count[k];
      by_k_scores[k].push_back(p);
      by_k_labels[k].push_back(chunk[i].label);
      scores.push_back(p);
      labels.push_back(chunk[i].label);
    }
  }
  for (std::size_t k = 0; k < k_count; ++k) {
    if (ev.count[k] > 0) ev.loss[k] /= static_cast<double>(ev.count[k]);
    ev.auc[k] = auc(by_k_scores[k], by_k_labels[k]);
  }
  if (!samples.empty()) ev.pooled_loss /= static_cast<double>(samples.size());
  ev.pooled_auc = auc(scores, labels);

  const std::size_t m = std::min(uniformity_samples, samples.size());
  if (m >= 2) {
    std::vector<Sample> subset;
    for (std::size_t i = 0; i < m; ++i) subset.push_back(samples[i * samples.size() / m]);
    const DiffNode z = shared_forward(embed_batch(subset, frozen), frozen);
    try {
      ev.uniformity = uniformity(z.value());
    } catch (const ContractError&) {
      ev.uniformity = {0.0, m};  // every representation collapsed to zero
    }
  }
  return ev;
}

/// Per-scenario accumulators for one training epoch.
struct EpochStats {
  explicit EpochStats(std::size_t k) : g_sum(k), g_n(k), s_sum(k), s_n(k), skipped(k) {}
  std::vector<double> g_sum;
  std::vector<std::size_t> g_n;
  std::vector<double> s_sum;
  std::vector<std::size_t> s_n;
  std::vector<std::size_t> skipped;
};

inline std::vector<MetricsRow> metrics_rows(long epoch, const Evaluation& ev, const EpochStats& st) {
  std::vector<MetricsRow> rows;
  auto mean = [](double s, std::size_t n) { return n ? s / static_cast<double>(n) : 0.0; };
  double g = 0.0, s = 0.0;
  std::size_t gn = 0, sn = 0, skipped = 0;
  for (std::size_t k = 0; k < ev.auc.size(); ++k) {
    rows.push_back({epoch, static_cast<long>(k), ev.auc[k], ev.loss[k], mean(st.g_sum[k], st.g_n[k]),
                    mean(st.s_sum[k], st.s_n[k]), st.skipped[k]});
    g += st.g_sum[k];
    gn += st.g_n[k];
    s += st.s_sum[k];
    sn += st.s_n[k];
    skipped += st.skipped[k];
  }
  rows.push_back({epoch, -1, ev.pooled_auc, ev.pooled_loss, mean(g, gn), mean(s, sn), skipped});
  return rows;
}

struct DiagnosticsRow {
  long epoch = 0;
  double uniformity = 0.0;
  std::size_t zero_norm = 0;
};

inline void write_diagnostics(std::ostream& out, std::span<const DiagnosticsRow> rows) {
  out << "epoch,uniformity,zero_norm\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%ld,%.6f,%zu\n", r.epoch, r.uniformity, r.zero_norm);
    out << buf;
  }
}

struct TrainResult {
  ModelParams params;
  std::vector<MetricsRow> metrics;
  std::vector<DiagnosticsRow> diagnostics;
};

/// Full training run: epoch-0 evaluation of the initial model, then per
/// epoch shuffled mixed-scenario batches, Adam updates on the combined
/// objective, bank updates after each step, and a test evaluation.
inline TrainResult train(const Dataset& ds, const TrainConfig& cfg,
                         const std::function<void(std::span<const MetricsRow>)>& on_epoch = {}) {
  cfg.validate();
  if (ds.schema.scenarios == 0) throw DataError("dataset has no scenarios");
  for (const auto& s : ds.train) validate(s, ds.schema);
  for (const auto& s : ds.test) validate(s, ds.schema);

  TrainState state(cfg);
  TrainResult result;
  result.params = ModelParams::initialize(ds.schema, cfg.arch, state.init);
  const auto names = result.params.tensor_names();
  AdamState adam;
  const AdamOptions adam_opt{cfg.lr};
  const std::size_t k_count = ds.schema.scenarios;

  auto record = [&](long epoch, const EpochStats& st) {
    const Evaluation ev = evaluate(result.params, ds.test, cfg.uniformity_samples);
    auto rows = metrics_rows(epoch, ev, st);
    result.metrics.insert(result.metrics.end(), rows.begin(), rows.end());
    result.diagnostics.push_back({epoch, ev.uniformity.value, ev.uniformity.skipped});
    if (on_epoch) on_epoch(rows);
  };
  record(0, EpochStats(k_count));

  std::vector<Sample> batch;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochStats st(k_count);
    const auto batches = epoch_batches(ds.train.size(), cfg.batch, state.batching);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      batch.clear();
      for (std::size_t i : batches[b]) batch.push_back(ds.train[i]);
      StepResult step;
      try {
        const BoundParams bound = bind(result.params);
        step = total_loss(batch, bound, state, cfg);
        backward(step.losses.total);
        const auto grads = bound.gradients();
        const auto tensors = result.params.tensors();
        adam_step(tensors, grads, adam, adam_opt, names);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + " step " + std::to_string(b) + ": " + e.what());
      }
      for (std::size_t a = 0; a < step.plan.generalized.size(); ++a) {
        const std::size_t k = batch[step.plan.generalized[a].anchor].scenario;
        st.g_sum[k] += step.losses.generalized_per_anchor[a];
        ++st.g_n[k];
      }
      for (std::size_t a : step.plan.skipped_anchors) ++st.skipped[batch[a].scenario];
      for (std::size_t a = 0; a < step.plan.individual.size(); ++a) {
        const std::size_t k = batch[step.plan.individual[a].anchor].scenario;
        st.s_sum[k] += step.losses.individual_per_anchor[a];
        ++st.s_n[k];
      }
#ifndef HC2_NO_CONTRASTIVE
      if (cfg.generalized_active()) push_to_bank(batch, result.params, state);
#endif
      ++state.step;
    }
    record(static_cast<long>(epoch), st);
  }
  return result;
}

}  // namespace hc2
