#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "test_util.hpp"

namespace hc2 {
namespace {

using testing::random_matrix;
using testing::random_params;
using testing::small_arch;

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.arch = small_arch();
  cfg.batch = 32;
  cfg.epochs = 2;
  cfg.negatives = 3;
  cfg.bank = 64;
  cfg.clusters = 3;
  cfg.refresh = 4;
  cfg.diff_steps = 10;
  cfg.uniformity_samples = 60;
  cfg.lr = 5e-3;
  return cfg;
}

Dataset small_dataset(std::uint64_t seed = 3) {
  SynthConfig s;
  s.fields = 4;
  s.vocab = 8;
  s.counts = {150, 150, 40};
  s.seed = seed;
  return synth_generate(s);
}

std::string metrics_text(const TrainResult& r) {
  std::ostringstream out;
  write_metrics(out, r.metrics);
  write_diagnostics(out, r.diagnostics);
  return out.str();
}

std::vector<Sample> mixed_batch(std::size_t n, std::uint64_t seed) {
  RngStream r(seed, "batch");
  return testing::random_samples(n, Schema{3, {8, 8, 8, 8}}, r);
}

TEST(TotalLoss, ZeroLambdasGiveMainLossExactly) {
  const ModelParams p = random_params(Schema{3, {8, 8, 8, 8}}, small_arch(), 1);
  const auto batch = mixed_batch(24, 1);
  TrainConfig cfg = small_config();
  cfg.lambda1 = cfg.lambda2 = 0.0;
  TrainState state(cfg);
  const auto step = total_loss(batch, bind(p), state, cfg);
  EXPECT_EQ(step.losses.total.scalar(), main_loss(batch, bind(p, false)).scalar());
  EXPECT_TRUE(step.plan.generalized.empty());
  EXPECT_TRUE(step.plan.individual.empty());
}

TEST(TotalLoss, HandArithmetic) {
  // lambda1 = 1 with L_g = 0.5 and L_main = 0.7.
  const DiffNode main = constant(Matrix::scalar(0.7)), g = constant(Matrix::scalar(0.5));
  EXPECT_NEAR(add(main, scale(g, 1.0)).scalar(), 1.2, 1e-15);
}

TEST(TotalLoss, EqualsIndependentlySummedComponents) {
  const ModelParams p = random_params(Schema{3, {8, 8, 8, 8}}, small_arch(), 2);
  TrainConfig cfg = small_config();
  cfg.lambda1 = 0.3;
  cfg.lambda2 = 0.7;
  for (std::uint64_t trial = 0; trial < 5; ++trial) {
    const auto batch = mixed_batch(24, 10 + trial);
    TrainState state(cfg);
    push_to_bank(mixed_batch(16, 20 + trial), p, state);
    const auto step = total_loss(batch, bind(p), state, cfg);
    ASSERT_FALSE(step.plan.generalized.empty());
    ASSERT_FALSE(step.plan.individual.empty());
    double g = 0.0, s = 0.0;
    for (double v : step.losses.generalized_per_anchor) g += v;
    for (double v : step.losses.individual_per_anchor) s += v;
    g /= static_cast<double>(step.losses.generalized_per_anchor.size());
    s /= static_cast<double>(step.losses.individual_per_anchor.size());
    const double expected = main_loss(batch, bind(p, false)).scalar() + 0.3 * g + 0.7 * s;
    EXPECT_NEAR(step.losses.total.scalar(), expected, 1e-12);
    EXPECT_NEAR(step.losses.generalized, g, 1e-12);
    EXPECT_NEAR(step.losses.individual, s, 1e-12);
  }
}

class CompositeGradient : public ::testing::TestWithParam<int> {};

TEST_P(CompositeGradient, MatchesCentralDifferences) {
  EXPECT_LT(testing::composite_gradient_error(static_cast<std::uint64_t>(GetParam())), 1e-4);
}

INSTANTIATE_TEST_SUITE_P(HundredTrials, CompositeGradient, ::testing::Range(0, 100));

TEST(Adam, ZeroGradientLeavesParameters) {
  Matrix x = Matrix::row_vector({1.0, -2.0});
  const Matrix before = x;
  AdamState st;
  std::vector<Matrix*> ps{&x};
  std::vector<Matrix> gs{Matrix(1, 2)};
  for (int i = 0; i < 3; ++i) adam_step(ps, gs, st, AdamOptions{});
  EXPECT_EQ(x, before);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Matrix x = Matrix::row_vector({1.0, -2.0, 0.5});
  AdamState st;
  std::vector<Matrix*> ps{&x};
  std::vector<Matrix> gs{Matrix::row_vector({3.0, -0.01, 100.0})};
  adam_step(ps, gs, st, AdamOptions{0.1});
  EXPECT_NEAR(x[0], 0.9, 1e-6);
  EXPECT_NEAR(x[1], -1.9, 1e-4);
  EXPECT_NEAR(x[2], 0.4, 1e-6);
}

TEST(Adam, QuadraticDescent) {
  Matrix x = Matrix::scalar(1.0);
  AdamState st;
  std::vector<Matrix*> ps{&x};
  double prev = 1.0;
  for (int i = 0; i < 10; ++i) {
    std::vector<Matrix> gs{Matrix::scalar(2.0 * x[0])};
    adam_step(ps, gs, st, AdamOptions{0.1});
    EXPECT_LT(std::abs(x[0]), prev);
    prev = std::abs(x[0]);
  }
}

TEST(Adam, NanGradientNamesParameter) {
  Matrix x = Matrix::scalar(1.0);
  AdamState st;
  std::vector<Matrix*> ps{&x};
  std::vector<Matrix> gs{Matrix::scalar(std::nan(""))};
  const std::vector<std::string> names{"towers.1.weight"};
  try {
    adam_step(ps, gs, st, AdamOptions{}, names);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("towers.1.weight"), std::string::npos);
  }
  std::vector<Matrix> wrong{Matrix(2, 2)};
  EXPECT_THROW(adam_step(ps, wrong, st, AdamOptions{}), DimensionError);
}

TEST(Auc, Examples) {
  EXPECT_EQ(auc(std::vector<double>{0.9, 0.1}, std::vector<int>{1, 0}), 1.0);
  EXPECT_EQ(auc(std::vector<double>{0.1, 0.9}, std::vector<int>{1, 0}), 0.0);
  EXPECT_EQ(auc(std::vector<double>{0.5, 0.5}, std::vector<int>{1, 0}), 0.5);
  EXPECT_FALSE(auc(std::vector<double>{0.1, 0.9}, std::vector<int>{1, 1}));
  EXPECT_FALSE(auc(std::vector<double>{}, std::vector<int>{}));
  EXPECT_THROW(auc(std::vector<double>{0.1}, std::vector<int>{1, 0}), DimensionError);
}

// O(n^2) pair counting, ties worth one half.
std::optional<double> pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0, pos = 0.0, neg = 0.0;
  for (int v : y) (v ? pos : neg) += 1.0;
  if (pos == 0.0 || neg == 0.0) return std::nullopt;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
  return wins / (pos * neg);
}

TEST(Auc, MatchesPairwiseOracleExactly) {
  RngStream r(1, "auc");
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + r.uniform_index(50);
    // Every other instance draws from a handful of levels to force ties.
    const std::size_t levels = trial % 2 == 0 ? 3 : 1000000;
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(r.uniform_index(levels)) / static_cast<double>(levels);
      y[i] = static_cast<int>(r.uniform_index(2));
    }
    EXPECT_EQ(auc(s, y), pairwise_auc(s, y)) << "trial " << trial;
  }
}

TEST(Uniformity, IdenticalAndAntipodal) {
  EXPECT_NEAR(uniformity(Matrix::from_rows({{1, 2}, {1, 2}, {2, 4}})).value, 0.0, 1e-15);
  EXPECT_NEAR(uniformity(Matrix::from_rows({{1, 0}, {-3, 0}})).value, -8.0, 1e-12);
}

TEST(Uniformity, MatchesDoubleLoop) {
  RngStream r(2, "unif");
  Matrix m = random_matrix(100, 5, r);
  double acc = 0.0;
  int pairs = 0;
  for (std::size_t i = 0; i < 100; ++i)
    for (std::size_t j = i + 1; j < 100; ++j) {
      double ni = 0, nj = 0, d = 0;
      for (std::size_t c = 0; c < 5; ++c) {
        ni += m(i, c) * m(i, c);
        nj += m(j, c) * m(j, c);
      }
      for (std::size_t c = 0; c < 5; ++c) {
        const double diff = m(i, c) / std::sqrt(ni) - m(j, c) / std::sqrt(nj);
        d += diff * diff;
      }
      acc += std::exp(-2.0 * d);
      ++pairs;
    }
  EXPECT_NEAR(uniformity(m).value, std::log(acc / pairs), 1e-12);
}

TEST(Uniformity, ZeroRowsAreSkippedAndCounted) {
  const auto r = uniformity(Matrix::from_rows({{1, 0}, {0, 0}, {-1, 0}}));
  EXPECT_EQ(r.skipped, 1u);
  EXPECT_NEAR(r.value, -8.0, 1e-12);
  EXPECT_THROW(uniformity(Matrix::from_rows({{0, 0}, {1, 0}})), ContractError);
}

TEST(Metrics, RowFormatting) {
  MetricsRow row{3, -1, 0.8125, 0.5, 0.25, 0.0, 7};
  EXPECT_EQ(format_metrics_row(row), "3,-1,0.812500,0.500000,0.250000,0.000000,7");
  row.auc.reset();
  EXPECT_EQ(format_metrics_row(row), "3,-1,nan,0.500000,0.250000,0.000000,7");
}

TEST(Train, ZeroEpochsEvaluatesInitialModel) {
  // A single random network can correlate with the labels by chance, so the
  // chance-level claim is checked on the average over initialization seeds.
  SynthConfig s;
  s.counts = {2000, 2000, 2000};
  const Dataset ds = synth_generate(s);
  std::vector<double> mean(4, 0.0);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    TrainConfig cfg;
    cfg.epochs = 0;
    cfg.seed = seed;
    const auto r = train(ds, cfg);
    ASSERT_EQ(r.metrics.size(), 4u);
    ASSERT_EQ(r.diagnostics.size(), 1u);
    EXPECT_EQ(r.metrics.back().scenario, -1);
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_EQ(r.metrics[i].epoch, 0);
      EXPECT_EQ(r.metrics[i].loss_g, 0.0);
      ASSERT_TRUE(r.metrics[i].auc);
      mean[i] += *r.metrics[i].auc / 10.0;
    }
  }
  for (double m : mean) EXPECT_NEAR(m, 0.5, 0.05);
}

TEST(Train, DeterministicUnderSeed) {
  const Dataset ds = small_dataset();
  const TrainConfig cfg = small_config();
  const auto a = train(ds, cfg), b = train(ds, cfg);
  EXPECT_EQ(metrics_text(a), metrics_text(b));
  EXPECT_EQ(serialize_model(a.params, 2), serialize_model(b.params, 2));
  TrainConfig other = cfg;
  other.seed = 43;
  EXPECT_NE(metrics_text(train(ds, other)), metrics_text(a));
}

TEST(Train, ZeroLambdasMatchBackboneOnlyTrajectory) {
  // With both coefficients zero the contrastive streams are never drawn, so
  // every contrastive setting is irrelevant to the trajectory.
  const Dataset ds = small_dataset();
  TrainConfig a = small_config();
  a.lambda1 = a.lambda2 = 0.0;
  TrainConfig b = a;
  b.negatives = 7;
  b.clusters = 5;
  b.flags.noise = false;
  b.dropout = 0.4;
  b.tau = 0.9;
  const auto ra = train(ds, a), rb = train(ds, b);
  EXPECT_EQ(metrics_text(ra), metrics_text(rb));
  EXPECT_EQ(serialize_model(ra.params, 0), serialize_model(rb.params, 0));
}

TEST(Train, DisablingOneLossKeepsOtherStreams) {
  // Turning off L_s leaves the L_g sampling stream untouched: the epoch-1
  // generalized loss of the first step is identical, so the first epoch's
  // skip counts agree.
  const Dataset ds = small_dataset();
  TrainConfig full = small_config();
  full.epochs = 1;
  TrainConfig no_s = full;
  no_s.flags.s_loss = false;
  TrainState sa(full), sb(no_s);
  const ModelParams p = ModelParams::initialize(ds.schema, full.arch, sa.init);
  const std::vector<Sample> batch(ds.train.begin(), ds.train.begin() + 32);
  const auto a = total_loss(batch, bind(p), sa, full);
  const auto b = total_loss(batch, bind(p), sb, no_s);
  EXPECT_EQ(a.losses.generalized, b.losses.generalized);
  EXPECT_EQ(a.plan.skipped_anchors, b.plan.skipped_anchors);
  EXPECT_EQ(b.losses.individual, 0.0);
}

TEST(Train, SeparableToyReachesHighTrainAuc) {
  Dataset ds;
  ds.schema = Schema{1, {10}};
  for (std::uint32_t rep = 0; rep < 20; ++rep)
    for (std::uint32_t id = 0; id < 10; ++id) ds.train.push_back({0, static_cast<std::uint8_t>(id < 5), {id}});
  ds.test = ds.train;
  TrainConfig cfg;
  cfg.batch = 16;
  cfg.epochs = 50;
  cfg.lr = 1e-2;
  cfg.lambda1 = cfg.lambda2 = 0.0;
  const auto r = train(ds, cfg);
  double best = 0.0;
  for (const auto& row : r.metrics)
    if (row.scenario == 0 && row.auc) best = std::max(best, *row.auc);
  EXPECT_GT(best, 0.99);
}

TEST(Train, AblationVariantsRunAndStayFinite) {
  const Dataset ds = small_dataset();
  for (int v = 0; v < 4; ++v) {
    TrainConfig cfg = small_config();
    if (v == 0) cfg.flags.g_loss = false;
    if (v == 1) cfg.flags.noise = false;
    if (v == 2) cfg.flags.weight = false;
    if (v == 3) cfg.flags.s_loss = false;
    const auto r = train(ds, cfg);
    for (const auto& row : r.metrics) {
      EXPECT_TRUE(std::isfinite(row.loss_main));
      EXPECT_TRUE(std::isfinite(row.loss_g));
      EXPECT_TRUE(std::isfinite(row.loss_s));
      if (row.epoch > 0 && row.scenario == -1) {
        EXPECT_EQ(row.loss_g > 0.0, v != 0) << "variant " << v;
        EXPECT_EQ(row.loss_s > 0.0, v != 3) << "variant " << v;
      }
    }
  }
}

TEST(Train, OnEpochSeesEveryEpoch) {
  const Dataset ds = small_dataset();
  TrainConfig cfg = small_config();
  cfg.lambda1 = cfg.lambda2 = 0.0;
  std::vector<long> epochs;
  train(ds, cfg, [&](std::span<const MetricsRow> rows) { epochs.push_back(rows.front().epoch); });
  EXPECT_EQ(epochs, (std::vector<long>{0, 1, 2}));
}

TEST(Train, RejectsBadConfigAndData) {
  const Dataset ds = small_dataset();
  TrainConfig cfg = small_config();
  cfg.tau = 0.0;
  EXPECT_THROW(train(ds, cfg), ConfigError);
  Dataset empty;
  EXPECT_THROW(train(empty, small_config()), DataError);
}

}  // namespace
}  // namespace hc2
