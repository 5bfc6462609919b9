#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "test_util.hpp"

namespace fs = std::filesystem;

namespace hc2 {
namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + (env.empty() ? "" : " ") + HC2_CLI_PATH + std::string(" ") + args + " 2>/dev/null";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  std::size_t n = 0;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream in(line);
  for (std::string c; std::getline(in, c, ',');) out.push_back(c);
  return out;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("hc2_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  // Small dataset plus a short training run shared by several tests.
  void synth_and_train(const std::string& extra = "") {
    ASSERT_EQ(run("synth --out " + path("d") + " --k 3 --fields 4 --vocab 8 --counts 150 150 40 --seed 5").code, 0);
    ASSERT_EQ(run("train --data " + path("d") + " --out " + path("run") + kTrainFlags + extra).code, 0);
  }

  static constexpr const char* kTrainFlags =
      " --epochs 2 --batch 32 --seed 3 --embed-dim 3 --shared-widths 6 5 --tower-widths 4 --bank 64 --clusters 3"
      " --refresh 4 --negatives 3 --diff-steps 10 --uniformity-samples 50";

  fs::path dir_;
};

TEST_F(Cli, SynthWritesFilesDeterministically) {
  ASSERT_EQ(run("synth --k 3 --seed 7 --counts 40 40 10 --out " + path("a")).code, 0);
  ASSERT_EQ(run("synth --k 3 --seed 7 --counts 40 40 10 --out " + path("b")).code, 0);
  for (const char* f : {"train.csv", "test.csv"}) {
    ASSERT_TRUE(fs::exists(dir_ / "a" / f));
    EXPECT_EQ(slurp(dir_ / "a" / f), slurp(dir_ / "b" / f));
  }
  const std::string manifest = slurp(dir_ / "a" / "manifest");
  EXPECT_NE(manifest.find("data_checksum"), std::string::npos);
  EXPECT_NE(manifest.find("seed = 7"), std::string::npos);
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run("synth --k 0 --out " + path("x")).code, 2);
  EXPECT_EQ(run("synth --out /proc/hc2_forbidden/x").code, 2);
  EXPECT_EQ(run("train --data " + path("missing") + " --out " + path("o")).code, 2);
  EXPECT_EQ(run("train --bogus-flag").code, 2);
  EXPECT_EQ(run("").code, 2);
  ASSERT_EQ(run("synth --k 2 --counts 30 30 --fields 3 --out " + path("d")).code, 0);
  EXPECT_EQ(run("train --data " + path("d") + " --out " + path("o") + " --tau 0").code, 2);
  EXPECT_EQ(run("train --data " + path("d") + " --out " + path("o") + " --ablate everything").code, 2);
  EXPECT_EQ(run("train --data " + path("d") + " --out " + path("o") + " --epochs abc").code, 2);
  // Shape mismatch between a model and data is a runtime failure.
  ASSERT_EQ(run("train --data " + path("d") + " --out " + path("o") + " --epochs 0").code, 0);
  ASSERT_EQ(run("synth --k 2 --counts 30 30 --fields 5 --out " + path("wide")).code, 0);
  EXPECT_EQ(run("eval --model " + path("o/model.bin") + " --data " + path("wide")).code, 3);
  std::ofstream(path("bad.bin")) << "garbage";
  EXPECT_EQ(run("eval --model " + path("bad.bin") + " --data " + path("d")).code, 3);
}

TEST_F(Cli, TrainWritesEpochRows) {
  synth_and_train();
  const auto rows = lines_of(slurp(dir_ / "run" / "metrics.csv"));
  ASSERT_EQ(rows.size(), 1u + 3u * 4u);
  EXPECT_EQ(rows[0], kMetricsHeader);
  EXPECT_EQ(split(rows.back())[0], "2");
  EXPECT_EQ(split(rows.back())[1], "-1");
  EXPECT_TRUE(fs::exists(dir_ / "run" / "model.bin"));
  EXPECT_EQ(lines_of(slurp(dir_ / "run" / "diagnostics.csv")).size(), 4u);
}

TEST_F(Cli, RerunIsByteIdentical) {
  synth_and_train();
  std::vector<std::string> first;
  for (const char* f : {"metrics.csv", "diagnostics.csv", "model.bin", "manifest"}) first.push_back(slurp(dir_ / "run" / f));
  ASSERT_EQ(run("train --data " + path("d") + " --out " + path("run") + kTrainFlags).code, 0);
  std::size_t i = 0;
  for (const char* f : {"metrics.csv", "diagnostics.csv", "model.bin", "manifest"}) EXPECT_EQ(slurp(dir_ / "run" / f), first[i++]) << f;
  const auto e1 = run("eval --model " + path("run/model.bin") + " --data " + path("d"));
  const auto e2 = run("eval --model " + path("run/model.bin") + " --data " + path("d"));
  EXPECT_EQ(e1.out, e2.out);
}

TEST_F(Cli, ManifestReloadReproducesRun) {
  synth_and_train(" --lambda1 0.2 --ablate noise");
  ASSERT_EQ(run("train --config " + path("run/manifest") + " --out " + path("again")).code, 0);
  EXPECT_EQ(slurp(dir_ / "again" / "metrics.csv"), slurp(dir_ / "run" / "metrics.csv"));
  EXPECT_EQ(slurp(dir_ / "again" / "model.bin"), slurp(dir_ / "run" / "model.bin"));
}

TEST_F(Cli, ConfigPrecedence) {
  ASSERT_EQ(run("synth --k 2 --counts 60 60 --fields 3 --out " + path("d")).code, 0);
  std::ofstream(path("cfg")) << "# comment\nepochs = 1\nseed = 11\nlambda1 = 0.05\n";
  const std::string base = "train --data " + path("d") + " --batch 16 --uniformity-samples 20";
  ASSERT_EQ(run(base + " --config " + path("cfg") + " --out " + path("file")).code, 0);
  ASSERT_EQ(run(base + " --config " + path("cfg") + " --epochs 0 --out " + path("flag")).code, 0);
  ASSERT_EQ(run(base + " --config " + path("cfg") + " --out " + path("env"), "HC2_SEED=99").code, 0);
  ASSERT_EQ(run(base + " --epochs 1 --out " + path("envonly"), "HC2_SEED=99").code, 0);
  const std::string file = slurp(dir_ / "file" / "manifest");
  EXPECT_NE(file.find("epochs = 1\n"), std::string::npos);
  EXPECT_NE(file.find("seed = 11\n"), std::string::npos);
  EXPECT_NE(file.find("lambda1 = 0.05\n"), std::string::npos);
  EXPECT_NE(slurp(dir_ / "flag" / "manifest").find("epochs = 0\n"), std::string::npos);
  // The file outranks the environment; the environment outranks the default.
  EXPECT_NE(slurp(dir_ / "env" / "manifest").find("seed = 11\n"), std::string::npos);
  EXPECT_NE(slurp(dir_ / "envonly" / "manifest").find("seed = 99\n"), std::string::npos);
  std::ofstream(path("broken")) << "epochs 3\n";
  EXPECT_EQ(run(base + " --config " + path("broken") + " --out " + path("x")).code, 2);
}

TEST_F(Cli, HelpListsEveryFlagWithDefault) {
  const auto help = run("train --help");
  EXPECT_EQ(help.code, 0);
  for (const char* flag : {"--config", "--data", "--out", "--seed", "--epochs", "--batch", "--lr", "--tau", "--lambda1",
                           "--lambda2", "--negatives", "--bank", "--clusters", "--refresh", "--diff-steps",
                           "--beta-start", "--beta-end", "--dropout", "--ablate", "--log-form"}) {
    EXPECT_NE(help.out.find(flag), std::string::npos) << flag;
  }
  EXPECT_NE(help.out.find("256"), std::string::npos);
  EXPECT_NE(help.out.find("0.001"), std::string::npos);
  const auto dump = run("dump-reprs --help");
  EXPECT_NE(dump.out.find("--limit"), std::string::npos);
  EXPECT_NE(dump.out.find("2000"), std::string::npos);
  for (const char* cmd : {"synth", "eval", "ablate"}) EXPECT_EQ(run(std::string(cmd) + " --help").code, 0) << cmd;
}

TEST_F(Cli, EvalEqualsFinalTrainingRows) {
  synth_and_train();
  const auto metrics = lines_of(slurp(dir_ / "run" / "metrics.csv"));
  const auto eval = lines_of(run("eval --model " + path("run/model.bin") + " --data " + path("d")).out);
  ASSERT_EQ(eval.size(), 5u);
  EXPECT_EQ(eval[0], kMetricsHeader);
  for (std::size_t i = 1; i < eval.size(); ++i) {
    const auto got = split(eval[i]), want = split(metrics[metrics.size() - 4 + (i - 1)]);
    // epoch, scenario, auc and loss_main come from the same test evaluation.
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(got[c], want[c]) << eval[i];
  }
}

TEST_F(Cli, EvalMarksSingleClassScenarioAsNan) {
  synth_and_train();
  fs::create_directories(dir_ / "one");
  std::ofstream(path("one/test.csv")) << "scenario,label,f0,f1,f2,f3\n0,1,1,2,3,4\n0,1,0,0,0,0\n1,0,1,1,1,1\n1,1,2,2,2,2\n";
  const auto r = run("eval --model " + path("run/model.bin") + " --data " + path("one"));
  EXPECT_EQ(r.code, 0);
  const auto rows = lines_of(r.out);
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(split(rows[1])[2], "nan");
  EXPECT_NE(split(rows[2])[2], "nan");
}

TEST_F(Cli, DumpReprs) {
  synth_and_train();
  const auto r = run("dump-reprs --model " + path("run/model.bin") + " --data " + path("d") + " --limit 10");
  ASSERT_EQ(r.code, 0);
  const auto rows = lines_of(r.out);
  ASSERT_EQ(rows.size(), 11u);
  EXPECT_EQ(rows[0], "scenario,label,z0,z1,z2,z3,z4");
  const LoadedModel m = load_model(path("run/model.bin"));
  const auto test = load_csv(dir_ / "d" / "test.csv").samples;
  const BoundParams b = bind(m.params, false);
  const Matrix z = shared_forward(embed_batch(test, b), b).value();
  // Every dumped row must be the recomputed representation of some test sample.
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto cells = split(rows[i]);
    ASSERT_EQ(cells.size(), 7u);
    bool found = false;
    for (std::size_t s = 0; s < test.size() && !found; ++s) {
      if (std::to_string(test[s].scenario) != cells[0] || std::to_string(test[s].label) != cells[1]) continue;
      bool same = true;
      for (std::size_t j = 0; j < 5; ++j) same = same && std::abs(std::stod(cells[2 + j]) - z(s, j)) <= 1e-12;
      found = same;
    }
    EXPECT_TRUE(found) << rows[i];
  }
  ASSERT_EQ(run("dump-reprs --model " + path("run/model.bin") + " --data " + path("d") + " --out " + path("z.csv")).code, 0);
  EXPECT_EQ(lines_of(slurp(dir_ / "z.csv")).size(), 1u + test.size());
}

TEST_F(Cli, AblatedAndFullRunsShareEpochZero) {
  synth_and_train();
  ASSERT_EQ(run("train --data " + path("d") + " --out " + path("nog") + kTrainFlags + " --ablate g-loss").code, 0);
  const auto full = lines_of(slurp(dir_ / "run" / "metrics.csv"));
  const auto nog = lines_of(slurp(dir_ / "nog" / "metrics.csv"));
  for (std::size_t i = 0; i <= 4; ++i) EXPECT_EQ(full[i], nog[i]);
  EXPECT_NE(full.back(), nog.back());
  EXPECT_NE(slurp(dir_ / "nog" / "manifest").find("ablate = g-loss\n"), std::string::npos);
}

TEST_F(Cli, NoContrastiveBuildMatchesZeroLambdas) {
  ASSERT_EQ(run("synth --out " + path("d") + " --k 3 --fields 4 --vocab 8 --counts 150 150 40 --seed 5").code, 0);
  ASSERT_EQ(run("train --data " + path("d") + " --out " + path("zero") + kTrainFlags + " --lambda1 0 --lambda2 0").code, 0);
  const std::string cmd = std::string(HC2_NOCL_PATH) + " train --data " + path("d") + " --out " + path("nocl") + kTrainFlags +
                          " --lambda1 0 --lambda2 0 2>/dev/null";
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  EXPECT_EQ(slurp(dir_ / "zero" / "metrics.csv"), slurp(dir_ / "nocl" / "metrics.csv"));
  EXPECT_EQ(slurp(dir_ / "zero" / "model.bin"), slurp(dir_ / "nocl" / "model.bin"));
}

TEST_F(Cli, AblateSweepSummary) {
  ASSERT_EQ(run("synth --out " + path("d") + " --k 3 --fields 4 --vocab 8 --counts 150 150 40 --seed 5").code, 0);
  const auto r = run("ablate --data " + path("d") + " --out " + path("sweep") + kTrainFlags +
                     " --seeds 1 2 --variants full baseline no-noise");
  ASSERT_EQ(r.code, 0);
  const auto rows = lines_of(slurp(dir_ / "sweep" / "summary.csv"));
  ASSERT_EQ(rows.size(), 7u);
  EXPECT_EQ(rows[0], "variant,seed,auc0,auc1,auc2,mean_auc,pooled_auc,uniformity");
  EXPECT_EQ(split(rows[1])[0], "full");
  EXPECT_EQ(split(rows[6])[0], "no-noise");
  EXPECT_EQ(r.out, slurp(dir_ / "sweep" / "summary.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "sweep" / "baseline" / "seed2" / "metrics.csv"));
}

}  // namespace
}  // namespace hc2
