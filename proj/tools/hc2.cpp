// hc2 command-line driver: synth, train, eval, ablate, dump-reprs.
//
// Exit codes: 0 success, 2 usage/validation/I-O, 3 data/numeric/shape failure.
// Option precedence: command-line flag > --config file > HC2_SEED (seed only) > built-in default.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hc2/hc2.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

// Shortest text that parses back to the same double.
std::string fmt_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <typename T>
std::string join(const std::vector<T>& xs, const char* sep = " ") {
  std::ostringstream os;
  for (std::size_t i = 0; i < xs.size(); ++i) os << (i ? sep : "") << xs[i];
  return os.str();
}

/// Reads `key = value` lines; '#' starts a comment. Values may hold several
/// whitespace- or comma-separated items for list options.
std::vector<std::pair<std::string, std::string>> read_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw hc2::IoError("cannot open config file " + path.string());
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty() || line.front() == '[') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw hc2::ConfigError(path.string() + ":" + std::to_string(line_no) + ": expected key = value");
    }
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

bool given_on_command_line(const std::vector<std::string>& args, const std::string& flag) {
  return std::any_of(args.begin(), args.end(),
                     [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
}

/// Splices config-file values into the argument list right after the
/// subcommand name, skipping keys the user already passed as flags and keys
/// the subcommand does not know (manifests carry informational extras).
std::vector<std::string> apply_config(std::vector<std::string> args, CLI::App& app) {
  if (args.size() < 2) return args;
  CLI::App* sub = app.get_subcommand_no_throw(args[1]);
  if (sub == nullptr) return args;
  std::string config;
  for (std::size_t i = 2; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) config = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) config = args[i].substr(9);
  }
  if (config.empty()) return args;
  std::vector<std::string> injected;
  for (const auto& [key, value] : read_config(config)) {
    const std::string flag = "--" + key;
    if (key == "config" || given_on_command_line(args, flag)) continue;
    if (sub->get_option_no_throw(flag) == nullptr) continue;
    std::string items = value;
    std::replace(items.begin(), items.end(), ',', ' ');
    std::istringstream is(items);
    std::vector<std::string> parts{std::istream_iterator<std::string>(is), std::istream_iterator<std::string>()};
    if (parts.empty()) continue;
    injected.push_back(flag);
    injected.insert(injected.end(), parts.begin(), parts.end());
  }
  args.insert(args.begin() + 2, injected.begin(), injected.end());
  return args;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw hc2::IoError("cannot create output directory " + dir.string());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw hc2::IoError("cannot write " + path.string());
  out << text;
  if (!out) throw hc2::IoError("failed writing " + path.string());
}

using Manifest = std::vector<std::pair<std::string, std::string>>;

std::string render_manifest(const Manifest& m) {
  std::string s;
  for (const auto& [k, v] : m) s += k + " = " + v + "\n";
  return s;
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  hc2::SynthConfig cfg;
  std::string out;
};

void add_synth(CLI::App& app, SynthArgs& a) {
  auto* sub = app.add_subcommand("synth", "Generate a synthetic multi-scenario dataset");
  sub->add_option("--config", "Flat key = value file; command-line flags override it");
  sub->add_option("--out", a.out, "Output directory")->required();
  sub->add_option("--seed", a.cfg.seed, "Generator seed")->envname("HC2_SEED");
  sub->add_option("--k", a.cfg.scenarios, "Number of scenarios");
  sub->add_option("--fields", a.cfg.fields, "Categorical fields per sample");
  sub->add_option("--vocab", a.cfg.vocab, "Vocabulary size of every field");
  sub->add_option("--counts", a.cfg.counts, "Per-scenario sample counts (default 5000 each)");
  sub->add_option("--shared-strength", a.cfg.shared_strength, "Shared signal strength");
  sub->add_option("--spec-strength", a.cfg.specific_strength, "Scenario-specific signal strength");
  sub->add_option("--noise", a.cfg.noise, "Label flip rate in [0, 0.5)");
}

int run_synth(const SynthArgs& a) {
  const hc2::Dataset ds = hc2::synth_generate(a.cfg);
  const fs::path dir = a.out;
  hc2::write_dataset(dir, ds);
  const auto counts = a.cfg.resolved_counts();
  const Manifest m{{"k", std::to_string(a.cfg.scenarios)},
                   {"fields", std::to_string(a.cfg.fields)},
                   {"vocab", std::to_string(a.cfg.vocab)},
                   {"counts", join(counts)},
                   {"shared-strength", fmt_double(a.cfg.shared_strength)},
                   {"spec-strength", fmt_double(a.cfg.specific_strength)},
                   {"noise", fmt_double(a.cfg.noise)},
                   {"seed", std::to_string(a.cfg.seed)},
                   {"train_file", (dir / "train.csv").string()},
                   {"test_file", (dir / "test.csv").string()},
                   {"data_checksum", hc2::dataset_checksum(dir)}};
  write_text(dir / "manifest", render_manifest(m));
  return 0;
}

// ---------------------------------------------------------------------------
// Shared training flags

struct TrainArgs {
  hc2::TrainConfig cfg;
  std::string data;
  std::string out;
  std::vector<std::string> ablate;
  std::size_t diffused = 0;
  CLI::Option* diffused_opt = nullptr;
};

void add_training_flags(CLI::App* sub, TrainArgs& a) {
  auto& c = a.cfg;
  sub->add_option("--seed", c.seed, "Seed of every random stream")->envname("HC2_SEED");
  sub->add_option("--epochs", c.epochs, "Training epochs");
  sub->add_option("--batch", c.batch, "Mini-batch size (>= 2)");
  sub->add_option("--lr", c.lr, "Adam learning rate");
  sub->add_option("--tau", c.tau, "Contrastive temperature");
  sub->add_option("--lambda1", c.lambda1, "Weight of the generalized contrastive loss");
  sub->add_option("--lambda2", c.lambda2, "Weight of the individual contrastive loss");
  sub->add_option("--negatives", c.negatives, "Negatives per anchor (N)");
  sub->add_option("--bank", c.bank, "Memory bank capacity");
  sub->add_option("--clusters", c.clusters, "k-means clusters for fine-grained selection");
  sub->add_option("--refresh", c.refresh, "Steps between cluster refreshes");
  sub->add_option("--kmeans-iters", c.kmeans_iters, "Lloyd iterations per refresh");
  sub->add_option("--diff-steps", c.diff_steps, "Diffusion steps T");
  sub->add_option("--beta-start", c.beta_start, "First diffusion beta");
  sub->add_option("--beta-end", c.beta_end, "Last diffusion beta");
  a.diffused_opt = sub->add_option("--diffused", a.diffused, "Diffused negatives per anchor")
                       ->default_str("ceil(negatives/2)");
  sub->add_option("--dropout", c.dropout, "Dropout rate of the augmented positive pass");
  sub->add_option("--weight-clamp", c.weight_clamp, "Lower clamp of the embedding dot in pair weights");
  sub->add_option("--ablate", a.ablate, "Components to switch off")
      ->check(CLI::IsMember({"g-loss", "noise", "weight", "s-loss", "fine"}))
      ->default_str("none");
  sub->add_option("--log-form", c.log_form, "Log-ratio InfoNCE (false: negated ratio)");
  sub->add_option("--embed-dim", c.arch.embed_dim, "Embedding width per field");
  sub->add_option("--shared-widths", c.arch.shared_widths, "Hidden widths of the shared network");
  sub->add_option("--tower-widths", c.arch.tower_widths, "Hidden widths of each scenario tower");
  sub->add_option("--uniformity-samples", c.uniformity_samples, "Test samples used for the uniformity metric");
}

hc2::TrainConfig resolve(const TrainArgs& a) {
  hc2::TrainConfig c = a.cfg;
  if (a.diffused_opt != nullptr && a.diffused_opt->count() > 0) c.diffused = a.diffused;
  for (const auto& name : a.ablate) {
    if (name == "g-loss") c.flags.g_loss = false;
    if (name == "noise") c.flags.noise = false;
    if (name == "weight") c.flags.weight = false;
    if (name == "s-loss") c.flags.s_loss = false;
    if (name == "fine") c.flags.fine = false;
  }
  c.validate();
  return c;
}

std::vector<std::string> ablated_names(const hc2::AblationFlags& f) {
  std::vector<std::string> out;
  if (!f.g_loss) out.emplace_back("g-loss");
  if (!f.noise) out.emplace_back("noise");
  if (!f.weight) out.emplace_back("weight");
  if (!f.s_loss) out.emplace_back("s-loss");
  if (!f.fine) out.emplace_back("fine");
  return out;
}

/// Every training flag with its resolved value; reloadable through --config.
Manifest config_manifest(const hc2::TrainConfig& c) {
  return {{"seed", std::to_string(c.seed)},
          {"epochs", std::to_string(c.epochs)},
          {"batch", std::to_string(c.batch)},
          {"lr", fmt_double(c.lr)},
          {"tau", fmt_double(c.tau)},
          {"lambda1", fmt_double(c.lambda1)},
          {"lambda2", fmt_double(c.lambda2)},
          {"negatives", std::to_string(c.negatives)},
          {"bank", std::to_string(c.bank)},
          {"clusters", std::to_string(c.clusters)},
          {"refresh", std::to_string(c.refresh)},
          {"kmeans-iters", std::to_string(c.kmeans_iters)},
          {"diff-steps", std::to_string(c.diff_steps)},
          {"beta-start", fmt_double(c.beta_start)},
          {"beta-end", fmt_double(c.beta_end)},
          {"diffused", std::to_string(c.diffused_count())},
          {"dropout", fmt_double(c.dropout)},
          {"weight-clamp", fmt_double(c.weight_clamp)},
          {"ablate", join(ablated_names(c.flags))},
          {"log-form", c.log_form ? "true" : "false"},
          {"embed-dim", std::to_string(c.arch.embed_dim)},
          {"shared-widths", join(c.arch.shared_widths)},
          {"tower-widths", join(c.arch.tower_widths)},
          {"uniformity-samples", std::to_string(c.uniformity_samples)}};
}

std::string metrics_text(std::span<const hc2::MetricsRow> rows) {
  std::ostringstream os;
  hc2::write_metrics(os, rows);
  return os.str();
}

/// Trains on `data` and writes metrics.csv, diagnostics.csv, model.bin and
/// manifest into `out`.
hc2::TrainResult train_to(const fs::path& data, const fs::path& out, const hc2::TrainConfig& cfg) {
  const hc2::Dataset ds = hc2::load_dataset(data);
  ensure_dir(out);
  hc2::TrainResult r = hc2::train(ds, cfg);
  write_text(out / "metrics.csv", metrics_text(r.metrics));
  std::ostringstream diag;
  hc2::write_diagnostics(diag, r.diagnostics);
  write_text(out / "diagnostics.csv", diag.str());
  hc2::save_model(out / "model.bin", r.params, cfg.epochs);
  Manifest m = config_manifest(cfg);
  m.emplace_back("data", data.string());
  m.emplace_back("out", out.string());
  m.emplace_back("data_checksum", hc2::dataset_checksum(data));
  m.emplace_back("metrics_file", (out / "metrics.csv").string());
  m.emplace_back("diagnostics_file", (out / "diagnostics.csv").string());
  m.emplace_back("model_file", (out / "model.bin").string());
  write_text(out / "manifest", render_manifest(m));
  return r;
}

// ---------------------------------------------------------------------------
// train

void add_train(CLI::App& app, TrainArgs& a) {
  auto* sub = app.add_subcommand("train", "Train a SharedBottom model with the contrastive objectives");
  sub->add_option("--config", "Flat key = value file (a train manifest reloads as-is); command-line flags override it");
  sub->add_option("--data", a.data, "Dataset directory holding train.csv and test.csv")->required();
  sub->add_option("--out", a.out, "Output directory")->required();
  add_training_flags(sub, a);
}

int run_train(const TrainArgs& a) {
  train_to(a.data, a.out, resolve(a));
  return 0;
}

// ---------------------------------------------------------------------------
// eval and dump-reprs

struct ModelArgs {
  std::string model;
  std::string data;
  std::string split = "test";
  std::string out;
  std::size_t limit = 2000;
  std::uint64_t seed = 42;
  std::size_t uniformity_samples = 500;
};

std::vector<hc2::Sample> load_split(const ModelArgs& a, const hc2::Schema& model_schema) {
  const fs::path file = fs::path(a.data) / (a.split + ".csv");
  hc2::SampleTable t = hc2::load_csv(file);
  if (!t.samples.empty() && t.schema.fields() != model_schema.fields()) {
    throw hc2::DataError(file.string() + " has " + std::to_string(t.schema.fields()) + " feature fields, model expects " +
                         std::to_string(model_schema.fields()));
  }
  for (const auto& s : t.samples) hc2::validate(s, model_schema);
  return std::move(t.samples);
}

void add_eval(CLI::App& app, ModelArgs& a) {
  auto* sub = app.add_subcommand("eval", "Print per-scenario AUC rows of a trained model");
  sub->add_option("--config", "Flat key = value file; command-line flags override it");
  sub->add_option("--model", a.model, "Model file written by train")->required();
  sub->add_option("--data", a.data, "Dataset directory")->required();
  sub->add_option("--split", a.split, "Which split to score")->check(CLI::IsMember({"train", "test"}));
  sub->add_option("--uniformity-samples", a.uniformity_samples, "Samples used for the uniformity metric");
}

int run_eval(const ModelArgs& a) {
  const hc2::LoadedModel m = hc2::load_model(a.model);
  const auto samples = load_split(a, m.params.schema);
  const hc2::Evaluation ev = hc2::evaluate(m.params, samples, a.uniformity_samples);
  const auto rows = hc2::metrics_rows(static_cast<long>(m.epochs_trained), ev, hc2::EpochStats(m.params.schema.scenarios));
  std::cout << metrics_text(rows);
  return 0;
}

void add_dump(CLI::App& app, ModelArgs& a) {
  auto* sub = app.add_subcommand("dump-reprs", "Write shared representations of a sampled subset as CSV");
  sub->add_option("--config", "Flat key = value file; command-line flags override it");
  sub->add_option("--model", a.model, "Model file written by train")->required();
  sub->add_option("--data", a.data, "Dataset directory")->required();
  sub->add_option("--split", a.split, "Which split to dump")->check(CLI::IsMember({"train", "test"}));
  sub->add_option("--limit", a.limit, "Maximum number of rows");
  sub->add_option("--seed", a.seed, "Seed of the subset draw")->envname("HC2_SEED");
  sub->add_option("--out", a.out, "Output CSV file (default: standard output)");
}

int run_dump(const ModelArgs& a) {
  const hc2::LoadedModel m = hc2::load_model(a.model);
  const auto samples = load_split(a, m.params.schema);
  std::vector<std::size_t> pick;
  if (a.limit >= samples.size()) {
    for (std::size_t i = 0; i < samples.size(); ++i) pick.push_back(i);
  } else {
    hc2::RngStream rng(a.seed, "dump-reprs");
    pick = rng.sample_without_replacement(samples.size(), a.limit);
    std::sort(pick.begin(), pick.end());
  }
  std::vector<hc2::Sample> subset;
  for (std::size_t i : pick) subset.push_back(samples[i]);
  std::ostringstream os;
  const std::size_t width = m.params.shared_width();
  os << "scenario,label";
  for (std::size_t j = 0; j < width; ++j) os << ",z" << j;
  os << '\n';
  if (!subset.empty()) {
    const hc2::BoundParams frozen = hc2::bind(m.params, false);
    const hc2::Matrix z = hc2::shared_forward(hc2::embed_batch(subset, frozen), frozen).value();
    char buf[40];
    for (std::size_t i = 0; i < subset.size(); ++i) {
      os << subset[i].scenario << ',' << int(subset[i].label);
      for (std::size_t j = 0; j < width; ++j) {
        std::snprintf(buf, sizeof buf, ",%.17g", z(i, j));
        os << buf;
      }
      os << '\n';
    }
  }
  if (a.out.empty()) {
    std::cout << os.str();
  } else {
    write_text(a.out, os.str());
  }
  return 0;
}

// ---------------------------------------------------------------------------
// ablate

struct AblateArgs {
  TrainArgs train;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<std::string> variants{"full", "baseline", "no-g-loss", "no-noise", "no-weight", "no-s-loss"};
};

void add_ablate(CLI::App& app, AblateArgs& a) {
  auto* sub = app.add_subcommand("ablate", "Sweep ablation variants over seeds and summarise final AUCs");
  sub->add_option("--config", "Flat key = value file; command-line flags override it");
  sub->add_option("--data", a.train.data, "Dataset directory holding train.csv and test.csv")->required();
  sub->add_option("--out", a.train.out, "Output directory (one sub-directory per variant and seed)")->required();
  sub->add_option("--seeds", a.seeds, "Training seeds");
  sub->add_option("--variants", a.variants, "Variants to run")
      ->check(CLI::IsMember({"full", "baseline", "no-g-loss", "no-noise", "no-weight", "no-s-loss"}));
  add_training_flags(sub, a.train);
}

int run_ablate(const AblateArgs& a) {
  const hc2::TrainConfig base = resolve(a.train);
  const fs::path out = a.train.out;
  ensure_dir(out);
  std::ostringstream summary;
  std::size_t scenarios = 0;
  std::vector<std::string> lines;
  for (const auto& variant : a.variants) {
    for (std::uint64_t seed : a.seeds) {
      hc2::TrainConfig c = base;
      c.seed = seed;
      if (variant == "baseline") c.lambda1 = c.lambda2 = 0.0;
      if (variant == "no-g-loss") c.flags.g_loss = false;
      if (variant == "no-noise") c.flags.noise = false;
      if (variant == "no-weight") c.flags.weight = false;
      if (variant == "no-s-loss") c.flags.s_loss = false;
      const auto r = train_to(a.train.data, out / variant / ("seed" + std::to_string(seed)), c);
      std::vector<double> aucs;
      std::string pooled = "nan";
      std::ostringstream line;
      line << variant << ',' << seed;
      double sum = 0.0;
      std::size_t n = 0;
      char buf[32];
      for (const auto& row : r.metrics) {
        if (row.epoch != static_cast<long>(c.epochs)) continue;
        if (row.scenario < 0) {
          if (row.auc) {
            std::snprintf(buf, sizeof buf, "%.6f", *row.auc);
            pooled = buf;
          }
          continue;
        }
        if (row.auc) {
          sum += *row.auc;
          ++n;
          std::snprintf(buf, sizeof buf, ",%.6f", *row.auc);
          line << buf;
        } else {
          line << ",nan";
        }
        scenarios = std::max(scenarios, static_cast<std::size_t>(row.scenario) + 1);
      }
      if (n > 0) {
        std::snprintf(buf, sizeof buf, ",%.6f", sum / static_cast<double>(n));
        line << buf;
      } else {
        line << ",nan";
      }
      std::snprintf(buf, sizeof buf, ",%.6f", r.diagnostics.back().uniformity);
      line << ',' << pooled << buf;
      lines.push_back(line.str());
    }
  }
  summary << "variant,seed";
  for (std::size_t k = 0; k < scenarios; ++k) summary << ",auc" << k;
  summary << ",mean_auc,pooled_auc,uniformity\n";
  for (const auto& l : lines) summary << l << '\n';
  write_text(out / "summary.csv", summary.str());
  std::cout << summary.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HC2 multi-scenario ranking with contrastive learning", "hc2"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  SynthArgs synth;
  TrainArgs train;
  ModelArgs eval, dump;
  AblateArgs ablate;
  add_synth(app, synth);
  add_train(app, train);
  add_eval(app, eval);
  add_dump(app, dump);
  add_ablate(app, ablate);

  try {
    std::vector<std::string> args(argv, argv + argc);
    args = apply_config(std::move(args), app);
    std::vector<std::string> reversed(args.rbegin(), args.rend() - 1);
    app.parse(std::move(reversed));
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  } catch (const hc2::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (app.got_subcommand("synth")) return run_synth(synth);
    if (app.got_subcommand("train")) return run_train(train);
    if (app.got_subcommand("eval")) return run_eval(eval);
    if (app.got_subcommand("dump-reprs")) return run_dump(dump);
    if (app.got_subcommand("ablate")) return run_ablate(ablate);
  } catch (const hc2::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const hc2::IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const hc2::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
