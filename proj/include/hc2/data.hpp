#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "hc2/autodiff.hpp"
#include "hc2/error.hpp"
#include "hc2/model.hpp"
#include "hc2/rng.hpp"

namespace hc2 {

/// Samples of one CSV file with the schema inferred from them.
struct SampleTable {
  Schema schema;
  std::vector<Sample> samples;
};

/// Train and test splits under one schema.
struct Dataset {
  Schema schema;
  std::vector<Sample> train;
  std::vector<Sample> test;

  /// Samples of scenario k from one split, in stored order.
  static std::vector<Sample> of_scenario(std::span<const Sample> split, std::size_t k) {
    std::vector<Sample> out;
    for (const auto& s : split)
      if (s.scenario == k) out.push_back(s);
    return out;
  }
};

namespace detail {

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline long long parse_int(std::string_view token, std::size_t line_no, std::string_view what) {
  long long v = 0;
  const auto* first = token.data();
  const auto* last = token.data() + token.size();
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (token.empty() || ec != std::errc() || ptr != last) {
    throw DataError("line " + std::to_string(line_no) + ": " + std::string(what) + " '" + std::string(token) +
                    "' is not an integer");
  }
  return v;
}

}  // namespace detail

/// Parses the `scenario,label,f0,...,f{F-1}` format from a stream.
/// K and the vocabulary sizes are inferred as the largest observed id + 1.
inline SampleTable parse_csv(std::istream& in, const std::string& source = "<stream>") {
  std::string line;
  if (!std::getline(in, line)) throw DataError(source + ": missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = detail::split_commas(line);
  if (header.size() < 3 || header[0] != "scenario" || header[1] != "label") {
    throw DataError(source + " line 1: header must be scenario,label,f0,...");
  }
  const std::size_t fields = header.size() - 2;
  for (std::size_t f = 0; f < fields; ++f) {
    if (header[f + 2] != "f" + std::to_string(f)) {
      throw DataError(source + " line 1: expected column f" + std::to_string(f) + ", found '" +
                      std::string(header[f + 2]) + "'");
    }
  }
  SampleTable table;
  table.schema.vocab.assign(fields, 0);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = detail::split_commas(line);
    if (cells.size() != fields + 2) {
      throw DataError(source + " line " + std::to_string(line_no) + ": expected " + std::to_string(fields + 2) +
                      " columns, found " + std::to_string(cells.size()));
    }
    Sample s;
    const long long scenario = detail::parse_int(cells[0], line_no, "scenario");
    if (scenario < 0 || scenario > UINT32_MAX) {
      throw DataError(source + " line " + std::to_string(line_no) + ": scenario must be non-negative");
    }
    const long long label = detail::parse_int(cells[1], line_no, "label");
    if (label != 0 && label != 1) {
      throw DataError(source + " line " + std::to_string(line_no) + ": label must be 0 or 1");
    }
    s.scenario = static_cast<std::uint32_t>(scenario);
    s.label = static_cast<std::uint8_t>(label);
    s.features.resize(fields);
    for (std::size_t f = 0; f < fields; ++f) {
      const long long id = detail::parse_int(cells[f + 2], line_no, "feature id");
      if (id < 0 || id > UINT32_MAX) {
        throw DataError(source + " line " + std::to_string(line_no) + ": feature id must be non-negative");
      }
      s.features[f] = static_cast<std::uint32_t>(id);
      table.schema.vocab[f] = std::max<std::size_t>(table.schema.vocab[f], s.features[f] + 1);
    }
    table.schema.scenarios = std::max<std::size_t>(table.schema.scenarios, s.scenario + 1);
    table.samples.push_back(std::move(s));
  }
  if (table.samples.empty()) std::cerr << "warning: " << source << " contains no samples\n";
  return table;
}

inline SampleTable load_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return parse_csv(in, path.string());
}

inline void write_csv(std::ostream& out, std::span<const Sample> samples, std::size_t fields) {
  std::string buf = "scenario,label";
  for (std::size_t f = 0; f < fields; ++f) buf += ",f" + std::to_string(f);
  buf += '\n';
  for (const auto& s : samples) {
    if (s.features.size() != fields) throw DataError("sample width differs from the field count being written");
    buf += std::to_string(s.scenario);
    buf += ',';
    buf += std::to_string(static_cast<int>(s.label));
    for (std::uint32_t id : s.features) {
      buf += ',';
      buf += std::to_string(id);
    }
    buf += '\n';
  }
  out << buf;
}

inline void write_csv(const std::filesystem::path& path, std::span<const Sample> samples, std::size_t fields) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  write_csv(out, samples, fields);
  if (!out) throw IoError("failed writing " + path.string());
}

/// Schema covering both tables; field counts must agree.
inline Schema merge_schemas(const Schema& a, const Schema& b) {
  if (a.fields() != b.fields()) {
    throw DataError("field counts differ between splits: " + std::to_string(a.fields()) + " vs " +
                    std::to_string(b.fields()));
  }
  Schema s{std::max(a.scenarios, b.scenarios), a.vocab};
  for (std::size_t f = 0; f < s.vocab.size(); ++f) s.vocab[f] = std::max(a.vocab[f], b.vocab[f]);
  return s;
}

/// Reads <dir>/train.csv and <dir>/test.csv.
inline Dataset load_dataset(const std::filesystem::path& dir) {
  auto train = load_csv(dir / "train.csv");
  auto test = load_csv(dir / "test.csv");
  return {merge_schemas(train.schema, test.schema), std::move(train.samples), std::move(test.samples)};
}

inline void write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_csv(dir / "train.csv", ds.train, ds.schema.fields());
  write_csv(dir / "test.csv", ds.test, ds.schema.fields());
}

/// FNV-1a over the bytes of a file, as 16 hex digits.
inline std::string file_checksum(const std::filesystem::path& path, std::uint64_t h = 0xcbf29ce484222325ULL) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  h = detail::fnv1a(ss.str(), h);
  char out[17];
  std::snprintf(out, sizeof out, "%016llx", static_cast<unsigned long long>(h));
  return out;
}

inline std::string dataset_checksum(const std::filesystem::path& dir) {
  const std::string train = file_checksum(dir / "train.csv");
  return file_checksum(dir / "test.csv", std::stoull(train, nullptr, 16));
}

// ---------------------------------------------------------------------------
// Synthetic multi-scenario data
// ---------------------------------------------------------------------------

/// Generator settings. Labels follow
///   y ~ Bernoulli(sigmoid(a_shared * w_shared . phi(x) + a_spec * w_k . phi(x)))
/// over one-hot field indicators phi(x), then flip with probability `noise`.
struct SynthConfig {
  std::size_t scenarios = 3;
  std::size_t fields = 8;
  std::size_t vocab = 20;
  double shared_strength = 3.0;
  double specific_strength = 2.0;
  std::vector<std::size_t> counts;  // per scenario; empty means 5000 each
  double noise = 0.0;
  std::uint64_t seed = 42;

  std::vector<std::size_t> resolved_counts() const {
    return counts.empty() ? std::vector<std::size_t>(scenarios, 5000) : counts;
  }

  void validate() const {
    if (scenarios < 1) throw ConfigError("synthetic data needs at least one scenario");
    if (fields < 1) throw ConfigError("synthetic data needs at least one field");
    if (vocab < 1) throw ConfigError("synthetic vocabulary must be non-empty");
    if (!(shared_strength >= 0.0) || !(specific_strength >= 0.0)) throw ConfigError("signal strengths must be >= 0");
    if (!(noise >= 0.0 && noise < 0.5)) throw ConfigError("label noise must lie in [0, 0.5)");
    if (!counts.empty() && counts.size() != scenarios) {
      throw ConfigError("expected " + std::to_string(scenarios) + " per-scenario counts, got " +
                        std::to_string(counts.size()));
    }
  }
};

/// Hidden logistic weights, indexed [field][id]. Entries are N(0, 1/F) so the
/// summed score over a sample has roughly unit variance.
struct SynthWeights {
  std::vector<std::vector<double>> shared;
  std::vector<std::vector<std::vector<double>>> specific;  // [scenario][field][id]

  double score(const std::vector<std::vector<double>>& w, const Sample& s) const {
    double acc = 0.0;
    for (std::size_t f = 0; f < s.features.size(); ++f) acc += w[f][s.features[f]];
    return acc;
  }
};

inline SynthWeights draw_synth_weights(const SynthConfig& cfg) {
  cfg.validate();
  const RngStream root(cfg.seed, "synth");
  const double sd = 1.0 / std::sqrt(static_cast<double>(cfg.fields));
  auto draw = [&](RngStream rng) {
    std::vector<std::vector<double>> w(cfg.fields, std::vector<double>(cfg.vocab));
    for (auto& field : w)
      for (double& v : field) v = sd * rng.normal();
    return w;
  };
  SynthWeights w;
  w.shared = draw(root.substream("weights/shared"));
  for (std::size_t k = 0; k < cfg.scenarios; ++k) w.specific.push_back(draw(root.substream("weights/" + std::to_string(k))));
  return w;
}

/// Probability of a positive label before noise.
inline double synth_probability(const SynthConfig& cfg, const SynthWeights& w, const Sample& s) {
  return stable_sigmoid(cfg.shared_strength * w.score(w.shared, s) +
                        cfg.specific_strength * w.score(w.specific[s.scenario], s));
}

/// Deterministic synthetic dataset; each scenario's first 80% goes to train.
/// Scenario k draws from its own feature and label streams, so its samples do
/// not depend on any other scenario's weights or counts.
inline Dataset synth_generate(const SynthConfig& cfg, const SynthWeights& w) {
  cfg.validate();
  const RngStream root(cfg.seed, "synth");
  Dataset ds;
  ds.schema.scenarios = cfg.scenarios;
  ds.schema.vocab.assign(cfg.fields, cfg.vocab);
  const auto counts = cfg.resolved_counts();
  for (std::size_t k = 0; k < cfg.scenarios; ++k) {
    RngStream feat = root.substream("features/" + std::to_string(k));
    RngStream lab = root.substream("labels/" + std::to_string(k));
    const std::size_t n_train = counts[k] * 8 / 10;
    for (std::size_t i = 0; i < counts[k]; ++i) {
      Sample s;
      s.scenario = static_cast<std::uint32_t>(k);
      s.features.resize(cfg.fields);
      for (auto& id : s.features) id = static_cast<std::uint32_t>(feat.uniform_index(cfg.vocab));
      const double p = synth_probability(cfg, w, s);
      const bool positive = lab.uniform() < p;
      const bool flip = lab.uniform() < cfg.noise;
      s.label = static_cast<std::uint8_t>(positive != flip ? 1 : 0);
      (i < n_train ? ds.train : ds.test).push_back(std::move(s));
    }
  }
  return ds;
}

inline Dataset synth_generate(const SynthConfig& cfg) { return synth_generate(cfg, draw_synth_weights(cfg)); }

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// One epoch of mixed-scenario batches as index lists into `count` training
/// samples: a full shuffle chunked into `batch_size` pieces, the last chunk
/// possibly shorter.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t count, std::size_t batch_size, RngStream& rng) {
  if (batch_size < 2) throw ConfigError("batch size must be at least 2");
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < count; start += batch_size) {
    const std::size_t end = std::min(count, start + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

}  // namespace hc2
