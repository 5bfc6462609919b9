// Generates a small three-scenario dataset, trains for two epochs with the
// contrastive objectives on, and prints the metrics table.

#include <iostream>

#include "hc2/hc2.hpp"

int main() {
  hc2::SynthConfig data;
  data.counts = {1500, 1500, 300};
  data.seed = 7;
  const hc2::Dataset ds = hc2::synth_generate(data);

  hc2::TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch = 128;
  cfg.seed = 7;
  const hc2::TrainResult r = hc2::train(ds, cfg);

  hc2::write_metrics(std::cout, r.metrics);
  hc2::write_diagnostics(std::cout, r.diagnostics);
  return 0;
}
