#pragma once

#include <map>
#include <string>

#include "pio/config.hpp"
#include "pio/flops.hpp"

namespace pio {

struct RunResult {
    std::string run_dir;
    std::map<std::string, double> final_metrics;
    nlohmann::json summary;
};

// Trains/evaluates the configured task and writes metrics.csv (byte-identical
// across runs with equal config and seed), summary.json, the resolved config,
// and a final checkpoint into the run directory.
RunResult run_experiment(const ExperimentConfig& config);

// Trains matched classification models that differ only in the decoder
// (attention query vs average+project) across several seeds and reports both
// accuracies and the parameter delta.
RunResult run_compare_decoders(const ExperimentConfig& config);

// The standard reverse-mode vs central-difference battery, from single
// primitives up to a full two-layer model.
nlohmann::json gradcheck_battery();

// Cost-model spec whose parameter total matches the task's checkpoint
// manifest exactly.
PerceiverFlopsSpec flops_spec_for(const ExperimentConfig& config);

}  // namespace pio
