#pragma once

// Multi-run experiment drivers. Each reads prerequisite artifacts from the
// workspace, writes one directory with every sub-run's report, a combined
// table and CSV series, and returns the combined summary as JSON.

#include <string>
#include <vector>

#include "json.hpp"
#include "softpipe/config.hpp"

namespace softpipe {

const std::vector<std::string>& experiment_names();

nlohmann::json run_experiment(const std::string& name, const ExperimentConfig& config);

nlohmann::json shot_curve(const ExperimentConfig& config);
nlohmann::json alpha_sweep(const ExperimentConfig& config);
nlohmann::json freeze_ablation(const ExperimentConfig& config);
nlohmann::json soft_vs_hard(const ExperimentConfig& config);
nlohmann::json cross_domain(const ExperimentConfig& config);
nlohmann::json forgetting_demo(const ExperimentConfig& config);

// Loads the augmented dataset for `style` or names the commands that build it.
Dataset require_augmented(const Workspace& ws, StyleVariant style);
SumTraPipeline<float> require_pipeline(const ExperimentConfig& config, const Workspace& ws, StyleVariant sum_style);

// Runs `count` independent jobs on at most `jobs` threads; rethrows the first
// failure after all workers finish.
void run_parallel(std::size_t count, int jobs, const std::function<void(std::size_t)>& job);

}  // namespace softpipe
