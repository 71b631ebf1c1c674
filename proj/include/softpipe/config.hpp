#pragma once

// Experiment configuration: one JSON document with task, model, train,
// finetune, experiment and paths sections. Unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "softpipe/model.hpp"
#include "softpipe/tasks.hpp"
#include "softpipe/train.hpp"

namespace softpipe {

struct PathsConfig {
  std::filesystem::path workdir = "softpipe-work";
  std::string dataset_dir = "datasets";
  std::string ckpt_dir = "ckpts";
  std::string report_dir = "reports";
  std::string experiment_dir = "experiments";
  bool operator==(const PathsConfig&) const = default;
};

struct ExperimentSettings {
  std::vector<std::size_t> shots{0, 8, 32, 128};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<double> alphas{0.0, 0.5, 0.9, 0.95, 0.99, 1.0};
  std::size_t sweep_shots = 32;     // k used by alpha-sweep, freeze-ablation
  std::size_t eval_records = 0;     // 0 evaluates the whole test split
  int jobs = 1;
  bool operator==(const ExperimentSettings&) const = default;
};

struct ExperimentConfig {
  ToyTaskSpec task;
  ModelConfig model;
  TrainConfig train = TrainConfig::pretraining();
  TrainConfig finetune = TrainConfig::finetuning();
  ExperimentSettings experiment;
  PathsConfig paths;

  // Derives dependent fields (vocab size) and checks every section.
  void resolve();
  std::size_t summary_max_len() const { return task.max_summary_tokens() + 4; }
  bool operator==(const ExperimentConfig&) const = default;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

// Applies "section.key=value" overrides; values parse as JSON when possible
// and as plain strings otherwise.
void apply_override(nlohmann::json& config, const std::string& assignment);

// Defaults, then the file (if any), then overrides, then SOFTPIPE_SEED.
ExperimentConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides);

// Fixed artifact locations under the work directory.
class Workspace {
 public:
  explicit Workspace(const ExperimentConfig& config);

  std::filesystem::path dataset(StyleVariant style) const;
  std::filesystem::path augmented_dataset(StyleVariant style) const;
  std::filesystem::path summarizer(StyleVariant style) const;
  std::filesystem::path translator(Direction d) const;
  std::filesystem::path direct(DirectRegime r) const;
  std::filesystem::path report(const std::string& stem) const;
  std::filesystem::path experiment(const std::string& name) const;
  std::filesystem::path root() const { return root_; }

  // Throws a ContractError naming `command` when `path` is missing.
  static void require(const std::filesystem::path& path, const std::string& command);

 private:
  std::filesystem::path root_;
  PathsConfig paths_;
};

}  // namespace softpipe
