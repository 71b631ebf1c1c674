#include "softpipe/config.hpp"

#include <cstdlib>
#include <fstream>

namespace softpipe {

namespace {

void paths_to_json(nlohmann::json& j, const PathsConfig& p) {
  j = nlohmann::json{{"workdir", p.workdir.string()},
                     {"dataset_dir", p.dataset_dir},
                     {"ckpt_dir", p.ckpt_dir},
                     {"report_dir", p.report_dir},
                     {"experiment_dir", p.experiment_dir}};
}

void paths_from_json(const nlohmann::json& j, PathsConfig& p) {
  for (const auto& [key, value] : j.items()) {
    if (key == "workdir") p.workdir = value.get<std::string>();
    else if (key == "dataset_dir") p.dataset_dir = value.get<std::string>();
    else if (key == "ckpt_dir") p.ckpt_dir = value.get<std::string>();
    else if (key == "report_dir") p.report_dir = value.get<std::string>();
    else if (key == "experiment_dir") p.experiment_dir = value.get<std::string>();
    else throw FormatError("paths: unknown key '" + key + "'");
  }
}

void experiment_to_json(nlohmann::json& j, const ExperimentSettings& e) {
  j = nlohmann::json{{"shots", e.shots},
                     {"seeds", e.seeds},
                     {"alphas", e.alphas},
                     {"sweep_shots", e.sweep_shots},
                     {"eval_records", e.eval_records},
                     {"jobs", e.jobs}};
}

void experiment_from_json(const nlohmann::json& j, ExperimentSettings& e) {
  for (const auto& [key, value] : j.items()) {
    if (key == "shots") e.shots = value.get<std::vector<std::size_t>>();
    else if (key == "seeds") e.seeds = value.get<std::vector<std::uint64_t>>();
    else if (key == "alphas") e.alphas = value.get<std::vector<double>>();
    else if (key == "sweep_shots") e.sweep_shots = value.get<std::size_t>();
    else if (key == "eval_records") e.eval_records = value.get<std::size_t>();
    else if (key == "jobs") e.jobs = value.get<int>();
    else throw FormatError("experiment: unknown key '" + key + "'");
  }
}

}  // namespace

void ExperimentConfig::resolve() {
  model.vocab_size = task.vocab().size();
  task.validate(static_cast<std::size_t>(model.max_src_len));
  model.validate();
  if (static_cast<std::size_t>(model.max_tgt_len) < summary_max_len()) {
    throw ContractError("model.max_tgt_len must be at least the summary cap " + std::to_string(summary_max_len()));
  }
  train.validate();
  finetune.validate();
  if (experiment.jobs < 1) throw ContractError("experiment.jobs must be >= 1");
  if (experiment.seeds.empty()) throw ContractError("experiment.seeds must not be empty");
  for (double a : experiment.alphas) {
    if (!(a >= 0.0 && a <= 1.0)) throw ContractError("experiment.alphas entries must lie in [0, 1]");
  }
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  nlohmann::json paths, experiment;
  paths_to_json(paths, c.paths);
  experiment_to_json(experiment, c.experiment);
  j = nlohmann::json{{"task", c.task},         {"model", c.model},           {"train", c.train},
                     {"finetune", c.finetune}, {"experiment", experiment}, {"paths", paths}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  if (!j.is_object()) throw FormatError("config: expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key == "task") from_json(value, c.task);
    else if (key == "model") from_json(value, c.model);
    else if (key == "train") from_json(value, c.train);
    else if (key == "finetune") from_json(value, c.finetune);
    else if (key == "experiment") experiment_from_json(value, c.experiment);
    else if (key == "paths") paths_from_json(value, c.paths);
    else throw FormatError("config: unknown section '" + key + "'");
  }
}

void apply_override(nlohmann::json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ContractError("override '" + assignment + "' must look like section.key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  nlohmann::json* node = &config;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ContractError("override '" + assignment + "' has an empty key segment");
    if (dot == std::string::npos) {
      if (!node->contains(part)) throw FormatError("override: unknown key '" + key + "'");
      (*node)[part] = value;
      return;
    }
    if (!node->contains(part) || !(*node)[part].is_object()) {
      throw FormatError("override: unknown section '" + key.substr(0, dot) + "'");
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

ExperimentConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
  ExperimentConfig config;
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw ContractError("config: cannot open '" + file.string() + "'");
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw FormatError("config: '" + file.string() + "' is not valid JSON");
    from_json(j, config);
  }
  nlohmann::json merged = config;
  for (const auto& o : overrides) apply_override(merged, o);
  config = ExperimentConfig{};
  from_json(merged, config);
  if (const char* env = std::getenv("SOFTPIPE_SEED"); env && *env) {
    char* end = nullptr;
    const unsigned long long seed = std::strtoull(env, &end, 10);
    if (*end != '\0') throw ContractError("SOFTPIPE_SEED must be an unsigned integer");
    config.task.seed = seed;
    config.train.seed = seed;
    config.finetune.seed = seed;
  }
  config.resolve();
  return config;
}

// ---- workspace ----------------------------------------------------------------

Workspace::Workspace(const ExperimentConfig& config) : root_(config.paths.workdir), paths_(config.paths) {}

std::filesystem::path Workspace::dataset(StyleVariant style) const {
  return root_ / paths_.dataset_dir / (std::string("data-") + to_string(style) + ".jsonl");
}

std::filesystem::path Workspace::augmented_dataset(StyleVariant style) const {
  return root_ / paths_.dataset_dir / (std::string("data-") + to_string(style) + ".bt.jsonl");
}

std::filesystem::path Workspace::summarizer(StyleVariant style) const {
  return root_ / paths_.ckpt_dir / (std::string("sum-") + to_string(style) + ".ckpt");
}

std::filesystem::path Workspace::translator(Direction d) const {
  return root_ / paths_.ckpt_dir / (std::string("tra-") + to_string(d) + ".ckpt");
}

std::filesystem::path Workspace::direct(DirectRegime r) const {
  return root_ / paths_.ckpt_dir / (std::string("direct-") + to_string(r) + ".ckpt");
}

std::filesystem::path Workspace::report(const std::string& stem) const {
  return root_ / paths_.report_dir / (stem + ".json");
}

std::filesystem::path Workspace::experiment(const std::string& name) const {
  return root_ / paths_.experiment_dir / name;
}

void Workspace::require(const std::filesystem::path& path, const std::string& command) {
  if (!std::filesystem::exists(path)) {
    throw ContractError("missing prerequisite '" + path.string() + "'; run `" + command + "` first");
  }
}

}  // namespace softpipe
