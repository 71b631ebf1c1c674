#pragma once

// Training harness: pretraining of the summarizer and translators, offline
// back-translation, few-shot pipeline fine-tuning and the direct baseline.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "softpipe/eval.hpp"
#include "softpipe/model.hpp"
#include "softpipe/optim.hpp"
#include "softpipe/pipeline.hpp"
#include "softpipe/tasks.hpp"

namespace softpipe {

inline constexpr const char* kArtifactVersion = "softpipe 0.1.0";

enum class FreezeStrategy { All, SumOnly, TraOnly };
const char* to_string(FreezeStrategy f);
FreezeStrategy freeze_strategy_from_string(const std::string& s);

struct TrainConfig {
  double learning_rate = 3e-4;
  int max_epochs = 10;
  int early_stopping_patience = 2;
  int batch_size = 1;
  int grad_accumulation = 8;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int warmup_steps = 500;
  std::uint64_t seed = 1;
  FreezeStrategy freeze_strategy = FreezeStrategy::All;
  double alpha = kDefaultAlpha;
  std::size_t max_val_records = 0;  // 0 keeps the whole validation split

  void validate() const;
  AdamWOptions optimizer() const { return {weight_decay, beta1, beta2, eps}; }
  bool operator==(const TrainConfig&) const = default;

  static TrainConfig pretraining() { return {}; }
  static TrainConfig finetuning();
  // Learning rate of the original large-scale setup.
  static TrainConfig reference_preset();
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double val_token_accuracy = 0;  // NaN when not measured
  std::size_t skipped = 0;        // degenerate summaries skipped this epoch
  double seconds = 0;
};

struct RunReport {
  std::string kind;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
  double baseline_val_loss = 0;  // before the first update
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  bool no_improvement = false;
  bool early_stopped = false;
  std::size_t optimizer_steps = 0;
  std::size_t skipped_degenerate = 0;
  std::size_t bound_checks = 0;
  double train_seconds = 0;
  nlohmann::json metrics = nlohmann::json::object();
  nlohmann::json extra = nlohmann::json::object();

  std::vector<double> train_curve() const;
  std::vector<double> val_curve() const;
};

nlohmann::ordered_json to_json(const RunReport& r);

// "<kind>-<config hash>-s<seed>", used for report and checkpoint names.
std::string run_stem(const std::string& kind, const nlohmann::json& config, std::uint64_t seed);
std::uint64_t derive_seed(std::uint64_t seed, const std::string& role);

struct Seq2SeqExample {
  TokenIds src;
  TokenIds tgt;
  int lang_tag = vocab::kLangSrc;
};

enum class Direction { Forward, Reverse };
const char* to_string(Direction d);
Direction direction_from_string(const std::string& s);

enum class DirectRegime { Xls, MonoThenXls, MonoOnly };
const char* to_string(DirectRegime r);
DirectRegime direct_regime_from_string(const std::string& s);

std::vector<Seq2SeqExample> summary_examples(const std::vector<XlsRecord>& records);
std::vector<Seq2SeqExample> translation_examples(const std::vector<XlsRecord>& records, Direction d);
std::vector<Seq2SeqExample> xls_examples(const std::vector<XlsRecord>& records);

// Teacher-forced training with early stopping on validation loss; the model
// ends holding the parameters of the best epoch.
RunReport train_seq2seq(Seq2SeqModel<float>& model, const std::vector<Seq2SeqExample>& train,
                        const std::vector<Seq2SeqExample>& val, const TrainConfig& config,
                        const std::string& kind);

struct ValidationStats {
  double loss = 0;
  double token_accuracy = 0;
  std::size_t skipped = 0;
};

ValidationStats validate_seq2seq(const Seq2SeqModel<float>& model, const std::vector<Seq2SeqExample>& val);

struct TrainedModel {
  Seq2SeqModel<float> model;
  RunReport report;
};

TrainedModel pretrain_sum(const Dataset& data, const ModelConfig& model, const TrainConfig& config);
TrainedModel pretrain_tra(const Dataset& data, const ModelConfig& model, const TrainConfig& config, Direction d);
TrainedModel train_direct_baseline(const Dataset& data, const ModelConfig& model, const TrainConfig& config,
                                   DirectRegime regime);
// k-shot x -> y training of an existing single model.
RunReport finetune_direct(Seq2SeqModel<float>& model, const std::vector<XlsRecord>& shots,
                          const std::vector<XlsRecord>& val, const TrainConfig& config);

struct BacktranslationReport {
  std::size_t filled = 0;
  std::size_t skipped = 0;
  double purity = 1.0;  // source-language purity over all filled outputs
  bool impure = false;
};

nlohmann::ordered_json to_json(const BacktranslationReport& r);

// Fills each record's back-translation with the reverse translator's greedy
// decode of summary_tgt. Records without a target summary are skipped.
BacktranslationReport generate_backtranslations(std::vector<XlsRecord>& records,
                                                const Seq2SeqModel<float>& reverse_translator);

// The first k records of the train split after a seeded shuffle.
std::vector<XlsRecord> select_shots(const std::vector<XlsRecord>& train, std::size_t k, std::uint64_t seed);

struct PipelineValidation {
  double loss = 0;
  std::size_t skipped = 0;
};

PipelineValidation validate_pipeline(const SumTraPipeline<float>& pipeline, const std::vector<XlsRecord>& val);

// Few-shot optimisation of the mixed objective under the configured freeze
// strategy. The pipeline's alpha is set from the config.
RunReport finetune(SumTraPipeline<float>& pipeline, const std::vector<XlsRecord>& shots,
                   const std::vector<XlsRecord>& val, const TrainConfig& config);

}  // namespace softpipe
