#include "softpipe/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace softpipe {

const char* to_string(FreezeStrategy f) {
  switch (f) {
    case FreezeStrategy::All: return "all";
    case FreezeStrategy::SumOnly: return "sum_only";
    case FreezeStrategy::TraOnly: return "tra_only";
  }
  return "?";
}

FreezeStrategy freeze_strategy_from_string(const std::string& s) {
  if (s == "all") return FreezeStrategy::All;
  if (s == "sum_only") return FreezeStrategy::SumOnly;
  if (s == "tra_only") return FreezeStrategy::TraOnly;
  throw ContractError("freeze strategy must be all|sum_only|tra_only, got '" + s + "'");
}

const char* to_string(Direction d) { return d == Direction::Forward ? "forward" : "reverse"; }

Direction direction_from_string(const std::string& s) {
  if (s == "forward") return Direction::Forward;
  if (s == "reverse") return Direction::Reverse;
  throw ContractError("direction must be forward|reverse, got '" + s + "'");
}

const char* to_string(DirectRegime r) {
  switch (r) {
    case DirectRegime::Xls: return "xls";
    case DirectRegime::MonoThenXls: return "mono-then-xls";
    case DirectRegime::MonoOnly: return "mono-only";
  }
  return "?";
}

DirectRegime direct_regime_from_string(const std::string& s) {
  if (s == "xls") return DirectRegime::Xls;
  if (s == "mono-then-xls") return DirectRegime::MonoThenXls;
  if (s == "mono-only") return DirectRegime::MonoOnly;
  throw ContractError("regime must be xls|mono-then-xls|mono-only, got '" + s + "'");
}

// ---- config -----------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw ContractError("train config: learning_rate must be >= 0");
  if (max_epochs < 1) throw ContractError("train config: max_epochs must be >= 1");
  if (early_stopping_patience < 1 || early_stopping_patience >= max_epochs) {
    throw ContractError("train config: early_stopping_patience must be in [1, max_epochs)");
  }
  if (batch_size < 1) throw ContractError("train config: batch_size must be >= 1");
  if (grad_accumulation < 1) throw ContractError("train config: grad_accumulation must be >= 1");
  if (warmup_steps < 0) throw ContractError("train config: warmup_steps must be >= 0");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractError("train config: alpha must lie in [0, 1]");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && eps > 0 && weight_decay >= 0)) {
    throw ContractError("train config: invalid optimizer settings");
  }
}

TrainConfig TrainConfig::finetuning() {
  TrainConfig c;
  c.warmup_steps = 0;
  c.max_val_records = 100;
  return c;
}

TrainConfig TrainConfig::reference_preset() {
  TrainConfig c;
  c.learning_rate = 3e-5;
  return c;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate},
                     {"max_epochs", c.max_epochs},
                     {"early_stopping_patience", c.early_stopping_patience},
                     {"batch_size", c.batch_size},
                     {"grad_accumulation", c.grad_accumulation},
                     {"weight_decay", c.weight_decay},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"eps", c.eps},
                     {"warmup_steps", c.warmup_steps},
                     {"seed", c.seed},
                     {"freeze_strategy", to_string(c.freeze_strategy)},
                     {"alpha", c.alpha},
                     {"max_val_records", c.max_val_records}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (key == "learning_rate") c.learning_rate = value.get<double>();
    else if (key == "max_epochs") c.max_epochs = value.get<int>();
    else if (key == "early_stopping_patience") c.early_stopping_patience = value.get<int>();
    else if (key == "batch_size") c.batch_size = value.get<int>();
    else if (key == "grad_accumulation") c.grad_accumulation = value.get<int>();
    else if (key == "weight_decay") c.weight_decay = value.get<double>();
    else if (key == "beta1") c.beta1 = value.get<double>();
    else if (key == "beta2") c.beta2 = value.get<double>();
    else if (key == "eps") c.eps = value.get<double>();
    else if (key == "warmup_steps") c.warmup_steps = value.get<int>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else if (key == "freeze_strategy") c.freeze_strategy = freeze_strategy_from_string(value.get<std::string>());
    else if (key == "alpha") c.alpha = value.get<double>();
    else if (key == "max_val_records") c.max_val_records = value.get<std::size_t>();
    else throw FormatError("train config: unknown key '" + key + "'");
  }
}

// ---- reports ------------------------------------------------------------------

std::vector<double> RunReport::train_curve() const {
  std::vector<double> out;
  for (const auto& e : epochs) out.push_back(e.train_loss);
  return out;
}

std::vector<double> RunReport::val_curve() const {
  std::vector<double> out;
  for (const auto& e : epochs) out.push_back(e.val_loss);
  return out;
}

namespace {

nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace

nlohmann::ordered_json to_json(const RunReport& r) {
  nlohmann::ordered_json epochs = nlohmann::ordered_json::array();
  for (const auto& e : r.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", finite_or_null(e.train_loss)},
                      {"val_loss", finite_or_null(e.val_loss)},
                      {"val_token_accuracy", finite_or_null(e.val_token_accuracy)},
                      {"skipped", e.skipped},
                      {"seconds", e.seconds}});
  }
  return {{"version", kArtifactVersion},
          {"kind", r.kind},
          {"seed", r.seed},
          {"config", r.config},
          {"baseline_val_loss", finite_or_null(r.baseline_val_loss)},
          {"epochs", epochs},
          {"best_epoch", r.best_epoch},
          {"no_improvement", r.no_improvement},
          {"early_stopped", r.early_stopped},
          {"optimizer_steps", r.optimizer_steps},
          {"skipped_degenerate", r.skipped_degenerate},
          {"bound_checks", r.bound_checks},
          {"train_seconds", r.train_seconds},
          {"metrics", r.metrics},
          {"extra", r.extra}};
}

std::string run_stem(const std::string& kind, const nlohmann::json& config, std::uint64_t seed) {
  return kind + "-" + hex64(fingerprint(config.dump())).substr(0, 12) + "-s" + std::to_string(seed);
}

std::uint64_t derive_seed(std::uint64_t seed, const std::string& role) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(fingerprint(role)), static_cast<std::uint32_t>(fingerprint(role) >> 32)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

// ---- examples -----------------------------------------------------------------

std::vector<Seq2SeqExample> summary_examples(const std::vector<XlsRecord>& records) {
  std::vector<Seq2SeqExample> out;
  for (const auto& r : records) out.push_back({r.doc, r.summary_src, vocab::kLangSrc});
  return out;
}

std::vector<Seq2SeqExample> translation_examples(const std::vector<XlsRecord>& records, Direction d) {
  std::vector<Seq2SeqExample> out;
  for (const auto& r : records) {
    if (d == Direction::Forward) out.push_back({r.summary_src, r.summary_tgt, vocab::kLangTgt});
    else out.push_back({r.summary_tgt, r.summary_src, vocab::kLangSrc});
  }
  return out;
}

std::vector<Seq2SeqExample> xls_examples(const std::vector<XlsRecord>& records) {
  std::vector<Seq2SeqExample> out;
  for (const auto& r : records) out.push_back({r.doc, r.summary_tgt, vocab::kLangTgt});
  return out;
}

// ---- generic loop -------------------------------------------------------------

namespace {

struct LoopHooks {
  std::size_t n_train = 0;
  // Forward and backward for one record with the loss scaled by `weight`;
  // returns the unscaled loss, or nothing if the record was skipped.
  std::function<std::optional<double>(std::size_t, float)> train_record;
  std::function<ValidationStats()> validate;
  std::vector<Tensor<float>> trainable;
  std::vector<Tensor<float>> all_params;
  // Runs after every optimizer step.
  std::function<void()> after_step;
};

std::vector<std::vector<float>> snapshot(const std::vector<Tensor<float>>& params) {
  std::vector<std::vector<float>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.emplace_back(p.data().begin(), p.data().end());
  return out;
}

void restore(std::vector<Tensor<float>>& params, const std::vector<std::vector<float>>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::copy(values[i].begin(), values[i].end(), params[i].mutable_data().begin());
  }
}

double scheduled_lr(const TrainConfig& c, std::size_t step) {
  if (c.warmup_steps <= 0) return c.learning_rate;
  return c.learning_rate * std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps));
}

void run_loop(LoopHooks& hooks, const TrainConfig& config, RunReport& report) {
  config.validate();
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  AdamW optimizer(hooks.trainable, config.optimizer());
  optimizer.zero_grad();
  std::mt19937_64 rng(derive_seed(config.seed, "shuffle"));
  const std::size_t group = static_cast<std::size_t>(config.batch_size * config.grad_accumulation);

  report.seed = config.seed;
  nlohmann::json cfg = config;
  report.config["train"] = cfg;
  report.baseline_val_loss = hooks.validate().loss;

  double best = std::numeric_limits<double>::infinity();
  std::vector<std::vector<float>> best_params = snapshot(hooks.all_params);
  int bad_epochs = 0;
  std::vector<std::size_t> order(hooks.n_train);

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto epoch_start = clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double loss_total = 0;
    std::size_t counted = 0, skipped = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += group) {
      const std::size_t end = std::min(order.size(), begin + group);
      const float weight = 1.0f / static_cast<float>(end - begin);
      for (std::size_t i = begin; i < end; ++i) {
        if (auto loss = hooks.train_record(order[i], weight)) {
          loss_total += *loss;
          ++counted;
        } else {
          ++skipped;
        }
      }
      optimizer.step(scheduled_lr(config, report.optimizer_steps));
      optimizer.zero_grad();
      ++report.optimizer_steps;
      if (hooks.after_step) hooks.after_step();
    }
    const ValidationStats val = hooks.validate();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = counted ? loss_total / static_cast<double>(counted) : std::numeric_limits<double>::quiet_NaN();
    rec.val_loss = val.loss;
    rec.val_token_accuracy = val.token_accuracy;
    rec.skipped = skipped + val.skipped;
    rec.seconds = std::chrono::duration<double>(clock::now() - epoch_start).count();
    report.epochs.push_back(rec);
    report.skipped_degenerate += skipped;

    if (val.loss < best) {
      best = val.loss;
      report.best_epoch = epoch;
      best_params = snapshot(hooks.all_params);
      bad_epochs = 0;
    } else if (++bad_epochs >= config.early_stopping_patience) {
      report.early_stopped = epoch < config.max_epochs;
      break;
    }
  }
  restore(hooks.all_params, best_params);
  if (report.best_epoch == 0) {
    // Every epoch had a non-finite validation loss: keep the first.
    report.best_epoch = 1;
  }
  report.no_improvement = !(best < report.baseline_val_loss);
  report.train_seconds = std::chrono::duration<double>(clock::now() - start).count();
}

std::vector<Tensor<float>> params_of(Seq2SeqModel<float>& m) {
  std::vector<Tensor<float>> out;
  m.visit_parameters([&](const std::string&, Tensor<float>& t) { out.push_back(t); });
  return out;
}

template <typename R>
std::vector<R> capped(const std::vector<R>& v, std::size_t cap) {
  if (cap == 0 || v.size() <= cap) return v;
  return std::vector<R>(v.begin(), v.begin() + static_cast<long>(cap));
}

void check_finite(double loss, const std::string& where) {
  if (!std::isfinite(loss)) throw NumericError(where + ": non-finite loss");
}

}  // namespace

ValidationStats validate_seq2seq(const Seq2SeqModel<float>& model, const std::vector<Seq2SeqExample>& val) {
  NoGradScope<float> no_grad;
  ValidationStats s;
  if (val.empty()) {
    s.loss = std::numeric_limits<double>::quiet_NaN();
    s.token_accuracy = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  double total = 0;
  std::size_t hits = 0, count = 0;
  for (const auto& ex : val) {
    const Tensor<float> lp = model.forward_teacher_forced(ex.src, ex.tgt, ex.lang_tag);
    total += sequence_nll(lp, ex.tgt).item();
    const auto [h, c] = teacher_forced_hits(lp, ex.tgt);
    hits += h;
    count += c;
  }
  s.loss = total / static_cast<double>(val.size());
  s.token_accuracy = count ? static_cast<double>(hits) / static_cast<double>(count) : 1.0;
  return s;
}

RunReport train_seq2seq(Seq2SeqModel<float>& model, const std::vector<Seq2SeqExample>& train,
                        const std::vector<Seq2SeqExample>& val_all, const TrainConfig& config,
                        const std::string& kind) {
  if (train.empty()) throw ContractError(kind + ": no training records");
  const auto val = capped(val_all, config.max_val_records);
  RunReport report;
  report.kind = kind;
  report.config["model"] = nlohmann::json(model.config());

  model.set_trainable(true);
  model.set_training(true);
  model.reseed_dropout(derive_seed(config.seed, "dropout"));
  LoopHooks hooks;
  hooks.n_train = train.size();
  hooks.trainable = params_of(model);
  hooks.all_params = hooks.trainable;
  hooks.train_record = [&](std::size_t i, float weight) -> std::optional<double> {
    const auto& ex = train[i];
    Tape<float> tape;
    Tape<float>::Scope scope(tape);
    const Tensor<float> loss = sequence_nll(model.forward_teacher_forced(ex.src, ex.tgt, ex.lang_tag), ex.tgt);
    check_finite(loss.item(), kind);
    tape.backward(scale(loss, weight));
    return static_cast<double>(loss.item());
  };
  hooks.validate = [&] {
    model.set_training(false);
    ValidationStats s = validate_seq2seq(model, val);
    model.set_training(true);
    return s;
  };
  run_loop(hooks, config, report);
  model.set_training(false);
  model.set_trainable(false);
  return report;
}

namespace {

Seq2SeqModel<float> fresh_model(const ModelConfig& m, const TrainConfig& c, const std::string& role) {
  m.validate();
  return Seq2SeqModel<float>(m, derive_seed(c.seed, role));
}

}  // namespace

TrainedModel pretrain_sum(const Dataset& data, const ModelConfig& m, const TrainConfig& c) {
  Seq2SeqModel<float> model = fresh_model(m, c, "sum");
  RunReport report = train_seq2seq(model, summary_examples(data.train), summary_examples(data.val), c, "train-sum");
  return {std::move(model), std::move(report)};
}

TrainedModel pretrain_tra(const Dataset& data, const ModelConfig& m, const TrainConfig& c, Direction d) {
  const std::string role = std::string("tra-") + to_string(d);
  Seq2SeqModel<float> model = fresh_model(m, c, role);
  RunReport report =
      train_seq2seq(model, translation_examples(data.train, d), translation_examples(data.val, d), c, "train-" + role);
  report.extra["direction"] = to_string(d);
  return {std::move(model), std::move(report)};
}

TrainedModel train_direct_baseline(const Dataset& data, const ModelConfig& m, const TrainConfig& c,
                                   DirectRegime regime) {
  const std::string kind = std::string("direct-") + to_string(regime);
  Seq2SeqModel<float> model = fresh_model(m, c, "direct");
  RunReport report;
  if (regime == DirectRegime::Xls) {
    report = train_seq2seq(model, xls_examples(data.train), xls_examples(data.val), c, kind);
  } else {
    report = train_seq2seq(model, summary_examples(data.train), summary_examples(data.val), c, kind);
    if (regime == DirectRegime::MonoThenXls) {
      RunReport mono = std::move(report);
      report = train_seq2seq(model, xls_examples(data.train), xls_examples(data.val), c, kind);
      report.extra["mono_stage"] = to_json(mono);
    }
  }
  report.extra["regime"] = to_string(regime);
  return {std::move(model), std::move(report)};
}

RunReport finetune_direct(Seq2SeqModel<float>& model, const std::vector<XlsRecord>& shots,
                          const std::vector<XlsRecord>& val, const TrainConfig& config) {
  RunReport r = train_seq2seq(model, xls_examples(shots), xls_examples(val), config, "finetune-direct");
  r.extra["shots"] = shots.size();
  return r;
}

// ---- back-translation ---------------------------------------------------------

nlohmann::ordered_json to_json(const BacktranslationReport& r) {
  return {{"filled", r.filled}, {"skipped", r.skipped}, {"purity", r.purity}, {"impure", r.impure}};
}

BacktranslationReport generate_backtranslations(std::vector<XlsRecord>& records,
                                                const Seq2SeqModel<float>& reverse_translator) {
  NoGradScope<float> no_grad;
  const Vocab v{(reverse_translator.config().vocab_size - vocab::kFirstContent) / 2};
  BacktranslationReport report;
  std::size_t content = 0, in_range = 0;
  for (auto& r : records) {
    if (r.summary_tgt.empty()) {
      ++report.skipped;
      continue;
    }
    r.backtranslation = direct_generate(reverse_translator, r.summary_tgt, vocab::kLangSrc);
    ++report.filled;
    for (int t : *r.backtranslation) {
      if (!v.is_content(t)) continue;
      ++content;
      in_range += v.is_src_content(t);
    }
  }
  report.purity = content ? static_cast<double>(in_range) / static_cast<double>(content) : 1.0;
  report.impure = report.purity < 1.0;
  return report;
}

std::vector<XlsRecord> select_shots(const std::vector<XlsRecord>& train, std::size_t k, std::uint64_t seed) {
  if (k > train.size()) {
    throw ContractError("select_shots: asked for " + std::to_string(k) + " shots but the train split has " +
                        std::to_string(train.size()));
  }
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(seed, "shots"));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<XlsRecord> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(train[order[i]]);
  return out;
}

// ---- pipeline fine-tuning -----------------------------------------------------

namespace {

const TokenIds* backtranslation_of(const XlsRecord& r, double alpha, const char* what, std::size_t i) {
  if (alpha == 0.0) return r.backtranslation ? &*r.backtranslation : nullptr;
  if (!r.backtranslation) {
    throw ContractError(std::string("finetune: ") + what + " record " + std::to_string(i) +
                        " has no back-translation but alpha > 0; run `softpipe backtranslate` first");
  }
  return &*r.backtranslation;
}

}  // namespace

PipelineValidation validate_pipeline(const SumTraPipeline<float>& pipeline, const std::vector<XlsRecord>& val) {
  NoGradScope<float> no_grad;
  PipelineValidation out;
  double total = 0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < val.size(); ++i) {
    const TokenIds* y_hat = backtranslation_of(val[i], pipeline.alpha(), "validation", i);
    try {
      total += pipeline_loss(pipeline, val[i].doc, val[i].summary_tgt, y_hat).breakdown.combined;
      ++counted;
    } catch (const DegenerateSummaryError&) {
      ++out.skipped;
    }
  }
  out.loss = counted ? total / static_cast<double>(counted) : std::numeric_limits<double>::infinity();
  return out;
}

RunReport finetune(SumTraPipeline<float>& pipeline, const std::vector<XlsRecord>& shots,
                   const std::vector<XlsRecord>& val_all, const TrainConfig& config) {
  config.validate();
  if (shots.empty()) throw ContractError("finetune: k must be >= 1 (zero-shot is evaluation, not fine-tuning)");
  pipeline.set_alpha(config.alpha);
  for (std::size_t i = 0; i < shots.size(); ++i) backtranslation_of(shots[i], config.alpha, "training", i);
  const auto val = capped(val_all, config.max_val_records);
  for (std::size_t i = 0; i < val.size(); ++i) backtranslation_of(val[i], config.alpha, "validation", i);

  auto& sum = pipeline.summarizer();
  auto& tra = pipeline.translator();
  const bool train_sum = config.freeze_strategy != FreezeStrategy::TraOnly;
  const bool train_tra = config.freeze_strategy != FreezeStrategy::SumOnly;
  sum.set_trainable(train_sum);
  tra.set_trainable(train_tra);

  RunReport report;
  report.kind = "finetune";
  report.config["model_sum"] = nlohmann::json(sum.config());
  report.config["model_tra"] = nlohmann::json(tra.config());
  report.config["summary_max_len"] = pipeline.summary_max_len();
  report.extra["shots"] = shots.size();

  LoopHooks hooks;
  hooks.n_train = shots.size();
  std::vector<Tensor<float>> sum_params = params_of(sum), tra_params = params_of(tra);
  if (train_sum) hooks.trainable.insert(hooks.trainable.end(), sum_params.begin(), sum_params.end());
  if (train_tra) hooks.trainable.insert(hooks.trainable.end(), tra_params.begin(), tra_params.end());
  hooks.all_params = hooks.trainable;

  hooks.train_record = [&](std::size_t i, float weight) -> std::optional<double> {
    const XlsRecord& r = shots[i];
    Tape<float> tape;
    Tape<float>::Scope scope(tape);
    try {
      PipelineLoss<float> pl =
          pipeline_loss(pipeline, r.doc, r.summary_tgt, backtranslation_of(r, config.alpha, "training", i));
      check_finite(pl.breakdown.combined, "finetune");
      const LossBreakdown& b = pl.breakdown;
      if (!b.within_bounds()) {
        throw NumericError("finetune: loss breakdown out of bounds (nll " + std::to_string(b.nll) + ", nll_sum " +
                           std::to_string(b.nll_sum) + ", combined " + std::to_string(b.combined) + ")");
      }
      ++report.bound_checks;
      tape.backward(scale(pl.combined, weight));
      return b.combined;
    } catch (const DegenerateSummaryError&) {
      return std::nullopt;
    }
  };
  hooks.validate = [&] {
    const PipelineValidation v = validate_pipeline(pipeline, val);
    return ValidationStats{v.loss, std::numeric_limits<double>::quiet_NaN(), v.skipped};
  };
  run_loop(hooks, config, report);
  sum.set_trainable(false);
  tra.set_trainable(false);
  return report;
}

}  // namespace softpipe
