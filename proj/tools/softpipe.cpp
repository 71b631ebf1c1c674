// softpipe command-line entry point.
//
// Exit codes: 0 success, 2 contract/config/format error, 3 numeric failure.

#include <cstdio>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "softpipe/config.hpp"
#include "softpipe/eval.hpp"
#include "softpipe/experiments.hpp"
#include "softpipe/gradcheck.hpp"
#include "softpipe/train.hpp"

using namespace softpipe;
namespace fs = std::filesystem;

namespace {

struct Globals {
  std::string config_file;
  std::vector<std::string> overrides;
  std::string workdir;
};

ExperimentConfig resolve(const Globals& g) {
  std::vector<std::string> overrides = g.overrides;
  if (!g.workdir.empty()) overrides.push_back("paths.workdir=\"" + g.workdir + "\"");
  return load_config(g.config_file, overrides);
}

fs::path or_default(const std::string& given, const fs::path& fallback) {
  return given.empty() ? fallback : fs::path(given);
}

void write_report(const Workspace& ws, const std::string& kind, const ExperimentConfig& c, std::uint64_t seed,
                  nlohmann::ordered_json report) {
  report["resolved_config"] = nlohmann::json(c);
  const fs::path path = ws.report(run_stem(kind, nlohmann::json(c), seed));
  write_file(path, report.dump(2) + "\n");
  std::cout << "report: " << path.string() << "\n";
}

std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const std::string part = s.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(part, &used);
      if (used != part.size()) throw std::invalid_argument(part);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ContractError("--sizes expects train,val,test integers, got '" + s + "'");
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (out.size() != 3) throw ContractError("--sizes expects exactly three integers train,val,test");
  return out;
}

int run(int argc, char** argv) {
  CLI::App app{"Differentiable summarize-and-translate pipeline on synthetic toy tasks"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_file, "JSON config file with task/model/train/finetune/experiment/paths sections");
  app.add_option("--set", g.overrides, "Override a dotted key, e.g. --set train.learning_rate=1e-3");
  app.add_option("--workdir", g.workdir, "Root for datasets/, ckpts/, reports/ and experiments/");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a toy dataset");
  std::string gen_spec, gen_out, gen_sizes;
  gen->add_option("--spec", gen_spec, "JSON file holding a task section");
  gen->add_option("--out", gen_out, "Output JSONL file");
  gen->add_option("--sizes", gen_sizes, "train,val,test record counts");

  // train-sum / train-tra / train-direct
  auto* tsum = app.add_subcommand("train-sum", "Pretrain the summarizer (doc -> source summary)");
  auto* ttra = app.add_subcommand("train-tra", "Pretrain a translator");
  auto* tdir = app.add_subcommand("train-direct", "Train the single-model baseline");
  std::string train_dataset, train_out, direction = "forward", regime = "xls";
  for (auto* sub : {tsum, ttra, tdir}) {
    sub->add_option("--dataset", train_dataset, "Dataset JSONL (default: workspace dataset)");
    sub->add_option("--out", train_out, "Checkpoint path (default: workspace location)");
  }
  ttra->add_option("--direction", direction, "forward (source->target) or reverse")
      ->check(CLI::IsMember({"forward", "reverse"}));
  tdir->add_option("--regime", regime, "xls | mono-then-xls | mono-only")
      ->check(CLI::IsMember({"xls", "mono-then-xls", "mono-only"}));

  // backtranslate
  auto* bt = app.add_subcommand("backtranslate", "Fill back-translated references with the reverse translator");
  std::string bt_dataset, bt_ckpt, bt_out;
  bt->add_option("--dataset", bt_dataset, "Dataset JSONL (default: workspace dataset)");
  bt->add_option("--reverse-ckpt", bt_ckpt, "Reverse translator checkpoint");
  bt->add_option("--out", bt_out, "Output JSONL (default: workspace augmented dataset)");

  // finetune
  auto* ft = app.add_subcommand("finetune", "Few-shot fine-tuning of the coupled pipeline");
  std::string ft_sum, ft_tra, ft_dataset, ft_out, ft_freeze;
  std::size_t ft_shots = 32;
  std::optional<double> ft_alpha;
  ft->add_option("--sum-ckpt", ft_sum, "Summarizer checkpoint");
  ft->add_option("--tra-ckpt", ft_tra, "Translator checkpoint");
  ft->add_option("--dataset", ft_dataset, "Augmented dataset JSONL");
  ft->add_option("--shots", ft_shots, "Number of training records k (>= 1)");
  ft->add_option("--alpha", ft_alpha, "Weight of the back-translation loss in [0,1]");
  ft->add_option("--freeze", ft_freeze, "all | sum_only | tra_only")
      ->check(CLI::IsMember({"all", "sum_only", "tra_only"}));
  ft->add_option("--out", ft_out, "Pipeline checkpoint path");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a single model or a pipeline");
  std::string ev_ckpt, ev_pipe, ev_dataset, ev_mode = "hard", ev_split = "test", ev_target = "translation", ev_out;
  int ev_timing = 0;
  auto* ev_ckpt_opt = ev->add_option("--ckpt", ev_ckpt, "Single-model checkpoint");
  auto* ev_pipe_opt = ev->add_option("--pipeline-ckpt", ev_pipe, "Pipeline checkpoint");
  ev_ckpt_opt->excludes(ev_pipe_opt);
  ev->add_option("--dataset", ev_dataset, "Dataset JSONL (default: workspace dataset)");
  ev->add_option("--mode", ev_mode, "hard | soft (pipeline only)")->check(CLI::IsMember({"hard", "soft"}));
  ev->add_option("--split", ev_split, "train | val | test")->check(CLI::IsMember({"train", "val", "test"}));
  ev->add_option("--target", ev_target, "summary | translation (single model only)")
      ->check(CLI::IsMember({"summary", "translation"}));
  ev->add_option("--timing", ev_timing, "Timing repetitions (0 disables)");
  ev->add_option("--out", ev_out, "Output directory for metrics.json, table.txt and samples.csv");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the mixed pipeline loss");
  std::string gc_config = "tiny";
  double gc_alpha = 0.5, gc_threshold = 1e-4;
  gc->add_option("--config", gc_config, "Configuration preset")->check(CLI::IsMember({"tiny"}));
  gc->add_option("--alpha", gc_alpha, "Mixing weight");
  gc->add_option("--threshold", gc_threshold, "Maximum accepted relative error");

  // experiment
  auto* ex = app.add_subcommand("experiment", "Run a multi-run experiment");
  std::string ex_name;
  int ex_jobs = 0;
  ex->add_option("name", ex_name, "Experiment name")->required()->check(CLI::IsMember(experiment_names()));
  ex->add_option("--jobs", ex_jobs, "Parallel sub-runs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (gc->parsed()) {
    const PipelineGradCheck r = gradcheck_pipeline(gc_alpha);
    std::printf("max relative error %.3e (max abs %.3e) over %zu parameters, %zu records, %.1fs\n",
                r.result.max_rel_error, r.result.max_abs_error, r.n_params, r.n_records, r.seconds);
    if (!(r.result.max_rel_error <= gc_threshold)) {
      std::fprintf(stderr, "gradcheck FAILED: %.3e > %.1e\n", r.result.max_rel_error, gc_threshold);
      return 3;
    }
    return 0;
  }

  ExperimentConfig c = resolve(g);
  if (gen->parsed() && !gen_spec.empty()) {
    ExperimentConfig with_spec = load_config(gen_spec, {});
    c.task = with_spec.task;
    c.resolve();
  }
  const Workspace ws(c);
  const StyleVariant style = c.task.style;
  const std::string style_set = std::string("--set task.style_variant=") + to_string(style);

  auto load_data = [&](const std::string& given, const fs::path& fallback, const std::string& command) {
    const fs::path path = or_default(given, fallback);
    if (given.empty()) Workspace::require(path, command);
    return read_dataset(path);
  };

  if (gen->parsed()) {
    std::size_t n_train = c.task.n_train, n_val = c.task.n_val, n_test = c.task.n_test;
    if (!gen_sizes.empty()) {
      const auto sizes = parse_sizes(gen_sizes);
      n_train = sizes[0], n_val = sizes[1], n_test = sizes[2];
    }
    const fs::path out = or_default(gen_out, ws.dataset(style));
    write_dataset(out, gen_dataset(c.task, n_train, n_val, n_test));
    std::cout << "wrote " << n_train + n_val + n_test << " records to " << out.string() << "\n";
    return 0;
  }

  if (tsum->parsed() || ttra->parsed() || tdir->parsed()) {
    const Dataset data = load_data(train_dataset, ws.dataset(style), "softpipe gen-data " + style_set);
    TrainedModel trained = [&] {
      if (tsum->parsed()) return pretrain_sum(data, c.model, c.train);
      if (ttra->parsed()) return pretrain_tra(data, c.model, c.train, direction_from_string(direction));
      return train_direct_baseline(data, c.model, c.train, direct_regime_from_string(regime));
    }();
    const DirectRegime dr = direct_regime_from_string(regime);
    const fs::path out = or_default(
        train_out, tsum->parsed()   ? ws.summarizer(style)
                   : ttra->parsed() ? ws.translator(direction_from_string(direction))
                                    : ws.direct(dr));
    save_checkpoint(trained.model, out);
    if (ttra->parsed()) {
      const auto& best = trained.report.epochs.at(static_cast<std::size_t>(trained.report.best_epoch - 1));
      trained.report.metrics = {{"val_token_accuracy", best.val_token_accuracy}, {"val_loss", best.val_loss}};
    } else {
      const bool summary = tsum->parsed() || dr == DirectRegime::MonoOnly;
      trained.report.metrics = to_json(evaluate_direct(trained.model, data.test, c.task.vocab(),
                                                       summary ? DirectTarget::Summary : DirectTarget::Translation));
    }
    auto report = to_json(trained.report);
    report["checkpoint"] = out.string();
    write_report(ws, trained.report.kind, c, c.train.seed, report);
    std::cout << "checkpoint: " << out.string() << " (best epoch " << trained.report.best_epoch << ")\n";
    return 0;
  }

  if (bt->parsed()) {
    Dataset data = load_data(bt_dataset, ws.dataset(style), "softpipe gen-data " + style_set);
    const fs::path ckpt = or_default(bt_ckpt, ws.translator(Direction::Reverse));
    Workspace::require(ckpt, "softpipe train-tra --direction reverse");
    const Seq2SeqModel<float> reverse = load_checkpoint(ckpt);
    BacktranslationReport total;
    TokenIds produced;
    for (auto* split : {&data.train, &data.val, &data.test}) {
      const BacktranslationReport r = generate_backtranslations(*split, reverse);
      total.filled += r.filled;
      total.skipped += r.skipped;
      for (const auto& rec : *split) {
        if (rec.backtranslation) produced.insert(produced.end(), rec.backtranslation->begin(), rec.backtranslation->end());
      }
    }
    total.purity = language_purity(produced, c.task.vocab(), Language::Source);
    total.impure = total.purity < 1.0;
    const fs::path out = or_default(bt_out, ws.augmented_dataset(style));
    write_dataset(out, data);
    std::cout << "back-translations: " << to_json(total).dump() << "\n";
    if (total.skipped) std::cerr << "warning: " << total.skipped << " records had no target summary\n";
    if (total.impure) std::cerr << "warning: back-translations are not purely source-language\n";
    std::cout << "wrote " << out.string() << "\n";
    return 0;
  }

  if (ft->parsed()) {
    const Dataset data = load_data(ft_dataset, ws.augmented_dataset(style), "softpipe backtranslate " + style_set);
    const fs::path sum_path = or_default(ft_sum, ws.summarizer(style));
    const fs::path tra_path = or_default(ft_tra, ws.translator(Direction::Forward));
    Workspace::require(sum_path, "softpipe train-sum " + style_set);
    Workspace::require(tra_path, "softpipe train-tra --direction forward");
    TrainConfig tc = c.finetune;
    if (ft_alpha) tc.alpha = *ft_alpha;
    if (!ft_freeze.empty()) tc.freeze_strategy = freeze_strategy_from_string(ft_freeze);
    SumTraPipeline<float> pipeline(load_checkpoint(sum_path), load_checkpoint(tra_path), c.summary_max_len(),
                                   tc.alpha);
    RunReport report = finetune(pipeline, select_shots(data.train, ft_shots, tc.seed), data.val, tc);
    report.metrics = to_json(evaluate(pipeline, data.test, c.task.vocab()));
    const std::string stem = run_stem("finetune-k" + std::to_string(ft_shots), nlohmann::json(tc), tc.seed);
    const fs::path out = or_default(ft_out, ws.root() / c.paths.ckpt_dir / (stem + ".ckpt"));
    save_pipeline(pipeline, out);
    auto json = to_json(report);
    json["checkpoint"] = out.string();
    write_report(ws, "finetune-k" + std::to_string(ft_shots), c, tc.seed, json);
    std::cout << "pipeline checkpoint: " << out.string() << "\n";
    return 0;
  }

  if (ev->parsed()) {
    if (ev_ckpt.empty() && ev_pipe.empty()) throw ContractError("eval needs --ckpt or --pipeline-ckpt");
    const Dataset data = load_data(ev_dataset, ws.dataset(style), "softpipe gen-data " + style_set);
    const Split split = split_from_string(ev_split);
    const auto& records = split == Split::Train ? data.train : split == Split::Val ? data.val : data.test;
    MetricReport m;
    if (!ev_pipe.empty()) {
      const SumTraPipeline<float> p = load_pipeline(ev_pipe);
      const InferenceMode mode = inference_mode_from_string(ev_mode);
      m = evaluate(p, records, c.task.vocab(), mode);
      if (ev_timing > 0) {
        const TimingResult t = time_pipeline(p, records, ev_timing, mode);
        m.per_sample_time_s = t.mean_s;
        m.per_sample_time_var = t.variance_s2;
      }
    } else {
      const Seq2SeqModel<float> model = load_checkpoint(ev_ckpt);
      m = evaluate_direct(model, records, c.task.vocab(),
                          ev_target == "summary" ? DirectTarget::Summary : DirectTarget::Translation);
      if (ev_timing > 0) {
        const TimingResult t = time_direct(model, records, ev_timing);
        m.per_sample_time_s = t.mean_s;
        m.per_sample_time_var = t.variance_s2;
      }
    }
    const std::string name = fs::path(ev_pipe.empty() ? ev_ckpt : ev_pipe).stem().string();
    const fs::path out = or_default(ev_out, ws.root() / c.paths.report_dir / ("eval-" + name + "-" + ev_split));
    nlohmann::ordered_json j = to_json(m);
    j["version"] = kArtifactVersion;
    j["resolved_config"] = nlohmann::json(c);
    write_file(out / "metrics.json", j.dump(2) + "\n");
    write_file(out / "table.txt", format_table({{name, m}}));
    write_file(out / "samples.csv", samples_csv(m));
    std::cout << format_table({{name, m}});
    return 0;
  }

  if (ex->parsed()) {
    if (ex_jobs > 0) c.experiment.jobs = ex_jobs;
    const nlohmann::json summary = run_experiment(ex_name, c);
    std::cout << read_file(ws.experiment(ex_name) / "table.txt");
    std::cout << "outputs: " << ws.experiment(ex_name).string() << "\n";
    (void)summary;
    return 0;
  }
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.exit_code();
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "error: malformed JSON value: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
