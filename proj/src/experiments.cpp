#include "softpipe/experiments.hpp"

#include <atomic>
#include <cstdio>
#include <exception>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

namespace softpipe {

const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names{"shot-curve",   "alpha-sweep",  "freeze-ablation",
                                              "soft-vs-hard", "cross-domain", "forgetting-demo"};
  return names;
}

void run_parallel(std::size_t count, int jobs, const std::function<void(std::size_t)>& job) {
  const std::size_t workers = std::min<std::size_t>(count, static_cast<std::size_t>(std::max(1, jobs)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  if (failure) std::rethrow_exception(failure);
}

namespace {

std::string style_flag(StyleVariant s) { return std::string("--set task.style_variant=") + to_string(s); }

Dataset require_dataset(const Workspace& ws, StyleVariant style) {
  Workspace::require(ws.dataset(style), "softpipe gen-data " + style_flag(style));
  return read_dataset(ws.dataset(style));
}

Seq2SeqModel<float> require_model(const std::filesystem::path& path, const std::string& command) {
  Workspace::require(path, command);
  return load_checkpoint(path);
}

SumTraPipeline<float> clone_pipeline(const SumTraPipeline<float>& p) {
  return SumTraPipeline<float>(p.summarizer().clone(), p.translator().clone(), p.summary_max_len(), p.alpha());
}

std::vector<XlsRecord> eval_split(const Dataset& data, const ExperimentConfig& c) {
  const auto n = c.experiment.eval_records;
  if (n == 0 || n >= data.test.size()) return data.test;
  return std::vector<XlsRecord>(data.test.begin(), data.test.begin() + static_cast<long>(n));
}

nlohmann::json envelope(const ExperimentConfig& c, const std::string& name) {
  return {{"version", kArtifactVersion}, {"experiment", name}, {"config", c}};
}

std::uint64_t model_hash(Seq2SeqModel<float>& m) { return fingerprint(serialize_model(m)); }

struct SubRun {
  std::string name;
  MetricReport metrics;
  nlohmann::json report = nlohmann::json::object();
};

void write_outputs(const std::filesystem::path& dir, const std::vector<SubRun>& runs, const nlohmann::json& summary,
                   const std::string& extra_csv = {}) {
  std::vector<std::pair<std::string, MetricReport>> rows;
  std::ostringstream csv;
  csv << "run,rouge1,rouge2,rougeL,rouge_avg,exact_match,token_accuracy,language_purity,n_samples\n";
  for (const auto& r : runs) {
    rows.emplace_back(r.name, r.metrics);
    const auto& m = r.metrics;
    csv << r.name << ',' << m.rouge1 << ',' << m.rouge2 << ',' << m.rougeL << ',' << m.rouge_avg << ','
        << m.exact_match << ',' << m.token_accuracy << ',' << m.language_purity << ',' << m.n_samples << '\n';
    nlohmann::json sub = r.report;
    sub["metrics"] = to_json(r.metrics);
    write_file(dir / "runs" / (r.name + ".json"), sub.dump(2) + "\n");
  }
  write_file(dir / "table.txt", format_table(rows));
  write_file(dir / "series.csv", csv.str());
  if (!extra_csv.empty()) write_file(dir / "curve.csv", extra_csv);
  write_file(dir / "summary.json", summary.dump(2) + "\n");
}

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

// Pipeline and direct-baseline runs over shots x seeds, written into `dir`.
nlohmann::json shot_curve_into(const ExperimentConfig& c, const std::filesystem::path& dir, const std::string& name) {
  const Workspace ws(c);
  const StyleVariant style = c.task.style;
  const Dataset data = require_augmented(ws, style);
  const SumTraPipeline<float> base = require_pipeline(c, ws, style);
  const Seq2SeqModel<float> mono =
      require_model(ws.direct(DirectRegime::MonoOnly), "softpipe train-direct --regime mono-only");
  const auto test = eval_split(data, c);
  const Vocab v = c.task.vocab();

  struct Job {
    bool pipeline;
    std::size_t k;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (bool pipeline : {true, false}) {
    for (std::size_t k : c.experiment.shots) {
      if (k == 0) {
        jobs.push_back({pipeline, 0, c.experiment.seeds.front()});
        continue;
      }
      for (std::uint64_t seed : c.experiment.seeds) jobs.push_back({pipeline, k, seed});
    }
  }
  std::vector<SubRun> runs(jobs.size());
  run_parallel(jobs.size(), c.experiment.jobs, [&](std::size_t i) {
    const Job& j = jobs[i];
    SubRun& run = runs[i];
    run.name = std::string(j.pipeline ? "pipeline" : "direct") + "-k" + std::to_string(j.k) + "-s" + std::to_string(j.seed);
    TrainConfig tc = c.finetune;
    tc.seed = j.seed;
    const auto shots = select_shots(data.train, j.k, j.seed);
    if (j.pipeline) {
      SumTraPipeline<float> p = clone_pipeline(base);
      if (j.k > 0) run.report = to_json(finetune(p, shots, data.val, tc));
      run.metrics = evaluate(p, test, v);
    } else {
      Seq2SeqModel<float> m = mono.clone();
      if (j.k > 0) run.report = to_json(finetune_direct(m, shots, data.val, tc));
      run.metrics = evaluate_direct(m, test, v);
    }
    run.report["shots"] = j.k;
    run.report["seed"] = j.seed;
  });

  // Mean over seeds per system and k.
  std::map<std::pair<std::string, std::size_t>, std::vector<double>> groups;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    groups[{jobs[i].pipeline ? "pipeline" : "direct", jobs[i].k}].push_back(runs[i].metrics.rouge_avg);
  }
  nlohmann::json means = nlohmann::json::object();
  std::ostringstream curve;
  curve << "system,shots,mean_rouge_avg,n_seeds\n";
  for (const auto& [key, values] : groups) {
    double mean = 0;
    for (double x : values) mean += x;
    mean /= static_cast<double>(values.size());
    means[key.first][std::to_string(key.second)] = mean;
    curve << key.first << ',' << key.second << ',' << mean << ',' << values.size() << '\n';
  }
  nlohmann::json summary = envelope(c, name);
  summary["pipeline_runs"] = std::count_if(jobs.begin(), jobs.end(), [](const Job& j) { return j.pipeline; });
  summary["direct_runs"] = std::count_if(jobs.begin(), jobs.end(), [](const Job& j) { return !j.pipeline; });
  summary["mean_rouge_avg"] = means;
  write_outputs(dir, runs, summary, curve.str());
  return summary;
}

}  // namespace

Dataset require_augmented(const Workspace& ws, StyleVariant style) {
  Workspace::require(ws.dataset(style), "softpipe gen-data " + style_flag(style));
  Workspace::require(ws.augmented_dataset(style), "softpipe backtranslate " + style_flag(style));
  return read_dataset(ws.augmented_dataset(style));
}

SumTraPipeline<float> require_pipeline(const ExperimentConfig& c, const Workspace& ws, StyleVariant sum_style) {
  Seq2SeqModel<float> sum = require_model(ws.summarizer(sum_style), "softpipe train-sum " + style_flag(sum_style));
  Seq2SeqModel<float> tra =
      require_model(ws.translator(Direction::Forward), "softpipe train-tra --direction forward");
  return SumTraPipeline<float>(std::move(sum), std::move(tra), c.summary_max_len(), c.finetune.alpha);
}

nlohmann::json shot_curve(const ExperimentConfig& c) {
  const Workspace ws(c);
  return shot_curve_into(c, ws.experiment("shot-curve"), "shot-curve");
}

nlohmann::json alpha_sweep(const ExperimentConfig& c) {
  const Workspace ws(c);
  const auto dir = ws.experiment("alpha-sweep");
  const Dataset data = require_augmented(ws, c.task.style);
  const SumTraPipeline<float> base = require_pipeline(c, ws, c.task.style);
  const std::uint64_t sum_in = fingerprint(read_file(ws.summarizer(c.task.style)));
  const std::uint64_t tra_in = fingerprint(read_file(ws.translator(Direction::Forward)));
  const auto shots = select_shots(data.train, c.experiment.sweep_shots, c.experiment.seeds.front());
  const auto test = eval_split(data, c);
  const auto& alphas = c.experiment.alphas;

  std::vector<SubRun> runs(alphas.size());
  run_parallel(alphas.size(), c.experiment.jobs, [&](std::size_t i) {
    SubRun& run = runs[i];
    run.name = "alpha-" + fmt("%.2f", alphas[i]);
    TrainConfig tc = c.finetune;
    tc.alpha = alphas[i];
    tc.seed = c.experiment.seeds.front();
    SumTraPipeline<float> p = clone_pipeline(base);
    run.report = to_json(finetune(p, shots, data.val, tc));
    const auto ckpt = dir / "runs" / (run.name + ".ckpt");
    save_pipeline(p, ckpt);
    run.metrics = evaluate(p, test, c.task.vocab());
    run.report["alpha"] = alphas[i];
    run.report["checkpoint"] = ckpt.string();
    run.report["sum_unchanged"] = fingerprint(pipeline_part_bytes(ckpt, "sum")) == sum_in;
    run.report["tra_unchanged"] = fingerprint(pipeline_part_bytes(ckpt, "tra")) == tra_in;
  });
  nlohmann::json summary = envelope(c, "alpha-sweep");
  summary["sub_runs"] = runs.size();
  summary["shots"] = shots.size();
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < runs.size(); ++i) {
    rows.push_back({{"alpha", alphas[i]},
                    {"rouge_avg", runs[i].metrics.rouge_avg},
                    {"sum_unchanged", runs[i].report["sum_unchanged"]},
                    {"tra_unchanged", runs[i].report["tra_unchanged"]}});
  }
  summary["rows"] = rows;
  write_outputs(dir, runs, summary);
  return summary;
}

nlohmann::json freeze_ablation(const ExperimentConfig& c) {
  const Workspace ws(c);
  const auto dir = ws.experiment("freeze-ablation");
  const Dataset data = require_augmented(ws, c.task.style);
  const SumTraPipeline<float> base = require_pipeline(c, ws, c.task.style);
  const auto shots = select_shots(data.train, c.experiment.sweep_shots, c.experiment.seeds.front());
  const auto test = eval_split(data, c);
  const std::vector<FreezeStrategy> strategies{FreezeStrategy::All, FreezeStrategy::SumOnly, FreezeStrategy::TraOnly};

  std::vector<SubRun> runs(strategies.size());
  run_parallel(strategies.size(), c.experiment.jobs, [&](std::size_t i) {
    SubRun& run = runs[i];
    run.name = std::string("freeze-") + to_string(strategies[i]);
    TrainConfig tc = c.finetune;
    tc.freeze_strategy = strategies[i];
    tc.seed = c.experiment.seeds.front();
    SumTraPipeline<float> p = clone_pipeline(base);
    p.set_alpha(tc.alpha);
    const std::uint64_t sum_before = model_hash(p.summarizer());
    const std::uint64_t tra_before = model_hash(p.translator());
    const double loss_before = validate_pipeline(p, shots).loss;
    run.report = to_json(finetune(p, shots, data.val, tc));
    const double loss_after = validate_pipeline(p, shots).loss;
    run.metrics = evaluate(p, test, c.task.vocab());
    run.report["freeze_strategy"] = to_string(strategies[i]);
    run.report["train_loss_before"] = loss_before;
    run.report["train_loss_after"] = loss_after;
    run.report["sum_unchanged"] = model_hash(p.summarizer()) == sum_before;
    run.report["tra_unchanged"] = model_hash(p.translator()) == tra_before;
  });
  nlohmann::json summary = envelope(c, "freeze-ablation");
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : runs) {
    rows.push_back({{"run", r.name},
                    {"rouge_avg", r.metrics.rouge_avg},
                    {"train_loss_before", r.report["train_loss_before"]},
                    {"train_loss_after", r.report["train_loss_after"]},
                    {"sum_unchanged", r.report["sum_unchanged"]},
                    {"tra_unchanged", r.report["tra_unchanged"]}});
  }
  summary["rows"] = rows;
  write_outputs(dir, runs, summary);
  return summary;
}

nlohmann::json soft_vs_hard(const ExperimentConfig& c) {
  const Workspace ws(c);
  const auto dir = ws.experiment("soft-vs-hard");
  const Dataset data = require_augmented(ws, c.task.style);
  const SumTraPipeline<float> base = require_pipeline(c, ws, c.task.style);
  const auto test = eval_split(data, c);
  const std::vector<std::size_t> ks{0, c.experiment.sweep_shots};

  std::vector<SubRun> runs(2 * ks.size());
  run_parallel(ks.size(), c.experiment.jobs, [&](std::size_t i) {
    SumTraPipeline<float> p = clone_pipeline(base);
    nlohmann::json report = nlohmann::json::object();
    if (ks[i] > 0) {
      TrainConfig tc = c.finetune;
      tc.seed = c.experiment.seeds.front();
      report = to_json(finetune(p, select_shots(data.train, ks[i], tc.seed), data.val, tc));
    }
    for (std::size_t m = 0; m < 2; ++m) {
      const InferenceMode mode = m == 0 ? InferenceMode::Hard : InferenceMode::Soft;
      SubRun& run = runs[2 * i + m];
      run.name = std::string(to_string(mode)) + "-k" + std::to_string(ks[i]);
      run.report = report;
      run.report["mode"] = to_string(mode);
      run.metrics = evaluate(p, test, c.task.vocab(), mode);
    }
  });
  nlohmann::json summary = envelope(c, "soft-vs-hard");
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < ks.size(); ++i) {
    const double hard = runs[2 * i].metrics.rouge_avg, soft = runs[2 * i + 1].metrics.rouge_avg;
    rows.push_back({{"shots", ks[i]}, {"hard", hard}, {"soft", soft}, {"gap_points", 100.0 * (hard - soft)}});
  }
  summary["rows"] = rows;
  write_outputs(dir, runs, summary);
  return summary;
}

nlohmann::json cross_domain(const ExperimentConfig& c) {
  const Workspace ws(c);
  const auto dir = ws.experiment("cross-domain");
  const std::vector<StyleVariant> styles{StyleVariant::A, StyleVariant::B};
  std::vector<Dataset> data;
  for (auto s : styles) data.push_back(require_dataset(ws, s));
  std::vector<SumTraPipeline<float>> pipelines;
  for (auto s : styles) pipelines.push_back(require_pipeline(c, ws, s));

  std::vector<SubRun> runs(4);
  run_parallel(4, c.experiment.jobs, [&](std::size_t i) {
    const std::size_t train_style = i / 2, test_style = i % 2;
    SubRun& run = runs[i];
    run.name = std::string("sum-") + to_string(styles[train_style]) + "-on-" + to_string(styles[test_style]);
    run.metrics = evaluate(pipelines[train_style], eval_split(data[test_style], c), c.task.vocab());
    run.report = {{"summarizer_style", to_string(styles[train_style])}, {"test_style", to_string(styles[test_style])}};
  });
  nlohmann::json summary = envelope(c, "cross-domain");
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : runs) rows.push_back({{"run", r.name}, {"rouge_avg", r.metrics.rouge_avg}});
  summary["rows"] = rows;
  write_outputs(dir, runs, summary);
  return summary;
}

nlohmann::json forgetting_demo(const ExperimentConfig& c) {
  const Workspace ws(c);
  const auto dir = ws.experiment("forgetting-demo");
  const Dataset data = require_dataset(ws, c.task.style);
  const SumTraPipeline<float> pipeline = require_pipeline(c, ws, c.task.style);
  const Seq2SeqModel<float> mono =
      require_model(ws.direct(DirectRegime::MonoOnly), "softpipe train-direct --regime mono-only");
  const auto test = eval_split(data, c);
  std::vector<SubRun> runs(2);
  runs[0].name = "direct-mono-only-zero-shot";
  runs[0].metrics = evaluate_direct(mono, test, c.task.vocab());
  runs[1].name = "pipeline-zero-shot";
  runs[1].metrics = evaluate(pipeline, test, c.task.vocab());
  nlohmann::json summary = envelope(c, "forgetting-demo");
  summary["direct_purity"] = runs[0].metrics.language_purity;
  summary["pipeline_purity"] = runs[1].metrics.language_purity;
  summary["shot_curve"] = shot_curve_into(c, dir / "shot-curve", "forgetting-demo/shot-curve")["mean_rouge_avg"];
  write_outputs(dir, runs, summary);
  return summary;
}

nlohmann::json run_experiment(const std::string& name, const ExperimentConfig& c) {
  if (name == "shot-curve") return shot_curve(c);
  if (name == "alpha-sweep") return alpha_sweep(c);
  if (name == "freeze-ablation") return freeze_ablation(c);
  if (name == "soft-vs-hard") return soft_vs_hard(c);
  if (name == "cross-domain") return cross_domain(c);
  if (name == "forgetting-demo") return forgetting_demo(c);
  std::string known;
  for (const auto& n : experiment_names()) known += (known.empty() ? "" : "|") + n;
  throw ContractError("unknown experiment '" + name + "' (expected " + known + ")");
}

}  // namespace softpipe
