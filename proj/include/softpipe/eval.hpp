#pragma once

// Metrics over integer token ids: ROUGE-1/2/L F1, exact match, token
// accuracy, language purity, and per-sample decode timing.

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "softpipe/pipeline.hpp"
#include "softpipe/tasks.hpp"

namespace softpipe {

// Clipped n-gram F1 after stripping specials. Zero when either side has no
// n-grams.
double rouge_n(const TokenIds& pred, const TokenIds& ref, int n);
// LCS-based F1 after stripping specials.
double rouge_l(const TokenIds& pred, const TokenIds& ref);
// Fraction of content tokens inside `target`'s range; 1 with no content.
double language_purity(const TokenIds& tokens, const Vocab& vocab, Language target);
// Position-wise agreement of the stripped sequences over the longer length.
double token_accuracy(const TokenIds& pred, const TokenIds& ref);

struct SampleScore {
  double rouge1 = 0, rouge2 = 0, rougeL = 0;
  bool exact = false;
  double token_accuracy = 0;
  double language_purity = 0;
};

SampleScore score_sample(const TokenIds& pred, const TokenIds& ref, const Vocab& vocab, Language target);

struct MetricReport {
  double rouge1 = 0, rouge2 = 0, rougeL = 0, rouge_avg = 0;
  double exact_match = 0, token_accuracy = 0, language_purity = 0;
  std::size_t n_samples = 0;
  double per_sample_time_s = 0;
  double per_sample_time_var = 0;
  std::vector<SampleScore> samples;
};

MetricReport aggregate(const std::vector<SampleScore>& samples);

nlohmann::ordered_json to_json(const MetricReport& r);
// Aligned table; metrics scaled by 100 with two decimals.
std::string format_table(const std::vector<std::pair<std::string, MetricReport>>& rows);
std::string samples_csv(const MetricReport& r);

MetricReport evaluate_predictions(const std::vector<TokenIds>& preds, const std::vector<TokenIds>& refs,
                                  const Vocab& vocab, Language target = Language::Target);

// Pipeline outputs scored against each record's summary_tgt.
MetricReport evaluate(const SumTraPipeline<float>& pipeline, const std::vector<XlsRecord>& records, const Vocab& vocab,
                      InferenceMode mode = InferenceMode::Hard);

// What a single model is asked to produce and which reference it is scored on.
enum class DirectTarget { Summary, Translation };

// Single-model x -> y decode with the given language tag.
TokenIds direct_generate(const Seq2SeqModel<float>& model, const TokenIds& src, int lang_tag);
MetricReport evaluate_direct(const Seq2SeqModel<float>& model, const std::vector<XlsRecord>& records,
                             const Vocab& vocab, DirectTarget target = DirectTarget::Translation);

struct TimingResult {
  double mean_s = 0;      // per sample, averaged over repetitions
  double variance_s2 = 0; // across repetitions
  std::size_t n_samples = 0;
  int repetitions = 0;
};

// Times only the calls to `generate`, after one untimed warm-up pass.
TimingResult time_inference(const std::function<void(const XlsRecord&)>& generate,
                            const std::vector<XlsRecord>& records, int repetitions);
TimingResult time_pipeline(const SumTraPipeline<float>& pipeline, const std::vector<XlsRecord>& records,
                           int repetitions, InferenceMode mode = InferenceMode::Hard);
TimingResult time_direct(const Seq2SeqModel<float>& model, const std::vector<XlsRecord>& records, int repetitions);

}  // namespace softpipe
