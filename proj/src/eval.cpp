#include "softpipe/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <map>
#include <sstream>

namespace softpipe {

namespace {

double f1(double overlap, double pred_total, double ref_total) {
  if (pred_total == 0 || ref_total == 0 || overlap == 0) return 0.0;
  const double p = overlap / pred_total;
  const double r = overlap / ref_total;
  return 2.0 * p * r / (p + r);
}

std::map<TokenIds, int> ngram_counts(const TokenIds& seq, int n) {
  std::map<TokenIds, int> counts;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= seq.size(); ++i) {
    ++counts[TokenIds(seq.begin() + static_cast<long>(i), seq.begin() + static_cast<long>(i) + n)];
  }
  return counts;
}

std::size_t lcs_length(const TokenIds& a, const TokenIds& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

template <typename Fn>
auto with_record_index(std::size_t i, Fn&& fn) {
  try {
    return fn();
  } catch (const NumericError& e) {
    throw NumericError("record " + std::to_string(i) + ": " + e.what());
  } catch (const Error& e) {
    throw Error("record " + std::to_string(i) + ": " + e.what(), e.exit_code());
  }
}

}  // namespace

double rouge_n(const TokenIds& pred, const TokenIds& ref, int n) {
  if (n < 1) throw ContractError("rouge_n: n must be >= 1");
  const auto pc = ngram_counts(strip_specials(pred), n);
  const auto rc = ngram_counts(strip_specials(ref), n);
  double overlap = 0, pt = 0, rt = 0;
  for (const auto& [g, c] : pc) {
    pt += c;
    if (auto it = rc.find(g); it != rc.end()) overlap += std::min(c, it->second);
  }
  for (const auto& [g, c] : rc) rt += c;
  return f1(overlap, pt, rt);
}

double rouge_l(const TokenIds& pred, const TokenIds& ref) {
  const TokenIds p = strip_specials(pred);
  const TokenIds r = strip_specials(ref);
  return f1(static_cast<double>(lcs_length(p, r)), static_cast<double>(p.size()), static_cast<double>(r.size()));
}

double language_purity(const TokenIds& tokens, const Vocab& vocab, Language target) {
  std::size_t content = 0, in_range = 0;
  for (int t : tokens) {
    if (!vocab.is_content(t)) continue;
    ++content;
    if (target == Language::Source ? vocab.is_src_content(t) : vocab.is_tgt_content(t)) ++in_range;
  }
  return content == 0 ? 1.0 : static_cast<double>(in_range) / static_cast<double>(content);
}

double token_accuracy(const TokenIds& pred, const TokenIds& ref) {
  const TokenIds p = strip_specials(pred);
  const TokenIds r = strip_specials(ref);
  const std::size_t n = std::max(p.size(), r.size());
  if (n == 0) return 1.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < std::min(p.size(), r.size()); ++i) hits += p[i] == r[i];
  return static_cast<double>(hits) / static_cast<double>(n);
}

SampleScore score_sample(const TokenIds& pred, const TokenIds& ref, const Vocab& vocab, Language target) {
  SampleScore s;
  s.rouge1 = rouge_n(pred, ref, 1);
  s.rouge2 = rouge_n(pred, ref, 2);
  s.rougeL = rouge_l(pred, ref);
  s.exact = pred == ref;
  s.token_accuracy = token_accuracy(pred, ref);
  s.language_purity = language_purity(pred, vocab, target);
  return s;
}

MetricReport aggregate(const std::vector<SampleScore>& samples) {
  MetricReport r;
  r.samples = samples;
  r.n_samples = samples.size();
  if (samples.empty()) return r;
  for (const auto& s : samples) {
    r.rouge1 += s.rouge1;
    r.rouge2 += s.rouge2;
    r.rougeL += s.rougeL;
    r.exact_match += s.exact ? 1.0 : 0.0;
    r.token_accuracy += s.token_accuracy;
    r.language_purity += s.language_purity;
  }
  const double n = static_cast<double>(samples.size());
  r.rouge1 /= n;
  r.rouge2 /= n;
  r.rougeL /= n;
  r.exact_match /= n;
  r.token_accuracy /= n;
  r.language_purity /= n;
  r.rouge_avg = (r.rouge1 + r.rouge2 + r.rougeL) / 3.0;
  return r;
}

nlohmann::ordered_json to_json(const MetricReport& r) {
  return {{"rouge1", r.rouge1},
          {"rouge2", r.rouge2},
          {"rougeL", r.rougeL},
          {"rouge_avg", r.rouge_avg},
          {"exact_match", r.exact_match},
          {"token_accuracy", r.token_accuracy},
          {"language_purity", r.language_purity},
          {"n_samples", r.n_samples},
          {"per_sample_time_s", r.per_sample_time_s},
          {"per_sample_time_var", r.per_sample_time_var}};
}

std::string format_table(const std::vector<std::pair<std::string, MetricReport>>& rows) {
  std::size_t width = 3;
  for (const auto& [name, _] : rows) width = std::max(width, name.size());
  std::ostringstream out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s %8s %8s %8s %8s %8s %8s %8s %6s\n", static_cast<int>(width), "run", "R-1",
                "R-2", "R-L", "R-avg", "EM", "TokAcc", "Purity", "n");
  out << buf;
  for (const auto& [name, r] : rows) {
    std::snprintf(buf, sizeof buf, "%-*s %8.2f %8.2f %8.2f %8.2f %8.2f %8.2f %8.2f %6zu\n", static_cast<int>(width),
                  name.c_str(), 100 * r.rouge1, 100 * r.rouge2, 100 * r.rougeL, 100 * r.rouge_avg,
                  100 * r.exact_match, 100 * r.token_accuracy, 100 * r.language_purity, r.n_samples);
    out << buf;
  }
  return out.str();
}

std::string samples_csv(const MetricReport& r) {
  std::ostringstream out;
  out << "index,rouge1,rouge2,rougeL,exact,token_accuracy,language_purity\n";
  for (std::size_t i = 0; i < r.samples.size(); ++i) {
    const auto& s = r.samples[i];
    out << i << ',' << s.rouge1 << ',' << s.rouge2 << ',' << s.rougeL << ',' << (s.exact ? 1 : 0) << ','
        << s.token_accuracy << ',' << s.language_purity << '\n';
  }
  return out.str();
}

MetricReport evaluate_predictions(const std::vector<TokenIds>& preds, const std::vector<TokenIds>& refs,
                                  const Vocab& vocab, Language target) {
  if (preds.size() != refs.size()) throw DimensionError("evaluate: predictions and references differ in count");
  std::vector<SampleScore> scores;
  scores.reserve(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) scores.push_back(score_sample(preds[i], refs[i], vocab, target));
  return aggregate(scores);
}

MetricReport evaluate(const SumTraPipeline<float>& pipeline, const std::vector<XlsRecord>& records, const Vocab& vocab,
                      InferenceMode mode) {
  std::vector<TokenIds> preds, refs;
  for (std::size_t i = 0; i < records.size(); ++i) {
    preds.push_back(with_record_index(i, [&] { return infer(pipeline, records[i].doc, mode).target; }));
    refs.push_back(records[i].summary_tgt);
  }
  return evaluate_predictions(preds, refs, vocab, Language::Target);
}

TokenIds direct_generate(const Seq2SeqModel<float>& model, const TokenIds& src, int lang_tag) {
  NoGradScope<float> no_grad;
  auto decoded = model.greedy_decode(src, lang_tag, static_cast<std::size_t>(model.config().max_tgt_len));
  TokenIds out{lang_tag};
  out.insert(out.end(), decoded.tokens.begin(), decoded.tokens.end());
  return out;
}

MetricReport evaluate_direct(const Seq2SeqModel<float>& model, const std::vector<XlsRecord>& records,
                             const Vocab& vocab, DirectTarget target) {
  const bool summary = target == DirectTarget::Summary;
  const int tag = summary ? vocab::kLangSrc : vocab::kLangTgt;
  std::vector<TokenIds> preds, refs;
  for (std::size_t i = 0; i < records.size(); ++i) {
    preds.push_back(with_record_index(i, [&] { return direct_generate(model, records[i].doc, tag); }));
    refs.push_back(summary ? records[i].summary_src : records[i].summary_tgt);
  }
  return evaluate_predictions(preds, refs, vocab, summary ? Language::Source : Language::Target);
}

TimingResult time_inference(const std::function<void(const XlsRecord&)>& generate,
                            const std::vector<XlsRecord>& records, int repetitions) {
  if (records.empty()) throw ContractError("time_inference: no records to time");
  if (repetitions < 1) throw ContractError("time_inference: repetitions must be >= 1");
  using clock = std::chrono::steady_clock;
  for (const auto& r : records) generate(r);  // warm-up
  std::vector<double> per_rep;
  for (int rep = 0; rep < repetitions; ++rep) {
    clock::duration total{};
    for (const auto& r : records) {
      const auto t0 = clock::now();
      generate(r);
      total += clock::now() - t0;
    }
    per_rep.push_back(std::chrono::duration<double>(total).count() / static_cast<double>(records.size()));
  }
  TimingResult t;
  t.n_samples = records.size();
  t.repetitions = repetitions;
  for (double v : per_rep) t.mean_s += v;
  t.mean_s /= repetitions;
  for (double v : per_rep) t.variance_s2 += (v - t.mean_s) * (v - t.mean_s);
  t.variance_s2 /= repetitions;
  return t;
}

TimingResult time_pipeline(const SumTraPipeline<float>& pipeline, const std::vector<XlsRecord>& records,
                           int repetitions, InferenceMode mode) {
  return time_inference([&](const XlsRecord& r) { infer(pipeline, r.doc, mode); }, records, repetitions);
}

TimingResult time_direct(const Seq2SeqModel<float>& model, const std::vector<XlsRecord>& records, int repetitions) {
  return time_inference([&](const XlsRecord& r) { direct_generate(model, r.doc, vocab::kLangTgt); }, records,
                        repetitions);
}

}  // namespace softpipe
