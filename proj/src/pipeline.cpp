#include "softpipe/pipeline.hpp"

#include <algorithm>
#include <cmath>

namespace softpipe {

bool LossBreakdown::within_bounds(double tol) const {
  const double lo = std::min(nll, nll_sum);
  const double hi = std::max(nll, nll_sum);
  const double slack = tol * std::max(1.0, std::abs(combined));
  return nll >= 0.0 && nll_sum >= 0.0 && combined >= -slack && combined >= lo - slack && combined <= hi + slack;
}

const char* to_string(InferenceMode m) { return m == InferenceMode::Hard ? "hard" : "soft"; }

InferenceMode inference_mode_from_string(const std::string& s) {
  if (s == "hard") return InferenceMode::Hard;
  if (s == "soft") return InferenceMode::Soft;
  throw ContractError("inference mode must be hard|soft, got '" + s + "'");
}

namespace {

void check_alpha(double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ContractError("alpha must lie in [0, 1], got " + std::to_string(alpha));
  }
}

bool has_content(const TokenIds& tokens) { return !tokens.empty() && tokens.front() != vocab::kEos; }

// Translator input rows: the source language tag, then one row per summary step.
template <typename T>
Tensor<T> soft_translator_input(const Seq2SeqModel<T>& tra, const std::vector<Tensor<T>>& expected) {
  const std::size_t d = static_cast<std::size_t>(tra.config().d_model);
  std::vector<Tensor<T>> rows;
  rows.reserve(expected.size() + 1);
  rows.push_back(tra.embed({vocab::kLangSrc}));
  for (const auto& e : expected) rows.push_back(reshape(e, {1, d}));
  return concatenate(rows, 0);
}

}  // namespace

template <typename T>
SumTraPipeline<T>::SumTraPipeline(Seq2SeqModel<T> summarizer, Seq2SeqModel<T> translator,
                                  std::size_t summary_max_len, double alpha)
    : sum_(std::move(summarizer)), tra_(std::move(translator)), summary_max_len_(summary_max_len), alpha_(alpha) {
  if (sum_.config().vocab_size != tra_.config().vocab_size) {
    throw ContractError("pipeline: summarizer and translator must share one vocabulary (" +
                        std::to_string(sum_.config().vocab_size) + " vs " +
                        std::to_string(tra_.config().vocab_size) + ")");
  }
  if (sum_.config().d_model != tra_.config().d_model) {
    throw ContractError("pipeline: summarizer and translator d_model differ");
  }
  if (summary_max_len_ == 0) throw ContractError("pipeline: summary_max_len must be >= 1");
  check_alpha(alpha_);
}

template <typename T>
void SumTraPipeline<T>::set_alpha(double alpha) {
  check_alpha(alpha);
  alpha_ = alpha;
}

template <typename T>
void SumTraPipeline<T>::set_training(bool on) {
  sum_.set_training(on);
  tra_.set_training(on);
}

template <typename T>
std::vector<Tensor<T>> expected_embeddings(const std::vector<Tensor<T>>& prob_vectors, const Tensor<T>& table) {
  const double tol = sizeof(T) == sizeof(float) ? 1e-5 : 1e-6;
  std::vector<Tensor<T>> out;
  out.reserve(prob_vectors.size());
  for (std::size_t j = 0; j < prob_vectors.size(); ++j) {
    const Tensor<T>& p = prob_vectors[j];
    if (p.rank() != 1 || table.rank() != 2 || p.dim(0) != table.dim(1)) {
      throw DimensionError("expected_embeddings: probability vector " + shape_str(p.shape()) +
                           " does not match embedding table " + shape_str(table.shape()));
    }
    double total = 0.0;
    for (T v : p.data()) total += static_cast<double>(v);
    if (std::abs(total - 1.0) > tol) {
      throw ContractError("expected_embeddings: probability vector " + std::to_string(j) + " sums to " +
                          std::to_string(total));
    }
    out.push_back(matmul(table, p));
  }
  return out;
}

template <typename T>
Tensor<T> mixed_loss(const Tensor<T>& nll_sum, const Tensor<T>& nll, double alpha) {
  check_alpha(alpha);
  if (nll_sum.numel() != 1 || nll.numel() != 1) throw ContractError("mixed_loss: operands must be scalars");
  const T a = static_cast<T>(alpha);
  const T b = static_cast<T>(1.0 - alpha);
  const T value = a * nll_sum.item() + b * nll.item();
  return make_result<T>({}, {value}, {nll_sum, nll}, [a, b](TensorNode<T>& out) {
    TensorNode<T>& sum_node = *out.inputs[0];
    TensorNode<T>& xls_node = *out.inputs[1];
    if (a != T(0) && sum_node.requires_grad) sum_node.grad_buffer()[0] += a * out.grad[0];
    if (b != T(0) && xls_node.requires_grad) xls_node.grad_buffer()[0] += b * out.grad[0];
  });
}

namespace {

template <typename T>
SoftSummary<T> soft_summary(const SumTraPipeline<T>& pipeline, const DecoderMemory<T>& sum_memory) {
  GreedyDecodeResult<T> greedy =
      pipeline.summarizer().decode_greedy(sum_memory, vocab::kLangSrc, pipeline.summary_max_len());
  SoftSummary<T> soft;
  soft.tokens = std::move(greedy.tokens);
  soft.prob_vectors = std::move(greedy.prob_vectors);
  soft.stop_reason = greedy.stop_reason;
  return soft;
}

template <typename T>
Tensor<T> soft_nll(const SumTraPipeline<T>& pipeline, SoftSummary<T>& soft, const TokenIds& y) {
  if (!has_content(soft.tokens)) {
    throw DegenerateSummaryError("xls_forward: summarizer emitted EOS before any content token");
  }
  soft.expected_embeddings = expected_embeddings(soft.prob_vectors, pipeline.translator().embedding());
  const Tensor<T> input = soft_translator_input(pipeline.translator(), soft.expected_embeddings);
  return sequence_nll(pipeline.translator().forward_teacher_forced(input, y, vocab::kLangTgt), y);
}

void check_target(const TokenIds& y) {
  if (y.empty() || y.front() != vocab::kLangTgt) {
    throw ContractError("xls_forward: reference must begin with the target language tag");
  }
}

}  // namespace

template <typename T>
XlsForward<T> xls_forward(const SumTraPipeline<T>& pipeline, const TokenIds& x, const TokenIds& y) {
  check_target(y);
  const auto& sum = pipeline.summarizer();
  XlsForward<T> out;
  out.soft = soft_summary(pipeline, sum.memory(sum.encode(x).states));
  out.nll = soft_nll(pipeline, out.soft, y);
  return out;
}

template <typename T>
Tensor<T> backtranslation_loss(const SumTraPipeline<T>& pipeline, const TokenIds& x, const TokenIds& y_hat) {
  return sequence_nll(pipeline.summarizer().forward_teacher_forced(x, y_hat, vocab::kLangSrc), y_hat);
}

template <typename T>
PipelineLoss<T> pipeline_loss(const SumTraPipeline<T>& pipeline, const TokenIds& x, const TokenIds& y,
                              const TokenIds* y_hat) {
  check_target(y);
  const double alpha = pipeline.alpha();
  if (alpha > 0.0 && !y_hat) {
    throw ContractError("pipeline_loss: alpha > 0 requires a back-translated reference; run backtranslate first");
  }
  const auto& sum = pipeline.summarizer();
  const DecoderMemory<T> memory = sum.memory(sum.encode(x).states);
  PipelineLoss<T> out;
  out.soft = soft_summary(pipeline, memory);
  const Tensor<T> nll = soft_nll(pipeline, out.soft, y);
  const Tensor<T> nll_sum = y_hat ? sequence_nll(sum.decode_teacher_forced(memory, *y_hat, vocab::kLangSrc), *y_hat)
                                  : Tensor<T>::scalar(T(0));
  out.combined = mixed_loss(nll_sum, nll, alpha);
  out.breakdown.nll = static_cast<double>(nll.item());
  out.breakdown.nll_sum = static_cast<double>(nll_sum.item());
  out.breakdown.combined = static_cast<double>(out.combined.item());
  out.breakdown.alpha = alpha;
  return out;
}

template <typename T>
InferenceResult infer(const SumTraPipeline<T>& pipeline, const TokenIds& x, InferenceMode mode) {
  NoGradScope<T> no_grad;
  const auto& sum = pipeline.summarizer();
  const auto& tra = pipeline.translator();
  GreedyDecodeResult<T> summary = sum.greedy_decode(x, vocab::kLangSrc, pipeline.summary_max_len());
  InferenceResult out;
  out.summary.push_back(vocab::kLangSrc);
  out.summary.insert(out.summary.end(), summary.tokens.begin(), summary.tokens.end());
  out.target.push_back(vocab::kLangTgt);
  if (!has_content(summary.tokens)) return out;
  const auto tra_len = static_cast<std::size_t>(tra.config().max_tgt_len);
  GreedyDecodeResult<T> translation =
      mode == InferenceMode::Hard
          ? tra.greedy_decode(out.summary, vocab::kLangTgt, tra_len)
          : tra.greedy_decode(soft_translator_input(tra, expected_embeddings(summary.prob_vectors, tra.embedding())),
                              vocab::kLangTgt, tra_len);
  out.target.insert(out.target.end(), translation.tokens.begin(), translation.tokens.end());
  return out;
}

// ---- pipeline checkpoints -----------------------------------------------------

void save_pipeline(SumTraPipeline<float>& pipeline, const std::filesystem::path& path) {
  const std::string sum = serialize_model(pipeline.summarizer());
  const std::string tra = serialize_model(pipeline.translator());
  const nlohmann::json header{{"kind", "pipeline"},
                              {"version", kCheckpointVersion},
                              {"alpha", pipeline.alpha()},
                              {"summary_max_len", pipeline.summary_max_len()},
                              {"parts", nlohmann::json::array({{{"name", "sum"}, {"bytes", sum.size()}},
                                                               {{"name", "tra"}, {"bytes", tra.size()}}})}};
  write_file(path, write_framed_header(header) + sum + tra);
}

namespace {

struct PipelineParts {
  nlohmann::json header;
  std::string sum, tra;
};

PipelineParts split_pipeline(const std::string& bytes) {
  const FramedHeader framed = read_framed_header(bytes);
  if (framed.header.value("kind", "") != "pipeline") throw FormatError("pipeline checkpoint: field 'kind' is not 'pipeline'");
  if (framed.header.value("version", -1) != kCheckpointVersion) {
    throw FormatError("pipeline checkpoint: unsupported field 'version'");
  }
  PipelineParts parts;
  parts.header = framed.header;
  std::size_t at = framed.payload_at;
  for (const auto& part : framed.header.at("parts")) {
    const auto n = part.at("bytes").get<std::size_t>();
    if (bytes.size() < at + n) throw FormatError("pipeline checkpoint: truncated part");
    const auto name = part.at("name").get<std::string>();
    if (name == "sum") parts.sum = bytes.substr(at, n);
    else if (name == "tra") parts.tra = bytes.substr(at, n);
    else throw FormatError("pipeline checkpoint: unknown part '" + name + "'");
    at += n;
  }
  if (parts.sum.empty() || parts.tra.empty()) throw FormatError("pipeline checkpoint: missing 'sum' or 'tra' part");
  if (at != bytes.size()) throw FormatError("pipeline checkpoint: trailing bytes");
  return parts;
}

}  // namespace

SumTraPipeline<float> load_pipeline(const std::filesystem::path& path) {
  PipelineParts parts = split_pipeline(read_file(path));
  return SumTraPipeline<float>(deserialize_model(parts.sum), deserialize_model(parts.tra),
                               parts.header.at("summary_max_len").get<std::size_t>(),
                               parts.header.at("alpha").get<double>());
}

std::string pipeline_part_bytes(const std::filesystem::path& path, const std::string& part) {
  PipelineParts parts = split_pipeline(read_file(path));
  if (part == "sum") return parts.sum;
  if (part == "tra") return parts.tra;
  throw ContractError("pipeline checkpoint: no part named '" + part + "'");
}

#define SOFTPIPE_INSTANTIATE(T)                                                                                   \
  template class SumTraPipeline<T>;                                                                               \
  template std::vector<Tensor<T>> expected_embeddings<T>(const std::vector<Tensor<T>>&, const Tensor<T>&);       \
  template XlsForward<T> xls_forward<T>(const SumTraPipeline<T>&, const TokenIds&, const TokenIds&);              \
  template Tensor<T> backtranslation_loss<T>(const SumTraPipeline<T>&, const TokenIds&, const TokenIds&);         \
  template Tensor<T> mixed_loss<T>(const Tensor<T>&, const Tensor<T>&, double);                                   \
  template PipelineLoss<T> pipeline_loss<T>(const SumTraPipeline<T>&, const TokenIds&, const TokenIds&,           \
                                            const TokenIds*);                                                     \
  template InferenceResult infer<T>(const SumTraPipeline<T>&, const TokenIds&, InferenceMode);

SOFTPIPE_INSTANTIATE(float)
SOFTPIPE_INSTANTIATE(double)

#undef SOFTPIPE_INSTANTIATE

}  // namespace softpipe
