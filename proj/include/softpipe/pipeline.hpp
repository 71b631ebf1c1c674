#pragma once

// Summarize-then-translate pipeline coupled through expected embeddings.
//
// The summarizer decodes greedily; each step's probability vector p_j is
// mapped to e_j = E p_j with the translator's embedding table E, and the
// sequence of e_j enters the translator's encoder in place of token
// embeddings. Gradients of the translator loss therefore reach both models.

#include <filesystem>
#include <string>
#include <vector>

#include "softpipe/model.hpp"
#include "softpipe/tasks.hpp"

namespace softpipe {

inline constexpr double kDefaultAlpha = 0.99;

template <typename T>
struct SoftSummary {
  TokenIds tokens;                             // hard greedy choices s_1..s_m
  std::vector<Tensor<T>> prob_vectors;         // p_j, each [V]
  std::vector<Tensor<T>> expected_embeddings;  // e_j, each [D]
  StopReason stop_reason = StopReason::MaxLength;
};

struct LossBreakdown {
  double nll = 0.0;      // translator NLL of the target reference
  double nll_sum = 0.0;  // summarizer NLL of the back-translated reference
  double combined = 0.0;
  double alpha = kDefaultAlpha;

  // min(nll, nll_sum) <= combined <= max(nll, nll_sum), all non-negative.
  bool within_bounds(double tol = 1e-5) const;
};

enum class InferenceMode { Hard, Soft };
const char* to_string(InferenceMode m);
InferenceMode inference_mode_from_string(const std::string& s);

template <typename T>
class SumTraPipeline {
 public:
  SumTraPipeline(Seq2SeqModel<T> summarizer, Seq2SeqModel<T> translator, std::size_t summary_max_len,
                 double alpha = kDefaultAlpha);

  Seq2SeqModel<T>& summarizer() { return sum_; }
  const Seq2SeqModel<T>& summarizer() const { return sum_; }
  Seq2SeqModel<T>& translator() { return tra_; }
  const Seq2SeqModel<T>& translator() const { return tra_; }

  std::size_t summary_max_len() const { return summary_max_len_; }
  double alpha() const { return alpha_; }
  void set_alpha(double alpha);
  void set_training(bool on);
  std::size_t vocab_size() const { return static_cast<std::size_t>(sum_.config().vocab_size); }

 private:
  Seq2SeqModel<T> sum_;
  Seq2SeqModel<T> tra_;
  std::size_t summary_max_len_;
  double alpha_;
};

// e_j = E p_j for each probability vector; E is [D x V].
template <typename T>
std::vector<Tensor<T>> expected_embeddings(const std::vector<Tensor<T>>& prob_vectors, const Tensor<T>& table);

template <typename T>
struct XlsForward {
  Tensor<T> nll;
  SoftSummary<T> soft;
};

// Free-running summarizer decode of x, soft coupling, teacher-forced
// translator NLL of y (token mean).
template <typename T>
XlsForward<T> xls_forward(const SumTraPipeline<T>& pipeline, const TokenIds& x, const TokenIds& y);

// Teacher-forced summarizer NLL of the back-translated reference.
template <typename T>
Tensor<T> backtranslation_loss(const SumTraPipeline<T>& pipeline, const TokenIds& x, const TokenIds& y_hat);

// alpha * nll_sum + (1 - alpha) * nll. An operand whose weight is exactly
// zero receives no gradient at all.
template <typename T>
Tensor<T> mixed_loss(const Tensor<T>& nll_sum, const Tensor<T>& nll, double alpha);

template <typename T>
struct PipelineLoss {
  Tensor<T> combined;
  LossBreakdown breakdown;
  SoftSummary<T> soft;
};

// Both losses of one record sharing a single summarizer encoding. `y_hat`
// may be null only when alpha == 0.
template <typename T>
PipelineLoss<T> pipeline_loss(const SumTraPipeline<T>& pipeline, const TokenIds& x, const TokenIds& y,
                              const TokenIds* y_hat);

struct InferenceResult {
  TokenIds target;   // LANG_TGT followed by the translator's greedy tokens
  TokenIds summary;  // LANG_SRC followed by the summarizer's greedy tokens
};

template <typename T>
InferenceResult infer(const SumTraPipeline<T>& pipeline, const TokenIds& x, InferenceMode mode = InferenceMode::Hard);

// Pipeline checkpoint: SOFTPIPE1 magic, JSON header naming the "sum" and
// "tra" parts, then the two model checkpoints back to back.
void save_pipeline(SumTraPipeline<float>& pipeline, const std::filesystem::path& path);
SumTraPipeline<float> load_pipeline(const std::filesystem::path& path);
// Raw bytes of one named part ("sum" or "tra").
std::string pipeline_part_bytes(const std::filesystem::path& path, const std::string& part);

}  // namespace softpipe
