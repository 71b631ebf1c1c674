#pragma once

// Compact pre-norm encoder-decoder transformer with a tied embedding table.
//
// The embedding table E is stored as [d_model x vocab]: column v is the
// embedding of token v. It feeds the encoder and decoder inputs and, through
// its transpose, the output projection.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "softpipe/tensor.hpp"

namespace softpipe {

struct ModelConfig {
  int vocab_size = 72;
  int d_model = 64;
  int n_heads = 4;
  int n_layers_enc = 2;
  int n_layers_dec = 2;
  int ffn_dim = 128;
  int max_src_len = 64;
  int max_tgt_len = 16;
  double dropout = 0.0;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

enum class StopReason { Eos, MaxLength };
const char* to_string(StopReason r);

template <typename T>
struct GreedyDecodeResult {
  TokenIds tokens;                      // s_1..s_m, including a final EOS if emitted
  std::vector<Tensor<T>> prob_vectors;  // p_1..p_m, each [V]
  StopReason stop_reason = StopReason::MaxLength;
};

template <typename T>
struct EncoderOutput {
  Tensor<T> states;  // [len x D]
  bool truncated = false;
};

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in x out]
  Tensor<T> bias;    // [out]
};

template <typename T>
struct Norm {
  Tensor<T> gain;
  Tensor<T> bias;
};

template <typename T>
struct Attention {
  Linear<T> query, key, value, output;
};

template <typename T>
struct EncoderLayer {
  Norm<T> norm_attn;
  Attention<T> self_attn;
  Norm<T> norm_ffn;
  Linear<T> ffn_in, ffn_out;
};

template <typename T>
struct DecoderLayer {
  Norm<T> norm_self;
  Attention<T> self_attn;
  Norm<T> norm_cross;
  Attention<T> cross_attn;
  Norm<T> norm_ffn;
  Linear<T> ffn_in, ffn_out;
};

// Cross-attention keys and values for each decoder layer, computed once per
// encoded source.
template <typename T>
struct DecoderMemory {
  std::vector<Tensor<T>> keys;
  std::vector<Tensor<T>> values;
};

template <typename T>
class Seq2SeqModel {
 public:
  using ParamVisitor = std::function<void(const std::string&, Tensor<T>&)>;

  Seq2SeqModel(ModelConfig config, std::uint64_t seed);
  Seq2SeqModel(Seq2SeqModel&&) noexcept = default;
  Seq2SeqModel& operator=(Seq2SeqModel&&) noexcept = default;
  Seq2SeqModel(const Seq2SeqModel&) = delete;
  Seq2SeqModel& operator=(const Seq2SeqModel&) = delete;

  // Deep copy of configuration and parameter values; gradients are dropped.
  Seq2SeqModel clone() const;

  const ModelConfig& config() const { return config_; }
  Tensor<T>& embedding() { return embedding_; }
  const Tensor<T>& embedding() const { return embedding_; }
  Tensor<T>& output_bias() { return output_bias_; }

  // Deterministic order; names are unique.
  void visit_parameters(const ParamVisitor& fn);
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters();
  std::size_t parameter_count();
  void set_trainable(bool on);
  void zero_grad();

  void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }
  void reseed_dropout(std::uint64_t seed) { dropout_rng_.seed(seed); }

  // Token embeddings [len x D] (columns of E).
  Tensor<T> embed(const TokenIds& tokens) const;

  EncoderOutput<T> encode(const TokenIds& src) const;
  // Encoder entry that skips the token lookup; `embeddings` is [len x D].
  EncoderOutput<T> encode_embeddings(const Tensor<T>& embeddings) const;

  DecoderMemory<T> memory(const Tensor<T>& encoder_states) const;

  // Log-probabilities [T x V]; row t predicts tgt[t] from BOS, tgt[0..t-1].
  Tensor<T> forward_teacher_forced(const TokenIds& src, const TokenIds& tgt, int lang_tag) const;
  Tensor<T> forward_teacher_forced(const Tensor<T>& src_embeddings, const TokenIds& tgt, int lang_tag) const;
  Tensor<T> decode_teacher_forced(const DecoderMemory<T>& mem, const TokenIds& tgt, int lang_tag) const;

  // Free-running decode that starts from BOS, lang_tag. Probability vectors
  // keep their tape history when a tape is active.
  GreedyDecodeResult<T> greedy_decode(const TokenIds& src, int lang_tag, std::size_t max_len) const;
  GreedyDecodeResult<T> greedy_decode(const Tensor<T>& src_embeddings, int lang_tag, std::size_t max_len) const;
  GreedyDecodeResult<T> decode_greedy(const DecoderMemory<T>& mem, int lang_tag, std::size_t max_len) const;

 private:
  Tensor<T> encoder_stack(Tensor<T> x) const;
  Tensor<T> decoder_stack(const DecoderMemory<T>& mem, const TokenIds& inputs) const;
  Tensor<T> add_positions(const Tensor<T>& embeddings) const;
  Tensor<T> attend(const Attention<T>& attn, const Tensor<T>& queries, const Tensor<T>& keys,
                   const Tensor<T>& values, bool causal) const;
  Tensor<T> linear(const Linear<T>& l, const Tensor<T>& x) const;
  Tensor<T> norm(const Norm<T>& n, const Tensor<T>& x) const;
  Tensor<T> maybe_dropout(const Tensor<T>& x) const;

  ModelConfig config_;
  Tensor<T> embedding_;
  Tensor<T> output_bias_;
  std::vector<EncoderLayer<T>> encoder_;
  Norm<T> encoder_norm_;
  std::vector<DecoderLayer<T>> decoder_;
  Norm<T> decoder_norm_;
  std::vector<T> positions_;  // sinusoidal table, [max_positions x D]
  std::size_t max_positions_ = 0;
  bool training_ = false;
  mutable std::mt19937_64 dropout_rng_;
};

// Returns the token with the largest probability; ties go to the lowest id.
template <typename T>
int argmax_token(std::span<const T> probs);

// Token-mean NLL of `tgt` under teacher-forced log-probabilities. Row 0
// (predicting the forced language tag) is excluded.
template <typename T>
Tensor<T> sequence_nll(const Tensor<T>& log_probs, const TokenIds& tgt);

// Fraction of rows in tgt[1..] whose argmax equals the target, with the count.
template <typename T>
std::pair<std::size_t, std::size_t> teacher_forced_hits(const Tensor<T>& log_probs, const TokenIds& tgt);

// ---- checkpoints ----------------------------------------------------------

inline constexpr const char* kCheckpointMagic = "SOFTPIPE1";
inline constexpr int kCheckpointVersion = 1;

// Serialised form: magic line, 8-byte little-endian header length, JSON
// header (kind, version, config, parameter table), then each parameter as
// little-endian float32 values in declared order.
// Magic line, 8-byte little-endian header length, JSON header text.
std::string write_framed_header(const nlohmann::json& header);
struct FramedHeader {
  nlohmann::json header;
  std::size_t payload_at = 0;
};
FramedHeader read_framed_header(const std::string& bytes);

std::string serialize_model(Seq2SeqModel<float>& model);
Seq2SeqModel<float> deserialize_model(const std::string& bytes, const ModelConfig* expected = nullptr);

void save_checkpoint(Seq2SeqModel<float>& model, const std::filesystem::path& path);
Seq2SeqModel<float> load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);
// 64-bit FNV-1a, used for checkpoint and config fingerprints.
std::uint64_t fingerprint(std::string_view bytes);
std::string hex64(std::uint64_t v);

}  // namespace softpipe
