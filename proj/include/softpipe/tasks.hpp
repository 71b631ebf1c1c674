#pragma once

// Synthetic "cross-lingual" summarization tasks with exact oracles.
//
// A document is BOS, n (marker, content) pairs, EOS. Summarising keeps the
// content tokens marked KEEP; translating maps each source content token t to
// t + C and optionally reverses the order.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "softpipe/tensor.hpp"

namespace softpipe {

namespace vocab {
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kSep = 3;
inline constexpr int kLangSrc = 4;
inline constexpr int kLangTgt = 5;
inline constexpr int kKeep = 6;
inline constexpr int kDrop = 7;
inline constexpr int kFirstContent = 8;
}  // namespace vocab

enum class Language { Source, Target };

struct Vocab {
  int content_size = 32;

  int size() const { return vocab::kFirstContent + 2 * content_size; }
  int src_begin() const { return vocab::kFirstContent; }
  int src_end() const { return vocab::kFirstContent + content_size; }
  int tgt_begin() const { return src_end(); }
  int tgt_end() const { return vocab::kFirstContent + 2 * content_size; }
  bool is_src_content(int t) const { return t >= src_begin() && t < src_end(); }
  bool is_tgt_content(int t) const { return t >= tgt_begin() && t < tgt_end(); }
  bool is_content(int t) const { return t >= src_begin() && t < tgt_end(); }
  int lang_tag(Language l) const { return l == Language::Source ? vocab::kLangSrc : vocab::kLangTgt; }
};

// Content tokens only; specials, language tags and markers removed.
TokenIds strip_specials(const TokenIds& tokens);

enum class ReorderRule { None, Reverse };
enum class StyleVariant { A, B };

struct ToyTaskSpec {
  int content_size = 32;
  int n_pairs = 8;
  double keep_probability = 0.5;
  ReorderRule reorder = ReorderRule::Reverse;
  StyleVariant style = StyleVariant::A;
  std::uint64_t seed = 20240101;
  std::size_t n_train = 5000;
  std::size_t n_val = 500;
  std::size_t n_test = 500;

  Vocab vocab() const { return Vocab{content_size}; }
  int translation_offset() const { return content_size; }
  std::size_t document_length() const { return static_cast<std::size_t>(2 * n_pairs + 2); }
  // Longest oracle summary counted as decoded tokens (content plus EOS).
  std::size_t max_summary_tokens() const { return static_cast<std::size_t>(n_pairs) + 1; }
  void validate(std::size_t max_src_len = 0) const;
};

void to_json(nlohmann::json& j, const ToyTaskSpec& s);
void from_json(const nlohmann::json& j, ToyTaskSpec& s);
const char* to_string(StyleVariant s);
const char* to_string(ReorderRule r);

enum class Split { Train, Val, Test };
const char* to_string(Split s);
Split split_from_string(const std::string& s);

struct XlsRecord {
  TokenIds doc;
  TokenIds summary_src;
  TokenIds summary_tgt;
  std::optional<TokenIds> backtranslation;
  Split split = Split::Train;

  bool operator==(const XlsRecord&) const = default;
};

struct Dataset {
  std::vector<XlsRecord> train, val, test;

  std::vector<XlsRecord> all() const;
  bool operator==(const Dataset&) const = default;
};

TokenIds gen_document(const ToyTaskSpec& spec, std::mt19937_64& rng);
TokenIds summarize_oracle(const ToyTaskSpec& spec, const TokenIds& doc);
TokenIds translate_oracle(const ToyTaskSpec& spec, const TokenIds& summary_src);
TokenIds inverse_translate_oracle(const ToyTaskSpec& spec, const TokenIds& summary_tgt);
Dataset gen_dataset(const ToyTaskSpec& spec, std::size_t n_train, std::size_t n_val, std::size_t n_test);
inline Dataset gen_dataset(const ToyTaskSpec& spec) {
  return gen_dataset(spec, spec.n_train, spec.n_val, spec.n_test);
}

// One JSON object per line with fields doc, summary_src, summary_tgt,
// backtranslation (nullable) and split.
nlohmann::ordered_json record_to_json(const XlsRecord& r);
XlsRecord record_from_json(const nlohmann::json& j);
void write_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset read_dataset(const std::filesystem::path& path);

}  // namespace softpipe
