#include "softpipe/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <set>

namespace softpipe {

TokenIds strip_specials(const TokenIds& tokens) {
  TokenIds out;
  for (int t : tokens) {
    if (t >= vocab::kFirstContent) out.push_back(t);
  }
  return out;
}

void ToyTaskSpec::validate(std::size_t max_src_len) const {
  if (content_size < 1) throw ContractError("task: content_size must be >= 1");
  if (n_pairs < 2 || n_pairs > 30) throw ContractError("task: n_pairs must be in [2, 30]");
  if (!(keep_probability > 0.0 && keep_probability < 1.0)) {
    throw ContractError("task: keep_probability must be in (0, 1)");
  }
  if (max_src_len && document_length() > max_src_len) {
    throw ContractError("task: documents of " + std::to_string(document_length()) +
                        " tokens exceed max_src_len " + std::to_string(max_src_len));
  }
}

const char* to_string(StyleVariant s) { return s == StyleVariant::A ? "A" : "B"; }
const char* to_string(ReorderRule r) { return r == ReorderRule::None ? "none" : "reverse"; }

void to_json(nlohmann::json& j, const ToyTaskSpec& s) {
  j = nlohmann::json{{"content_size", s.content_size},
                     {"n_pairs", s.n_pairs},
                     {"keep_probability", s.keep_probability},
                     {"reorder_rule", to_string(s.reorder)},
                     {"style_variant", to_string(s.style)},
                     {"seed", s.seed},
                     {"n_train", s.n_train},
                     {"n_val", s.n_val},
                     {"n_test", s.n_test}};
}

void from_json(const nlohmann::json& j, ToyTaskSpec& s) {
  for (const auto& [key, value] : j.items()) {
    if (key == "content_size") s.content_size = value.get<int>();
    else if (key == "n_pairs") s.n_pairs = value.get<int>();
    else if (key == "keep_probability") s.keep_probability = value.get<double>();
    else if (key == "reorder_rule") {
      const auto v = value.get<std::string>();
      if (v == "none") s.reorder = ReorderRule::None;
      else if (v == "reverse") s.reorder = ReorderRule::Reverse;
      else throw FormatError("task: reorder_rule must be none|reverse, got '" + v + "'");
    } else if (key == "style_variant") {
      const auto v = value.get<std::string>();
      if (v == "A") s.style = StyleVariant::A;
      else if (v == "B") s.style = StyleVariant::B;
      else throw FormatError("task: style_variant must be A|B, got '" + v + "'");
    } else if (key == "seed") s.seed = value.get<std::uint64_t>();
    else if (key == "n_train") s.n_train = value.get<std::size_t>();
    else if (key == "n_val") s.n_val = value.get<std::size_t>();
    else if (key == "n_test") s.n_test = value.get<std::size_t>();
    else throw FormatError("task: unknown key '" + key + "'");
  }
}

const char* to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw FormatError("dataset: unknown split '" + s + "'");
}

std::vector<XlsRecord> Dataset::all() const {
  std::vector<XlsRecord> out = train;
  out.insert(out.end(), val.begin(), val.end());
  out.insert(out.end(), test.begin(), test.end());
  return out;
}

TokenIds gen_document(const ToyTaskSpec& spec, std::mt19937_64& rng) {
  const Vocab v = spec.vocab();
  std::bernoulli_distribution keep(spec.keep_probability);
  std::uniform_int_distribution<int> content(v.src_begin(), v.src_end() - 1);
  std::vector<int> markers(static_cast<std::size_t>(spec.n_pairs));
  do {
    for (auto& m : markers) m = keep(rng) ? vocab::kKeep : vocab::kDrop;
  } while (std::none_of(markers.begin(), markers.end(), [](int m) { return m == vocab::kKeep; }));
  TokenIds doc{vocab::kBos};
  for (int m : markers) {
    doc.push_back(m);
    doc.push_back(content(rng));
  }
  doc.push_back(vocab::kEos);
  return doc;
}

TokenIds summarize_oracle(const ToyTaskSpec& spec, const TokenIds& doc) {
  const Vocab v = spec.vocab();
  if (doc.size() < 2 || doc.front() != vocab::kBos || doc.back() != vocab::kEos || doc.size() % 2 != 0) {
    throw FormatError("summarize_oracle: document is not BOS (marker, content)* EOS");
  }
  TokenIds kept;
  for (std::size_t i = 1; i + 1 < doc.size(); i += 2) {
    const int marker = doc[i];
    const int token = doc[i + 1];
    if ((marker != vocab::kKeep && marker != vocab::kDrop) || !v.is_src_content(token)) {
      throw FormatError("summarize_oracle: malformed pair at position " + std::to_string(i));
    }
    if (marker == vocab::kKeep) kept.push_back(token);
  }
  if (spec.style == StyleVariant::B) std::reverse(kept.begin(), kept.end());
  TokenIds out{vocab::kLangSrc};
  out.insert(out.end(), kept.begin(), kept.end());
  out.push_back(vocab::kEos);
  return out;
}

namespace {

// Content between an optional leading tag and an optional trailing EOS.
TokenIds unframe(const TokenIds& seq, int tag) {
  auto begin = seq.begin();
  auto end = seq.end();
  if (begin != end && *begin == tag) ++begin;
  if (begin != end && *(end - 1) == vocab::kEos) --end;
  return TokenIds(begin, end);
}

}  // namespace

TokenIds translate_oracle(const ToyTaskSpec& spec, const TokenIds& summary_src) {
  const Vocab v = spec.vocab();
  TokenIds body = unframe(summary_src, vocab::kLangSrc);
  for (std::size_t i = 0; i < body.size(); ++i) {
    if (!v.is_src_content(body[i])) {
      throw RangeError("translate_oracle: token " + std::to_string(body[i]) + " at position " +
                       std::to_string(i) + " is outside the source content range");
    }
    body[i] += spec.translation_offset();
  }
  if (spec.reorder == ReorderRule::Reverse) std::reverse(body.begin(), body.end());
  TokenIds out{vocab::kLangTgt};
  out.insert(out.end(), body.begin(), body.end());
  out.push_back(vocab::kEos);
  return out;
}

TokenIds inverse_translate_oracle(const ToyTaskSpec& spec, const TokenIds& summary_tgt) {
  const Vocab v = spec.vocab();
  TokenIds body = unframe(summary_tgt, vocab::kLangTgt);
  for (std::size_t i = 0; i < body.size(); ++i) {
    if (!v.is_tgt_content(body[i])) {
      throw RangeError("inverse_translate_oracle: token " + std::to_string(body[i]) + " at position " +
                       std::to_string(i) + " is outside the target content range");
    }
    body[i] -= spec.translation_offset();
  }
  if (spec.reorder == ReorderRule::Reverse) std::reverse(body.begin(), body.end());
  TokenIds out{vocab::kLangSrc};
  out.insert(out.end(), body.begin(), body.end());
  out.push_back(vocab::kEos);
  return out;
}

Dataset gen_dataset(const ToyTaskSpec& spec, std::size_t n_train, std::size_t n_val, std::size_t n_test) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::set<TokenIds> seen;
  Dataset data;
  auto make = [&](Split split, bool must_be_new) {
    // Held-out documents are redrawn until unseen; a task too small to allow
    // that is a contract violation rather than a silent overlap.
    for (int attempt = 0; attempt < 10000; ++attempt) {
      TokenIds doc = gen_document(spec, rng);
      if (must_be_new && seen.count(doc)) continue;
      seen.insert(doc);
      XlsRecord r;
      r.summary_src = summarize_oracle(spec, doc);
      r.summary_tgt = translate_oracle(spec, r.summary_src);
      r.doc = std::move(doc);
      r.split = split;
      return r;
    }
    throw ContractError("gen_dataset: task space too small for disjoint splits");
  };
  for (std::size_t i = 0; i < n_train; ++i) data.train.push_back(make(Split::Train, false));
  for (std::size_t i = 0; i < n_val; ++i) data.val.push_back(make(Split::Val, true));
  for (std::size_t i = 0; i < n_test; ++i) data.test.push_back(make(Split::Test, true));
  return data;
}

nlohmann::ordered_json record_to_json(const XlsRecord& r) {
  nlohmann::ordered_json j;
  j["doc"] = r.doc;
  j["summary_src"] = r.summary_src;
  j["summary_tgt"] = r.summary_tgt;
  j["backtranslation"] = r.backtranslation ? nlohmann::ordered_json(*r.backtranslation) : nlohmann::ordered_json();
  j["split"] = to_string(r.split);
  return j;
}

XlsRecord record_from_json(const nlohmann::json& j) {
  XlsRecord r;
  try {
    r.doc = j.at("doc").get<TokenIds>();
    r.summary_src = j.value("summary_src", TokenIds{});
    r.summary_tgt = j.value("summary_tgt", TokenIds{});
    if (j.contains("backtranslation") && !j.at("backtranslation").is_null()) {
      r.backtranslation = j.at("backtranslation").get<TokenIds>();
    }
    r.split = split_from_string(j.at("split").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset record: ") + e.what());
  }
  return r;
}

void write_dataset(const std::filesystem::path& path, const Dataset& data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  for (const auto* split : {&data.train, &data.val, &data.test}) {
    for (const auto& r : *split) out << record_to_json(r).dump() << '\n';
  }
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open dataset " + path.string());
  Dataset data;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    XlsRecord r = record_from_json(j);
    switch (r.split) {
      case Split::Train: data.train.push_back(std::move(r)); break;
      case Split::Val: data.val.push_back(std::move(r)); break;
      case Split::Test: data.test.push_back(std::move(r)); break;
    }
  }
  return data;
}

}  // namespace softpipe
