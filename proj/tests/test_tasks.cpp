#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <set>

#include "softpipe/tasks.hpp"

using namespace softpipe;
using namespace softpipe::vocab;

TEST_CASE("vocabulary layout") {
  Vocab v{32};
  CHECK(v.size() == 72);
  CHECK(v.src_begin() == 8);
  CHECK(v.src_end() == 40);
  CHECK(v.tgt_begin() == 40);
  CHECK(v.tgt_end() == 72);
  CHECK(strip_specials({kLangSrc, 9, kEos, 41, kPad}) == TokenIds{9, 41});
}

TEST_CASE("spec validation") {
  ToyTaskSpec s;
  CHECK_NOTHROW(s.validate(64));
  s.n_pairs = 1;
  CHECK_THROWS_AS(s.validate(), ContractError);
  s.n_pairs = 31;
  CHECK_THROWS_AS(s.validate(), ContractError);
  s = ToyTaskSpec{};
  s.keep_probability = 1.0;
  CHECK_THROWS_AS(s.validate(), ContractError);
  s = ToyTaskSpec{};
  s.n_pairs = 30;
  CHECK_THROWS_AS(s.validate(40), ContractError);
}

TEST_CASE("gen_document structure, limit case, determinism") {
  ToyTaskSpec s;
  s.keep_probability = 1.0 - 1e-12;
  std::mt19937_64 rng(1);
  const auto doc = gen_document(s, rng);
  REQUIRE(doc.size() == s.document_length());
  CHECK(doc.front() == kBos);
  CHECK(doc.back() == kEos);
  for (std::size_t i = 1; i + 1 < doc.size(); i += 2) {
    CHECK(doc[i] == kKeep);
    CHECK(s.vocab().is_src_content(doc[i + 1]));
  }
  std::mt19937_64 a(42), b(42);
  CHECK(gen_document(ToyTaskSpec{}, a) == gen_document(ToyTaskSpec{}, b));
}

TEST_CASE("KEEP fraction matches keep_probability") {
  ToyTaskSpec s;
  s.keep_probability = 0.4;
  std::mt19937_64 rng(7);
  std::size_t keep = 0, total = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto doc = gen_document(s, rng);
    for (std::size_t j = 1; j + 1 < doc.size(); j += 2) {
      keep += doc[j] == kKeep;
      ++total;
    }
  }
  CHECK(std::abs(static_cast<double>(keep) / static_cast<double>(total) - 0.4) <= 0.02);
}

TEST_CASE("generator never emits an all-DROP document") {
  ToyTaskSpec s;
  s.n_pairs = 2;
  s.keep_probability = 0.05;
  std::mt19937_64 rng(3);
  for (int i = 0; i < 2000; ++i) {
    const auto summary = summarize_oracle(s, gen_document(s, rng));
    CHECK(summary.size() >= 3);
  }
}

TEST_CASE("summarize_oracle examples") {
  ToyTaskSpec a;
  const TokenIds doc{kBos, kKeep, 10, kDrop, 11, kKeep, 12, kEos};
  CHECK(summarize_oracle(a, doc) == TokenIds{kLangSrc, 10, 12, kEos});
  ToyTaskSpec b;
  b.style = StyleVariant::B;
  CHECK(summarize_oracle(b, doc) == TokenIds{kLangSrc, 12, 10, kEos});
  CHECK_THROWS_AS(summarize_oracle(a, TokenIds{kBos, kKeep, 10, 11, kEos}), FormatError);
  CHECK_THROWS_AS(summarize_oracle(a, TokenIds{kKeep, 10, kEos}), FormatError);
  CHECK_THROWS_AS(summarize_oracle(a, TokenIds{kBos, kSep, 10, kEos}), FormatError);
}

TEST_CASE("translate_oracle examples and range errors") {
  ToyTaskSpec none;
  none.reorder = ReorderRule::None;
  CHECK(translate_oracle(none, {kLangSrc, 10, 12, kEos}) == TokenIds{kLangTgt, 42, 44, kEos});
  ToyTaskSpec rev;
  CHECK(translate_oracle(rev, {kLangSrc, 10, 12, kEos}) == TokenIds{kLangTgt, 44, 42, kEos});
  CHECK_THROWS_AS(translate_oracle(rev, {kLangSrc, 50, kEos}), RangeError);
  CHECK_THROWS_AS(inverse_translate_oracle(rev, {kLangTgt, 10, kEos}), RangeError);
}

TEST_CASE("translation round trip over 1000 random summaries") {
  for (auto rule : {ReorderRule::None, ReorderRule::Reverse}) {
    ToyTaskSpec s;
    s.reorder = rule;
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<int> tok(s.vocab().src_begin(), s.vocab().src_end() - 1);
    std::uniform_int_distribution<int> len(1, s.n_pairs);
    for (int i = 0; i < 1000; ++i) {
      TokenIds sum{kLangSrc};
      for (int j = len(rng); j > 0; --j) sum.push_back(tok(rng));
      sum.push_back(kEos);
      CHECK(inverse_translate_oracle(s, translate_oracle(s, sum)) == sum);
    }
  }
}

TEST_CASE("gen_dataset: empty, deterministic, oracle-consistent, pure") {
  ToyTaskSpec s;
  const auto empty = gen_dataset(s, 0, 0, 0);
  CHECK(empty.train.empty());
  CHECK(empty.val.empty());
  CHECK(empty.test.empty());

  const auto a = gen_dataset(s, 300, 50, 50), b = gen_dataset(s, 300, 50, 50);
  CHECK(a == b);
  const Vocab v = s.vocab();
  for (const auto& r : a.all()) {
    CHECK(r.summary_src == summarize_oracle(s, r.doc));
    CHECK(r.summary_tgt == translate_oracle(s, r.summary_src));
    CHECK_FALSE(r.backtranslation.has_value());
    CHECK(r.summary_src.front() == kLangSrc);
    CHECK(r.summary_tgt.front() == kLangTgt);
    for (std::size_t i = 1; i + 1 < r.summary_src.size(); ++i) CHECK(v.is_src_content(r.summary_src[i]));
    for (std::size_t i = 1; i + 1 < r.summary_tgt.size(); ++i) CHECK(v.is_tgt_content(r.summary_tgt[i]));
    CHECK(r.summary_src.back() == kEos);
    CHECK(r.summary_tgt.back() == kEos);
  }
  for (const auto& r : a.train) CHECK(r.split == Split::Train);
  for (const auto& r : a.test) CHECK(r.split == Split::Test);
}

TEST_CASE("default-size splits share no documents across seeds") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    ToyTaskSpec s;
    s.seed = seed;
    const auto d = gen_dataset(s);
    CHECK(d.train.size() == 5000);
    CHECK(d.val.size() == 500);
    CHECK(d.test.size() == 500);
    std::set<TokenIds> train;
    for (const auto& r : d.train) train.insert(r.doc);
    std::set<TokenIds> val;
    for (const auto& r : d.val) {
      CHECK(train.count(r.doc) == 0);
      val.insert(r.doc);
    }
    for (const auto& r : d.test) CHECK((train.count(r.doc) == 0 && val.count(r.doc) == 0));
  }
}

TEST_CASE("dataset file round trip") {
  ToyTaskSpec s;
  auto d = gen_dataset(s, 20, 5, 5);
  d.train[0].backtranslation = TokenIds{kLangSrc, 9, kEos};
  const auto path = std::filesystem::temp_directory_path() / "softpipe_test_tasks.jsonl";
  write_dataset(path, d);
  CHECK(read_dataset(path) == d);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(record_from_json(nlohmann::json{{"doc", {1, 2}}}), FormatError);
  CHECK_THROWS_AS(split_from_string("dev"), FormatError);
}
