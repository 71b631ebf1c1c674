#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <thread>

#include "softpipe/gradcheck.hpp"
#include "softpipe/pipeline.hpp"

using namespace softpipe;
using namespace softpipe::vocab;
using TD = Tensor<double>;

namespace {

SumTraPipeline<double> tiny_pipeline(std::uint64_t seed, double alpha = 0.5) {
  const auto s = tiny_setup();
  SumTraPipeline<double> p(Seq2SeqModel<double>(s.model, seed), Seq2SeqModel<double>(s.model, seed + 1),
                           s.summary_max_len, alpha);
  p.summarizer().set_trainable(true);
  p.translator().set_trainable(true);
  return p;
}

std::vector<XlsRecord> tiny_records(std::size_t n) {
  return gen_dataset(tiny_setup().task, n, 0, 0).train;
}

bool all_zero(Seq2SeqModel<double>& m) {
  bool zero = true;
  m.visit_parameters([&](const std::string&, TD& p) {
    for (double g : p.grad()) zero = zero && g == 0.0;
  });
  return zero;
}

double grad_norm(Seq2SeqModel<double>& m) {
  double total = 0;
  m.visit_parameters([&](const std::string&, TD& p) {
    for (double g : p.grad()) total += g * g;
  });
  return std::sqrt(total);
}

// Makes every summarizer step emit `token` with probability exactly 1 in
// 64-bit arithmetic.
void force_token(Seq2SeqModel<double>& m, int token, double margin = 1e3) {
  m.output_bias().mutable_data()[static_cast<std::size_t>(token)] = margin;
}

}  // namespace

TEST_CASE("expected_embeddings examples") {
  TD table = TD::from({2, 3}, {1, 0, 2, 0, 1, 2});  // columns [1,0], [0,1], [2,2]
  auto e = expected_embeddings<double>({TD::from({3}, {0, 0, 1}), TD::from({3}, {0.5, 0.5, 0})}, table);
  REQUIRE(e.size() == 2);
  CHECK(e[0].at(0) == 2.0);
  CHECK(e[0].at(1) == 2.0);
  CHECK(e[1].at(0) == 0.5);
  CHECK(e[1].at(1) == 0.5);
  auto u = expected_embeddings<double>({TD::from({3}, {0.25, 0.25, 0.5})}, TD::from({2, 3}, {1, 3, 2, 0, 2, 1}));
  CHECK(u[0].at(0) == 2.0);
  CHECK(u[0].at(1) == 1.0);
  auto mean = expected_embeddings<double>({TD::full({3}, 1.0 / 3)}, table);
  CHECK(std::abs(mean[0].at(0) - 1.0) <= 1e-15);
  CHECK(std::abs(mean[0].at(1) - 1.0) <= 1e-15);
}

TEST_CASE("expected_embeddings errors") {
  TD table = TD::zeros({2, 3});
  CHECK_THROWS_AS(expected_embeddings<double>({TD::from({4}, {0.25, 0.25, 0.25, 0.25})}, table), DimensionError);
  CHECK_THROWS_AS(expected_embeddings<double>({TD::from({3}, {0.5, 0.5, 0.5})}, table), ContractError);
}

TEST_CASE("expected embeddings: brute-force product and convex hull") {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> n;
  std::gamma_distribution<double> g(0.3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> ev(5 * 7);
    for (auto& x : ev) x = n(rng);
    TD table = TD::from({5, 7}, ev);
    std::vector<double> pv(7);
    double total = 0;
    for (auto& x : pv) total += (x = g(rng) + 1e-12);
    for (auto& x : pv) x /= total;
    const TD e = expected_embeddings<double>({TD::from({7}, pv)}, table)[0];
    for (std::size_t d = 0; d < 5; ++d) {
      double brute = 0, lo = INFINITY, hi = -INFINITY;
      for (std::size_t v = 0; v < 7; ++v) {
        brute += ev[d * 7 + v] * pv[v];
        lo = std::min(lo, ev[d * 7 + v]);
        hi = std::max(hi, ev[d * 7 + v]);
      }
      CHECK(std::abs(e.at(d) - brute) <= 1e-5);
      CHECK(e.at(d) >= lo - 1e-12);
      CHECK(e.at(d) <= hi + 1e-12);
    }
  }
}

TEST_CASE("expected embeddings carry gradient into the table and the probabilities") {
  TD table = TD::from({2, 3}, {1, 0, 2, 0, 1, 2}, true);
  TD p = TD::from({3}, {0.2, 0.3, 0.5}, true);
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  tape.backward(sum(expected_embeddings<double>({p}, table)[0]));
  CHECK(table.grad() == std::vector<double>{0.2, 0.3, 0.5, 0.2, 0.3, 0.5});
  CHECK(p.grad() == std::vector<double>{1, 1, 4});
}

TEST_CASE("mixed_loss examples, errors and gradient split") {
  CHECK(mixed_loss(TD::scalar(2.0), TD::scalar(4.0), 0.5).item() == 3.0);
  CHECK(mixed_loss(TD::scalar(2.0), TD::scalar(4.0), 1.0).item() == 2.0);
  CHECK(mixed_loss(TD::scalar(2.0), TD::scalar(4.0), 0.0).item() == 4.0);
  CHECK_THROWS_AS(mixed_loss(TD::scalar(2.0), TD::scalar(4.0), 1.5), ContractError);
  CHECK_THROWS_AS(mixed_loss(TD::scalar(2.0), TD::scalar(4.0), -0.1), ContractError);
  CHECK(kDefaultAlpha == 0.99);

  TD a = TD::scalar(2.0), b = TD::scalar(4.0);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  tape.backward(mixed_loss(a, b, 0.25));
  CHECK(a.grad()[0] == 0.25);
  CHECK(b.grad()[0] == 0.75);
}

TEST_CASE("LossBreakdown bounds") {
  LossBreakdown ok{4.0, 2.0, 3.0, 0.5};
  CHECK(ok.within_bounds());
  LossBreakdown outside{4.0, 2.0, 4.5, 0.5};
  CHECK_FALSE(outside.within_bounds());
  LossBreakdown negative{-1.0, 2.0, 0.5, 0.5};
  CHECK_FALSE(negative.within_bounds());
}

TEST_CASE("pipeline construction checks") {
  const auto s = tiny_setup();
  ModelConfig other = s.model;
  other.vocab_size = 20;
  CHECK_THROWS_AS(SumTraPipeline<double>(Seq2SeqModel<double>(s.model, 1), Seq2SeqModel<double>(other, 2), 4),
                  ContractError);
  other = s.model;
  other.d_model = 16;
  CHECK_THROWS_AS(SumTraPipeline<double>(Seq2SeqModel<double>(s.model, 1), Seq2SeqModel<double>(other, 2), 4),
                  ContractError);
  CHECK_THROWS_AS(SumTraPipeline<double>(Seq2SeqModel<double>(s.model, 1), Seq2SeqModel<double>(s.model, 2), 4, 2.0),
                  ContractError);
  auto p = tiny_pipeline(1);
  CHECK_THROWS_AS(p.set_alpha(-0.5), ContractError);
}

TEST_CASE("one-hot summarizer: soft NLL equals the translator's ordinary NLL") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    auto p = tiny_pipeline(seed);
    force_token(p.summarizer(), 9);
    for (const auto& r : tiny_records(3)) {
      auto fwd = xls_forward(p, r.doc, r.summary_tgt);
      REQUIRE(!fwd.soft.tokens.empty());
      for (const auto& pv : fwd.soft.prob_vectors) CHECK(pv.at(9) == 1.0);
      TokenIds hard{kLangSrc};
      hard.insert(hard.end(), fwd.soft.tokens.begin(), fwd.soft.tokens.end());
      const double ref =
          sequence_nll(p.translator().forward_teacher_forced(hard, r.summary_tgt, kLangTgt), r.summary_tgt).item();
      CHECK(std::abs(fwd.nll.item() - ref) <= 1e-10);
    }
  }
}

TEST_CASE("fresh V=16 pipeline losses are near ln 16") {
  double nll = 0, bt = 0;
  int n = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto p = tiny_pipeline(seed * 10);
    for (const auto& r : tiny_records(20)) {
      bt += backtranslation_loss(p, r.doc, r.summary_src).item();
      try {
        nll += xls_forward(p, r.doc, r.summary_tgt).nll.item();
        ++n;
      } catch (const DegenerateSummaryError&) {
      }
    }
  }
  REQUIRE(n > 50);
  const double ln16 = std::log(16.0);
  CHECK(std::abs(nll / n - ln16) <= 0.15 * ln16);
  CHECK(std::abs(bt / 100 - ln16) <= 0.15 * ln16);
}

TEST_CASE("back-translation loss: self-consistency limit and no translator gradient") {
  auto p = tiny_pipeline(3);
  const auto r = tiny_records(1)[0];
  {
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    tape.backward(backtranslation_loss(p, r.doc, r.summary_src));
    CHECK(all_zero(p.translator()));
    CHECK(grad_norm(p.summarizer()) > 0.0);
  }
  force_token(p.summarizer(), 10);
  CHECK(backtranslation_loss(p, r.doc, TokenIds{kLangSrc, 10, 10, 10}).item() <= 1e-10);
  CHECK_THROWS_AS(backtranslation_loss(p, r.doc, TokenIds{10, 10}), ContractError);
}

TEST_CASE("alpha endpoints and interior gradient flow") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto records = tiny_records(6);
    for (double alpha : {1.0, 0.0, 0.5}) {
      auto p = tiny_pipeline(seed * 3, alpha);
      Tape<double> tape;
      Tape<double>::Scope scope(tape);
      std::optional<TD> total;
      for (const auto& r : records) {
        try {
          auto l = pipeline_loss(p, r.doc, r.summary_tgt, &r.summary_src);
          total = total ? add(*total, l.combined) : l.combined;
        } catch (const DegenerateSummaryError&) {
        }
      }
      REQUIRE(total);
      tape.backward(*total);
      CAPTURE(alpha);
      if (alpha == 1.0) {
        CHECK(all_zero(p.translator()));
        CHECK(grad_norm(p.summarizer()) > 0.0);
      } else {
        CHECK(grad_norm(p.summarizer()) > 0.0);
        CHECK(grad_norm(p.translator()) > 0.0);
      }
    }
  }
}

TEST_CASE("alpha zero: gradient reaches the summarizer only through the probabilities") {
  auto p = tiny_pipeline(4, 0.0);
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  for (const auto& r : tiny_records(8)) {
    try {
      auto l = pipeline_loss(p, r.doc, r.summary_tgt, nullptr);
      CHECK(l.breakdown.nll_sum == 0.0);
      tape.backward(l.combined);
      break;
    } catch (const DegenerateSummaryError&) {
    }
  }
  CHECK(grad_norm(p.summarizer()) > 0.0);
}

TEST_CASE("pipeline_loss contracts and bounds") {
  auto p = tiny_pipeline(5, 0.99);
  const auto records = tiny_records(20);
  CHECK_THROWS_AS(pipeline_loss(p, records[0].doc, records[0].summary_tgt, nullptr), ContractError);
  CHECK_THROWS_AS(xls_forward(p, records[0].doc, records[0].summary_src), ContractError);
  for (double alpha : {0.0, 0.3, 0.99, 1.0}) {
    p.set_alpha(alpha);
    for (const auto& r : records) {
      try {
        auto l = pipeline_loss(p, r.doc, r.summary_tgt, &r.summary_src);
        CHECK(l.breakdown.within_bounds());
        CHECK(l.breakdown.alpha == alpha);
        for (const auto& e : l.soft.expected_embeddings) CHECK(e.shape() == Shape{8});
      } catch (const DegenerateSummaryError&) {
      }
    }
  }
}

TEST_CASE("degenerate summary: error in loss, empty translation at inference") {
  auto p = tiny_pipeline(6);
  force_token(p.summarizer(), kEos);
  const auto r = tiny_records(1)[0];
  CHECK_THROWS_AS(xls_forward(p, r.doc, r.summary_tgt), DegenerateSummaryError);
  CHECK_THROWS_AS(pipeline_loss(p, r.doc, r.summary_tgt, &r.summary_src), DegenerateSummaryError);
  for (auto mode : {InferenceMode::Hard, InferenceMode::Soft}) {
    auto out = infer(p, r.doc, mode);
    CHECK(out.target == TokenIds{kLangTgt});
    CHECK(out.summary == TokenIds{kLangSrc, kEos});
  }
}

TEST_CASE("near-one-hot summarizer: hard and soft inference agree") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    auto p = tiny_pipeline(seed * 7);
    // Peaked but not exactly one-hot: a margin of 12 nats over 15 rivals.
    force_token(p.summarizer(), 8 + static_cast<int>(seed % 4), 12.0);
    for (const auto& r : tiny_records(5)) {
      auto greedy = p.summarizer().greedy_decode(r.doc, kLangSrc, p.summary_max_len());
      for (const auto& pv : greedy.prob_vectors) {
        double mx = 0;
        for (double x : pv.data()) mx = std::max(mx, x);
        REQUIRE(mx >= 0.99);
      }
      CHECK(infer(p, r.doc, InferenceMode::Hard).target == infer(p, r.doc, InferenceMode::Soft).target);
    }
  }
}

TEST_CASE("inference defaults to hard mode and mode strings round trip") {
  auto p = tiny_pipeline(8);
  const auto r = tiny_records(1)[0];
  auto a = infer(p, r.doc), b = infer(p, r.doc, InferenceMode::Hard);
  CHECK(a.target == b.target);
  CHECK(a.summary == b.summary);
  CHECK(a.target.front() == kLangTgt);
  CHECK(a.summary.front() == kLangSrc);
  CHECK(inference_mode_from_string(to_string(InferenceMode::Soft)) == InferenceMode::Soft);
  CHECK(inference_mode_from_string("hard") == InferenceMode::Hard);
  CHECK_THROWS(inference_mode_from_string("beam"));
}

TEST_CASE("concurrent inference on a frozen pipeline agrees") {
  const auto s = tiny_setup();
  SumTraPipeline<float> p(Seq2SeqModel<float>(s.model, 1), Seq2SeqModel<float>(s.model, 2), 4);
  const auto records = tiny_records(8);
  std::vector<TokenIds> ref;
  for (const auto& r : records) ref.push_back(infer(p, r.doc, InferenceMode::Soft).target);
  std::vector<std::vector<TokenIds>> out(3);
  std::vector<std::thread> threads;
  for (std::size_t t = 0; t < out.size(); ++t) {
    threads.emplace_back([&, t] {
      for (const auto& r : records) out[t].push_back(infer(p, r.doc, InferenceMode::Soft).target);
    });
  }
  for (auto& t : threads) t.join();
  for (const auto& o : out) CHECK(o == ref);
}

TEST_CASE("pipeline checkpoint round trip") {
  const auto s = tiny_setup();
  SumTraPipeline<float> p(Seq2SeqModel<float>(s.model, 1), Seq2SeqModel<float>(s.model, 2), 4, 0.7);
  const auto path = std::filesystem::temp_directory_path() / "softpipe_test_pipeline.ckpt";
  save_pipeline(p, path);
  auto q = load_pipeline(path);
  CHECK(q.alpha() == 0.7);
  CHECK(q.summary_max_len() == 4);
  CHECK(pipeline_part_bytes(path, "sum") == serialize_model(p.summarizer()));
  CHECK(pipeline_part_bytes(path, "tra") == serialize_model(p.translator()));
  CHECK_THROWS_AS(pipeline_part_bytes(path, "other"), ContractError);
  const auto again = std::filesystem::temp_directory_path() / "softpipe_test_pipeline2.ckpt";
  save_pipeline(q, again);
  CHECK(read_file(path) == read_file(again));
  std::filesystem::remove(path);
  std::filesystem::remove(again);
}

TEST_CASE("finite-difference check of the mixed loss on one record") {
  const auto check = gradcheck_pipeline(0.5, 7, 1);
  CHECK(check.result.n_checked == check.n_params);
  CHECK(check.result.max_rel_error <= 1e-4);
}
