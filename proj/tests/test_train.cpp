#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "softpipe/gradcheck.hpp"
#include "softpipe/optim.hpp"
#include "softpipe/train.hpp"

using namespace softpipe;
using namespace softpipe::vocab;

namespace {

struct Fixture {
  TinySetup setup = tiny_setup();
  Dataset data;

  Fixture() {
    setup.task.n_pairs = 3;  // 512 possible documents, enough for disjoint splits
    data = gen_dataset(setup.task, 48, 12, 12);
    for (auto* split : {&data.train, &data.val, &data.test}) {
      for (auto& r : *split) r.backtranslation = r.summary_src;
    }
  }

  SumTraPipeline<float> pipeline(std::uint64_t seed = 1) const {
    return SumTraPipeline<float>(Seq2SeqModel<float>(setup.model, seed), Seq2SeqModel<float>(setup.model, seed + 1),
                                 setup.summary_max_len);
  }
};

TrainConfig quick(int epochs = 2) {
  TrainConfig c = TrainConfig::finetuning();
  c.max_epochs = epochs;
  c.early_stopping_patience = 1;
  c.learning_rate = 1e-3;
  c.grad_accumulation = 4;
  return c;
}

}  // namespace

TEST_CASE("config defaults, presets and validation") {
  const TrainConfig d;
  CHECK(d.learning_rate == 3e-4);
  CHECK(d.max_epochs == 10);
  CHECK(d.early_stopping_patience == 2);
  CHECK(d.batch_size == 1);
  CHECK(d.grad_accumulation == 8);
  CHECK(d.warmup_steps == 500);
  CHECK(d.weight_decay == 0.01);
  CHECK(d.beta1 == 0.9);
  CHECK(d.beta2 == 0.999);
  CHECK(d.eps == 1e-8);
  CHECK(d.alpha == 0.99);
  CHECK(TrainConfig::finetuning().warmup_steps == 0);
  CHECK(TrainConfig::reference_preset().learning_rate == 3e-5);

  TrainConfig bad;
  bad.early_stopping_patience = 10;
  CHECK_THROWS_AS(bad.validate(), ContractError);
  bad = TrainConfig{};
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ContractError);
  bad = TrainConfig{};
  bad.alpha = 1.5;
  CHECK_THROWS_AS(bad.validate(), ContractError);
}

TEST_CASE("config JSON round trip and unknown keys") {
  TrainConfig c = TrainConfig::finetuning();
  c.freeze_strategy = FreezeStrategy::TraOnly;
  c.seed = 9;
  nlohmann::json j = c;
  CHECK(j.get<TrainConfig>() == c);
  j["learning_rat"] = 1.0;
  CHECK_THROWS_AS(j.get<TrainConfig>(), FormatError);
  CHECK(freeze_strategy_from_string("sum_only") == FreezeStrategy::SumOnly);
  CHECK_THROWS(freeze_strategy_from_string("none"));
  CHECK(direct_regime_from_string(to_string(DirectRegime::MonoThenXls)) == DirectRegime::MonoThenXls);
}

TEST_CASE("run stems and derived seeds") {
  const nlohmann::json cfg{{"a", 1}};
  const std::string stem = run_stem("finetune", cfg, 3);
  CHECK(stem.rfind("finetune-", 0) == 0);
  CHECK(stem.size() == std::string("finetune-").size() + 12 + 3);
  CHECK(stem.substr(stem.size() - 3) == "-s3");
  CHECK(run_stem("finetune", cfg, 3) == stem);
  CHECK(run_stem("finetune", nlohmann::json{{"a", 2}}, 3) != stem);
  CHECK(derive_seed(1, "sum") == derive_seed(1, "sum"));
  CHECK(derive_seed(1, "sum") != derive_seed(1, "tra"));
  CHECK(derive_seed(1, "sum") != derive_seed(2, "sum"));
}

TEST_CASE("example builders wire the right fields") {
  Fixture f;
  const XlsRecord& r = f.data.train[0];
  const auto s = summary_examples({r})[0];
  CHECK(s.src == r.doc);
  CHECK(s.tgt == r.summary_src);
  CHECK(s.lang_tag == kLangSrc);
  const auto fw = translation_examples({r}, Direction::Forward)[0];
  CHECK(fw.src == r.summary_src);
  CHECK(fw.tgt == r.summary_tgt);
  CHECK(fw.lang_tag == kLangTgt);
  const auto rv = translation_examples({r}, Direction::Reverse)[0];
  CHECK(rv.src == r.summary_tgt);
  CHECK(rv.tgt == r.summary_src);
  CHECK(rv.lang_tag == kLangSrc);
  const auto x = xls_examples({r})[0];
  CHECK(x.src == r.doc);
  CHECK(x.tgt == r.summary_tgt);
  CHECK(x.lang_tag == kLangTgt);
}

TEST_CASE("lr 0 with patience 2 stops after exactly 3 epochs") {
  Fixture f;
  Seq2SeqModel<float> m(f.setup.model, 1);
  TrainConfig c;
  c.learning_rate = 0.0;
  c.warmup_steps = 0;
  const std::string before = serialize_model(m);
  auto rep = train_seq2seq(m, summary_examples(f.data.train), summary_examples(f.data.val), c, "train-sum");
  CHECK(rep.epochs.size() == 3);
  CHECK(rep.early_stopped);
  CHECK(rep.no_improvement);
  CHECK(serialize_model(m) == before);
}

TEST_CASE("training is reproducible and selects the lowest validation loss") {
  Fixture f;
  TrainConfig c;
  c.max_epochs = 3;
  c.warmup_steps = 10;
  c.learning_rate = 3e-3;
  auto run = [&] { return pretrain_sum(f.data, f.setup.model, c); };
  auto a = run(), b = run();
  CHECK(a.report.train_curve() == b.report.train_curve());
  CHECK(a.report.val_curve() == b.report.val_curve());
  CHECK(serialize_model(a.model) == serialize_model(b.model));
  const auto val = a.report.val_curve();
  const auto best = std::min_element(val.begin(), val.end()) - val.begin() + 1;
  CHECK(a.report.best_epoch == best);
  CHECK(a.report.val_curve().back() < a.report.baseline_val_loss);
  CHECK_FALSE(a.report.no_improvement);
  // The returned model holds the best epoch's parameters.
  const auto again = validate_seq2seq(a.model, summary_examples(f.data.val));
  CHECK(std::abs(again.loss - val[static_cast<std::size_t>(best - 1)]) <= 1e-6);
}

TEST_CASE("direct baseline regimes share one architecture") {
  Fixture f;
  TrainConfig c;
  c.max_epochs = 2;
  c.early_stopping_patience = 1;
  c.warmup_steps = 0;
  auto xls = train_direct_baseline(f.data, f.setup.model, c, DirectRegime::Xls);
  auto mono = train_direct_baseline(f.data, f.setup.model, c, DirectRegime::MonoOnly);
  auto both = train_direct_baseline(f.data, f.setup.model, c, DirectRegime::MonoThenXls);
  CHECK(xls.report.config == mono.report.config);
  CHECK(xls.report.config == both.report.config);
  CHECK(both.report.extra.contains("mono_stage"));
  CHECK(mono.report.extra["regime"] == "mono-only");
  CHECK(xls.report.kind == "direct-xls");
}

TEST_CASE("shot selection is seeded and nested") {
  Fixture f;
  auto a = select_shots(f.data.train, 8, 2), b = select_shots(f.data.train, 8, 2);
  CHECK(a == b);
  auto big = select_shots(f.data.train, 16, 2);
  CHECK(std::equal(a.begin(), a.end(), big.begin()));
  CHECK(select_shots(f.data.train, 8, 3) != a);
  CHECK_THROWS_AS(select_shots(f.data.train, 1000, 1), ContractError);
}

TEST_CASE("back-translation generation: deterministic, purity flagged, skips") {
  Fixture f;
  Seq2SeqModel<float> fresh(f.setup.model, 4);
  // Bias the reverse model towards one target-language content token so its
  // output is reliably in the wrong language.
  fresh.output_bias().mutable_data()[static_cast<std::size_t>(f.setup.task.vocab().tgt_begin())] = 50.0f;
  auto a = f.data.train, b = f.data.train;
  a.push_back(XlsRecord{});
  auto ra = generate_backtranslations(a, fresh);
  generate_backtranslations(b, fresh);
  for (std::size_t i = 0; i < b.size(); ++i) CHECK(a[i] == b[i]);
  CHECK(ra.filled == f.data.train.size());
  CHECK(ra.skipped == 1);
  CHECK(ra.purity < 1.0);
  CHECK(ra.impure);
  for (std::size_t i = 0; i < b.size(); ++i) CHECK(a[i].backtranslation->front() == kLangSrc);
}

TEST_CASE("finetune contracts") {
  Fixture f;
  auto p = f.pipeline();
  auto no_bt = f.data.train;
  for (auto& r : no_bt) r.backtranslation.reset();
  try {
    finetune(p, no_bt, f.data.val, quick());
    FAIL("expected ContractError");
  } catch (const ContractError& e) {
    CHECK(std::string(e.what()).find("backtranslate") != std::string::npos);
  }
  CHECK_THROWS_AS(finetune(p, {}, f.data.val, quick()), ContractError);
  TrainConfig zero = quick();
  zero.alpha = 0.0;
  CHECK_NOTHROW(finetune(p, no_bt, no_bt, zero));
}

TEST_CASE("freeze strategies leave the frozen module bitwise unchanged") {
  Fixture f;
  const auto shots = select_shots(f.data.train, 32, 1);
  for (auto strategy : {FreezeStrategy::SumOnly, FreezeStrategy::TraOnly, FreezeStrategy::All}) {
    auto p = f.pipeline(3);
    const std::string sum0 = serialize_model(p.summarizer()), tra0 = serialize_model(p.translator());
    TrainConfig c = quick();
    c.freeze_strategy = strategy;
    auto rep = finetune(p, shots, f.data.val, c);
    CAPTURE(to_string(strategy));
    CHECK(rep.bound_checks > 0);
    CHECK(rep.optimizer_steps > 0);
    const bool sum_same = serialize_model(p.summarizer()) == sum0;
    const bool tra_same = serialize_model(p.translator()) == tra0;
    CHECK(sum_same == (strategy == FreezeStrategy::TraOnly));
    CHECK(tra_same == (strategy == FreezeStrategy::SumOnly));
  }
}

TEST_CASE("alpha 1 with everything trainable leaves the translator bitwise unchanged") {
  Fixture f;
  auto p = f.pipeline(5);
  const std::string tra0 = serialize_model(p.translator()), sum0 = serialize_model(p.summarizer());
  TrainConfig c = quick();
  c.alpha = 1.0;
  finetune(p, select_shots(f.data.train, 16, 1), f.data.val, c);
  CHECK(serialize_model(p.translator()) == tra0);
  CHECK(serialize_model(p.summarizer()) != sum0);
  CHECK(p.alpha() == 1.0);
}

TEST_CASE("finetune is reproducible") {
  Fixture f;
  auto run = [&] {
    auto p = f.pipeline(6);
    auto rep = finetune(p, select_shots(f.data.train, 16, 2), f.data.val, quick());
    return std::make_pair(rep.val_curve(), serialize_model(p.summarizer()) + serialize_model(p.translator()));
  };
  CHECK(run() == run());
}

TEST_CASE("AdamW: skips parameters without gradients and applies decoupled decay") {
  Tensor<float> w = Tensor<float>::from({2}, {1.0f, -2.0f}, true);
  Tensor<float> idle = Tensor<float>::from({1}, {3.0f}, true);
  AdamW opt({w, idle}, AdamWOptions{});
  {
    Tape<float> tape;
    Tape<float>::Scope scope(tape);
    tape.backward(sum(w));
  }
  opt.step(0.1);
  // First step: m_hat / sqrt(v_hat) = sign(g) = 1; decay factor 1 - 0.1 * 0.01.
  CHECK(w.at(0) == doctest::Approx(1.0 * (1 - 0.001) - 0.1).epsilon(1e-6));
  CHECK(w.at(1) == doctest::Approx(-2.0 * (1 - 0.001) - 0.1).epsilon(1e-6));
  CHECK(idle.at(0) == 3.0f);
  opt.zero_grad();
  CHECK_FALSE(w.has_grad());
}

TEST_CASE("report JSON writes null for non-finite values") {
  RunReport r;
  r.kind = "x";
  EpochRecord e;
  e.epoch = 1;
  e.val_token_accuracy = std::numeric_limits<double>::quiet_NaN();
  r.epochs.push_back(e);
  r.baseline_val_loss = std::numeric_limits<double>::infinity();
  const auto j = to_json(r);
  CHECK(j["baseline_val_loss"].is_null());
  CHECK(j["epochs"][0]["val_token_accuracy"].is_null());
  CHECK(nlohmann::json::parse(j.dump()) == j);
}
