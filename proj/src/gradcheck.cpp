#include "softpipe/gradcheck.hpp"

#include <algorithm>
#include <chrono>

namespace softpipe {

TinySetup tiny_setup() {
  TinySetup s;
  s.task.content_size = 4;
  s.task.n_pairs = 2;
  s.task.seed = 11;
  s.model.vocab_size = s.task.vocab().size();
  s.model.d_model = 8;
  s.model.n_heads = 2;
  s.model.n_layers_enc = 1;
  s.model.n_layers_dec = 1;
  s.model.ffn_dim = 16;
  s.model.max_src_len = 8;
  s.model.max_tgt_len = 8;
  s.summary_max_len = 4;
  return s;
}

namespace {

// Smallest gap between the top two probabilities over every greedy step.
double min_margin(const std::vector<Tensor<double>>& probs) {
  double margin = 1.0;
  for (const auto& p : probs) {
    std::vector<double> v(p.data().begin(), p.data().end());
    std::partial_sort(v.begin(), v.begin() + 2, v.end(), std::greater<>());
    margin = std::min(margin, v[0] - v[1]);
  }
  return margin;
}

}  // namespace

PipelineGradCheck gradcheck_pipeline(double alpha, std::uint64_t seed, std::size_t n_records, double eps,
                                     double floor) {
  const auto start = std::chrono::steady_clock::now();
  const TinySetup setup = tiny_setup();
  SumTraPipeline<double> pipeline(Seq2SeqModel<double>(setup.model, seed), Seq2SeqModel<double>(setup.model, seed + 1),
                                  setup.summary_max_len, alpha);
  const Dataset data = gen_dataset(setup.task, 200, 0, 0);

  std::vector<const XlsRecord*> chosen;
  for (const auto& r : data.train) {
    if (chosen.size() == n_records) break;
    NoGradScope<double> no_grad;
    const auto decoded = pipeline.summarizer().greedy_decode(r.doc, vocab::kLangSrc, setup.summary_max_len);
    if (decoded.tokens.empty() || decoded.tokens.front() == vocab::kEos) continue;
    if (min_margin(decoded.prob_vectors) < 1e-3) continue;
    chosen.push_back(&r);
  }
  if (chosen.size() < n_records) throw StateError("gradcheck: not enough well-separated records in the tiny set");

  std::vector<Tensor<double>> params;
  for (auto* m : {&pipeline.summarizer(), &pipeline.translator()}) {
    m->set_trainable(true);
    m->visit_parameters([&](const std::string&, Tensor<double>& t) { params.push_back(t); });
  }
  auto objective = [&] {
    Tensor<double> total;
    for (const XlsRecord* r : chosen) {
      Tensor<double> loss = pipeline_loss(pipeline, r->doc, r->summary_tgt, &r->summary_src).combined;
      total = total.defined() ? add(total, loss) : loss;
    }
    return scale(total, 1.0 / static_cast<double>(chosen.size()));
  };
  PipelineGradCheck out;
  out.n_records = chosen.size();
  for (const auto& p : params) out.n_params += p.numel();
  out.result = grad_check_detail(objective, params, eps, floor);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

}  // namespace softpipe
