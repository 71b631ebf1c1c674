#include "softpipe/optim.hpp"

#include <cmath>

namespace softpipe {

AdamW::AdamW(std::vector<Tensor<float>> params, AdamWOptions options) : options_(options) {
  params_.reserve(params.size());
  for (auto& p : params) {
    const std::size_t n = p.numel();
    params_.push_back(Slot{std::move(p), std::vector<double>(n, 0.0), std::vector<double>(n, 0.0), 0});
  }
}

void AdamW::step(double lr) {
  const auto& o = options_;
  for (auto& slot : params_) {
    if (!slot.param.has_grad()) continue;
    ++slot.steps;
    const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(slot.steps));
    const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(slot.steps));
    auto w = slot.param.mutable_data();
    const auto& g = slot.param.node()->grad;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      slot.m[i] = o.beta1 * slot.m[i] + (1.0 - o.beta1) * gi;
      slot.v[i] = o.beta2 * slot.v[i] + (1.0 - o.beta2) * gi * gi;
      const double m_hat = slot.m[i] / bc1;
      const double v_hat = slot.v[i] / bc2;
      double wi = static_cast<double>(w[i]) * (1.0 - lr * o.weight_decay);
      wi -= lr * m_hat / (std::sqrt(v_hat) + o.eps);
      w[i] = static_cast<float>(wi);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& slot : params_) slot.param.zero_grad();
}

}  // namespace softpipe
