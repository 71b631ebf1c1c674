#pragma once

// AdamW with decoupled weight decay and per-parameter step counts.

#include <cstdint>
#include <vector>

#include "softpipe/tensor.hpp"

namespace softpipe {

struct AdamWOptions {
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class AdamW {
 public:
  AdamW(std::vector<Tensor<float>> params, AdamWOptions options = {});

  // Updates every parameter that holds a gradient; parameters that no
  // gradient reached are left untouched, weight decay included.
  void step(double learning_rate);
  void zero_grad();
  std::size_t size() const { return params_.size(); }

 private:
  struct Slot {
    Tensor<float> param;
    std::vector<double> m, v;
    std::uint64_t steps = 0;
  };
  std::vector<Slot> params_;
  AdamWOptions options_;
};

}  // namespace softpipe
