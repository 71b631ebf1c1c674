#pragma once

// End-to-end finite-difference check of the mixed pipeline loss on a tiny
// 64-bit configuration.

#include <cstdint>

#include "softpipe/pipeline.hpp"
#include "softpipe/tasks.hpp"

namespace softpipe {

struct TinySetup {
  ToyTaskSpec task;
  ModelConfig model;
  std::size_t summary_max_len = 4;
};

// D=8, one encoder and one decoder layer, V=16, documents of length 6.
TinySetup tiny_setup();

struct PipelineGradCheck {
  GradCheckResult result;
  std::size_t n_records = 0;
  std::size_t n_params = 0;
  double seconds = 0;
};

// Averages the mixed loss over a few records whose greedy summaries are
// non-degenerate and whose argmax margins are wide enough that a step of
// `eps` cannot flip a decoding decision.
PipelineGradCheck gradcheck_pipeline(double alpha = 0.5, std::uint64_t seed = 7, std::size_t n_records = 3,
                                     double eps = 1e-4, double floor = 1e-6);

}  // namespace softpipe
