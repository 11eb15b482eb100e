#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dinocell/autograd.hpp"
#include "dinocell/tensor.hpp"

namespace dinocell {

struct AdamWHyper {
  float lr = 1e-4f;
  float weight_decay = 0.04f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-8f;
};

struct AdamWState {
  AdamWHyper hyper;
  std::vector<std::vector<float>> first_moment;
  std::vector<std::vector<float>> second_moment;
  std::uint64_t step = 0;

  // Moments are sized lazily on the first step.
  explicit AdamWState(AdamWHyper h = {}) : hyper(h) {}
};

// One decoupled-weight-decay Adam step over `params` (updated in place).
// Decay is p -= lr * wd * p, applied independently of the adaptive term.
// Parameters listed in `no_decay` (by position) skip weight decay.
void adamw_step(std::span<Tensor> params, const GradientRecord& grads, AdamWState& state,
                std::span<const bool> no_decay = {});

// end + (start - end) * (1 + cos(pi * step / total)) / 2
double cosine_schedule(std::int64_t step, std::int64_t total_steps, double start, double end);

}  // namespace dinocell
