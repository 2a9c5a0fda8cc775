#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "snf/tensor.hpp"

namespace snf {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Decoupled (AdamW) decay; 0 gives plain Adam.
  double weight_decay = 0.0;
  // Global-norm gradient clipping threshold; <= 0 disables clipping.
  double clip_norm = 10.0;
};

struct OptimizerState {
  AdamConfig config;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::uint64_t step = 0;
};

OptimizerState make_optimizer_state(std::span<const Tensor> params, AdamConfig config);

// One AdamW update in place. Weight decay is applied as -lr * lambda * param,
// independent of the moment estimates.
void adamw_step(std::span<Tensor> params, std::span<const Tensor> grads, OptimizerState& state);

double global_norm(std::span<const Tensor> grads);

}  // namespace snf
