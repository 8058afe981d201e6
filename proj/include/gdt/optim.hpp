#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "gdt/tensor.hpp"

namespace gdt {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;  // decoupled, applied to parameters
  std::uint64_t warmup_steps = 1000;
  double clip_norm = 0.25;  // global gradient norm; <= 0 disables clipping
};

/// First/second moment accumulators for a fixed list of parameters.
struct OptimizerState {
  AdamConfig config;
  std::vector<Shape> shapes;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::uint64_t step = 0;
};

OptimizerState make_optimizer_state(std::span<const Tensor> params, const AdamConfig& config);

/// Learning rate after `step` updates have been applied (step counts from 1),
/// ramped linearly over the warmup period.
double scheduled_learning_rate(const AdamConfig& config, std::uint64_t step);

/// Rescales all gradients so their joint L2 norm is at most max_norm.
/// Returns the norm measured before rescaling.
double clip_grad_norm(std::span<Tensor> params, double max_norm);

/// One bias-corrected adaptive-moment update with decoupled weight decay, using the
/// gradients stored on each parameter (absent gradients count as zero).
void adam_step(std::span<Tensor> params, OptimizerState& state);

}  // namespace gdt
