#include "gdt/optim.hpp"

#include <algorithm>
#include <cmath>

#include "gdt/errors.hpp"

namespace gdt {

OptimizerState make_optimizer_state(std::span<const Tensor> params, const AdamConfig& config) {
  OptimizerState state;
  state.config = config;
  for (const auto& p : params) {
    state.shapes.push_back(p.shape());
    state.first_moment.emplace_back(p.numel(), 0.0);
    state.second_moment.emplace_back(p.numel(), 0.0);
  }
  return state;
}

double scheduled_learning_rate(const AdamConfig& config, std::uint64_t step) {
  if (config.warmup_steps == 0) return config.learning_rate;
  const double ramp = std::min(1.0, static_cast<double>(step) / static_cast<double>(config.warmup_steps));
  return config.learning_rate * ramp;
}

double clip_grad_norm(std::span<Tensor> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / (norm + 1e-6);
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (double& g : p.grad_buffer()) g *= factor;
    }
  }
  return norm;
}

void adam_step(std::span<Tensor> params, OptimizerState& state) {
  if (params.size() != state.shapes.size()) {
    throw DimensionError("adam_step: optimizer tracks " + std::to_string(state.shapes.size()) +
                         " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != state.shapes[i]) {
      throw DimensionError("adam_step: parameter " + std::to_string(i) + " has shape " +
                           shape_str(params[i].shape()) + ", optimizer state expects " +
                           shape_str(state.shapes[i]));
    }
  }
  const auto& cfg = state.config;
  state.step += 1;
  const double lr = scheduled_learning_rate(cfg, state.step);
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].mutable_data();
    auto g = params[i].grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j];
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      w[j] -= lr * (m_hat / (std::sqrt(v_hat) + cfg.eps) + cfg.weight_decay * w[j]);
    }
  }
}

}  // namespace gdt
