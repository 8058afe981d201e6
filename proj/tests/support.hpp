#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "gdt/dataset.hpp"
#include "gdt/model.hpp"
#include "gdt/tensor.hpp"

namespace gdt::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = n(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

/// Relative error with an absolute floor on the denominator.
inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Runs `loss_fn` under a fresh tape and returns the loss value; gradients land on the inputs.
inline double run_backward(const std::function<Tensor()>& loss_fn) {
  Tape tape;
  TapeScope scope(tape);
  Tensor loss = loss_fn();
  tape.backward(loss);
  return loss.item();
}

/// Central difference of `loss_fn` with respect to element i of `t`.
inline double central_difference(Tensor& t, std::size_t i, const std::function<Tensor()>& loss_fn, double h = 1e-5) {
  auto d = t.mutable_data();
  const double saved = d[i];
  d[i] = saved + h;
  const double up = loss_fn().item();
  d[i] = saved - h;
  const double down = loss_fn().item();
  d[i] = saved;
  return (up - down) / (2.0 * h);
}

/// Largest relative error between analytic and central-difference gradients over
/// every element of every input.
inline double max_gradient_error(std::vector<Tensor> inputs, const std::function<Tensor()>& loss_fn,
                                 double h = 1e-5) {
  for (auto& t : inputs) t.zero_grad();
  run_backward(loss_fn);
  double worst = 0.0;
  for (auto& t : inputs) {
    const std::vector<double> g(t.grad().begin(), t.grad().end());
    for (std::size_t i = 0; i < t.numel(); ++i) worst = std::max(worst, rel_error(g[i], central_difference(t, i, loss_fn, h)));
  }
  return worst;
}

inline dt::DTConfig small_config(std::size_t state_dim = 4, std::size_t action_dim = 2, std::size_t goal_dim = 2) {
  dt::DTConfig c;
  c.context_length = 4;
  c.embed_dim = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.state_dim = state_dim;
  c.action_dim = action_dim;
  c.goal_dim = goal_dim;
  c.max_timestep = 64;
  c.dropout = 0.0;
  return c;
}

/// Random window; the first `pad` timesteps are padding.
inline dt::TrajectoryWindow random_window(const dt::DTConfig& c, std::mt19937_64& rng, std::size_t pad = 0) {
  const std::size_t K = c.context_length;
  auto w = dt::TrajectoryWindow::padded(K, c.flat_state_dim(), c.action_dim);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_int_distribution<std::size_t> start(0, c.max_timestep - K);
  const std::size_t t0 = start(rng);
  for (std::size_t k = pad; k < K; ++k) {
    w.mask[k] = 1;
    w.timesteps[k] = t0 + k;
    w.returns_to_go[k] = -10.0 * std::abs(n(rng));
    for (std::size_t d = 0; d < c.flat_state_dim(); ++d) w.states[k * c.flat_state_dim() + d] = n(rng);
    for (std::size_t d = 0; d < c.action_dim; ++d) w.actions[k * c.action_dim + d] = u(rng);
  }
  return w;
}

/// Episode with scripted content; rewards are -1 except a terminal 0 when `success`.
inline data::Episode synthetic_episode(std::size_t len, std::size_t flat_dim, std::size_t action_dim,
                                       data::PolicyTag tag, double action_value = 0.5, double state_offset = 0.0) {
  data::Episode ep;
  ep.env_name = "point-reach";
  ep.policy_tag = tag;
  ep.success = tag == data::PolicyTag::kExpert;
  std::vector<double> rewards;
  for (std::size_t t = 0; t < len; ++t) {
    data::Transition tr;
    tr.flat_state.assign(flat_dim, 0.0);
    for (std::size_t d = 0; d < flat_dim; ++d) tr.flat_state[d] = state_offset + 0.01 * static_cast<double>(t + d);
    tr.action.assign(action_dim, action_value);
    const bool last = t + 1 == len;
    tr.reward = (last && ep.success) ? 0.0 : -1.0;
    tr.terminated = last && ep.success;
    tr.truncated = last && !ep.success;
    rewards.push_back(tr.reward);
    ep.transitions.push_back(tr);
  }
  ep.returns_to_go = data::returns_to_go(rewards);
  return ep;
}

inline data::Dataset synthetic_dataset(const std::vector<std::size_t>& lengths,
                                       data::PolicyTag tag = data::PolicyTag::kExpert) {
  data::Dataset ds;
  ds.manifest.env_name = "point-reach";
  ds.manifest.state_dim = 4;
  ds.manifest.goal_dim = 2;
  ds.manifest.action_dim = 2;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    ds.episodes.push_back(synthetic_episode(lengths[i], 8, 2, tag, 0.5, static_cast<double>(i)));
  }
  data::refresh_manifest(ds);
  return ds;
}

}  // namespace gdt::testing
