#pragma once

// Model-level property checks shared by the unit suite (small sample counts) and
// the acceptance binary (full counts).

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "gdt/model.hpp"
#include "support.hpp"

namespace gdt::testing {

/// Replaces the initial weights with wider random values so every nonlinearity
/// operates away from its linear regime; gains stay near one.
inline void widen_weights(dt::DTModel& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto& p : model.named_parameters()) {
    const bool gain = p.name.find("gain") != std::string::npos;
    for (double& v : p.tensor.mutable_data()) v = gain ? 1.0 + n(rng) : n(rng);
  }
}

struct GradientCheck {
  std::size_t checked = 0;
  std::size_t failures = 0;
  double worst = 0.0;
  std::string worst_name;
};

/// Compares analytic gradients of action_loss with central differences on
/// `n_samples` parameter entries, covering every tensor at least once.
inline GradientCheck full_model_gradient_check(const dt::DTConfig& config, std::size_t n_samples, std::uint64_t seed,
                                               double h = 1e-5, double tol = 1e-4) {
  std::mt19937_64 rng(seed);
  dt::DTModel model(config, seed);
  widen_weights(model, seed + 1);

  std::vector<dt::TrajectoryWindow> windows;
  for (std::size_t b = 0; b < 3; ++b) windows.push_back(random_window(config, rng, b));
  const Tensor target = dt::stack_actions(windows, config.action_dim);
  const auto mask = dt::stack_masks(windows);
  auto loss_fn = [&] { return dt::action_loss(dt::forward(windows, model), target, mask); };

  auto named = model.named_parameters();
  for (auto& p : named) p.tensor.zero_grad();
  run_backward(loss_fn);

  std::vector<std::pair<std::size_t, std::size_t>> picks;
  for (std::size_t t = 0; t < named.size(); ++t) {
    std::uniform_int_distribution<std::size_t> idx(0, named[t].tensor.numel() - 1);
    picks.emplace_back(t, idx(rng));
  }
  std::size_t total = 0;
  for (const auto& p : named) total += p.tensor.numel();
  std::uniform_int_distribution<std::size_t> flat(0, total - 1);
  while (picks.size() < n_samples) {
    std::size_t f = flat(rng), t = 0;
    while (f >= named[t].tensor.numel()) f -= named[t++].tensor.numel();
    picks.emplace_back(t, f);
  }

  GradientCheck out;
  for (const auto& [t, i] : picks) {
    const double analytic = named[t].tensor.grad()[i];
    const double numeric = central_difference(named[t].tensor, i, loss_fn, h);
    const double err = rel_error(analytic, numeric);
    ++out.checked;
    if (err > tol) ++out.failures;
    if (err > out.worst) {
      out.worst = err;
      out.worst_name = named[t].name + "[" + std::to_string(i) + "]";
    }
  }
  return out;
}

struct CausalityCheck {
  std::size_t windows = 0;
  std::size_t future_violations = 0;
  std::size_t own_action_violations = 0;
  std::size_t later_changed = 0;  // perturbations that did move a later prediction
};

/// For each random window: perturbs one token after timestep i's state token and
/// requires predictions at timesteps <= i to stay bit-identical; separately
/// perturbs a_i and requires the prediction at i to stay bit-identical.
inline CausalityCheck causality_suite(const dt::DTConfig& config, std::size_t n_windows, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  dt::DTModel model(config, seed);
  widen_weights(model, seed + 1);
  const std::size_t K = config.context_length, A = config.action_dim, S = config.flat_state_dim();
  std::normal_distribution<double> noise(0.0, 3.0);
  std::uniform_int_distribution<std::size_t> pad_dist(0, K - 1);

  CausalityCheck out;
  for (std::size_t n = 0; n < n_windows; ++n) {
    const auto base = random_window(config, rng, pad_dist(rng));
    std::size_t first = 0;
    while (!base.mask[first]) ++first;
    std::uniform_int_distribution<std::size_t> pos(first, K - 1);
    const std::size_t i = pos(rng);
    const auto ref = dt::forward(base, model);

    // Future tokens in order: a_i, then (R_j, s_j, a_j) for j > i.
    const std::size_t n_future = 1 + 3 * (K - 1 - i);
    std::uniform_int_distribution<std::size_t> pick(0, n_future - 1);
    const std::size_t which = pick(rng);
    auto w = base;
    if (which == 0) {
      for (std::size_t d = 0; d < A; ++d) w.actions[i * A + d] += noise(rng);
    } else {
      const std::size_t j = i + 1 + (which - 1) / 3;
      switch ((which - 1) % 3) {
        case 0: w.returns_to_go[j] += noise(rng); break;
        case 1: for (std::size_t d = 0; d < S; ++d) w.states[j * S + d] += noise(rng); break;
        default: for (std::size_t d = 0; d < A; ++d) w.actions[j * A + d] += noise(rng); break;
      }
    }
    const auto moved = dt::forward(w, model);
    for (std::size_t t = 0; t <= i; ++t) {
      for (std::size_t d = 0; d < A; ++d) {
        if (moved.data()[t * A + d] != ref.data()[t * A + d]) {
          ++out.future_violations;
          t = i + 1;
          break;
        }
      }
    }

    for (std::size_t k = (i + 1) * A; k < K * A; ++k) {
      if (moved.data()[k] != ref.data()[k]) {
        ++out.later_changed;
        break;
      }
    }

    auto own = base;
    for (std::size_t d = 0; d < A; ++d) own.actions[i * A + d] = std::clamp(noise(rng), -1.0, 1.0);
    const auto own_pred = dt::forward(own, model);
    for (std::size_t d = 0; d < A; ++d) {
      if (own_pred.data()[i * A + d] != ref.data()[i * A + d]) {
        ++out.own_action_violations;
        break;
      }
    }
    ++out.windows;
  }
  return out;
}

}  // namespace gdt::testing
