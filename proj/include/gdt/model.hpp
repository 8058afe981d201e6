#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "gdt/checkpoint.hpp"
#include "gdt/tensor.hpp"

namespace gdt::dt {

/// Shape and regularization settings of a goal-conditioned Decision Transformer.
struct DTConfig {
  std::size_t context_length = 20;  // K, in timesteps; the model sees 3K tokens
  std::size_t embed_dim = 128;
  std::size_t n_layers = 3;
  std::size_t n_heads = 1;
  std::size_t state_dim = 0;   // observation part only
  std::size_t action_dim = 0;
  std::size_t goal_dim = 0;
  std::size_t max_timestep = 1000;
  double dropout = 0.1;
  double return_scale = 50.0;  // returns-to-go are divided by this before embedding

  /// Length of a flattened state: observation, desired goal, achieved goal.
  std::size_t flat_state_dim() const { return state_dim + 2 * goal_dim; }
  void validate() const;

  friend bool operator==(const DTConfig&, const DTConfig&) = default;
};

void to_json(nlohmann::json& j, const DTConfig& c);
void from_json(const nlohmann::json& j, DTConfig& c);

/// K consecutive timesteps of one episode, left-padded when the episode prefix is
/// shorter than K. Matrices are row-major with one row per timestep.
struct TrajectoryWindow {
  std::vector<double> returns_to_go;  // K
  std::vector<double> states;         // K x flat_state_dim
  std::vector<double> actions;        // K x action_dim
  std::vector<std::size_t> timesteps; // K
  std::vector<std::uint8_t> mask;     // K, 1 = real timestep

  static TrajectoryWindow padded(std::size_t context, std::size_t flat_state_dim, std::size_t action_dim);
  std::size_t context() const { return mask.size(); }
};

/// Throws ContractError/DimensionError when a window breaks its layout invariants.
void validate_window(const TrajectoryWindow& window, const DTConfig& config);

struct BlockParams {
  Tensor ln1_gain, ln1_bias;
  Tensor query_w, query_b, key_w, key_b, value_w, value_b, proj_w, proj_b;
  Tensor ln2_gain, ln2_bias;
  Tensor fc1_w, fc1_b, fc2_w, fc2_b;
};

struct DTModel {
  DTModel(const DTConfig& config, std::uint64_t seed);

  DTConfig config;
  Tensor return_w, return_b;
  Tensor state_w, state_b;
  Tensor action_w, action_b;
  Tensor timestep_table;
  std::vector<BlockParams> blocks;
  Tensor final_ln_gain, final_ln_bias;
  Tensor head_w, head_b;

  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;

  /// Copies values from `params` into this model; names and shapes must match exactly.
  void load_parameters(const std::vector<NamedTensor>& params);
  DTModel clone() const;
};

std::size_t parameter_count(const DTConfig& config);

struct ForwardOptions {
  bool training = false;
  std::mt19937_64* rng = nullptr;  // required when training with dropout > 0
};

/// Per-timestep token embeddings for a batch of windows: rows are ordered
/// (return-to-go, state, action) per timestep, giving [B * 3K x embed_dim].
Tensor tokenize(std::span<const TrajectoryWindow> windows, const DTModel& model);

/// Token-level mask matching tokenize(): each timestep flag repeated three times.
std::vector<std::uint8_t> token_mask(std::span<const TrajectoryWindow> windows);

/// Pre-norm attention sublayer: x + proj(attention(LN(x))).
Tensor causal_attention_block(const Tensor& tokens, const BlockParams& block, std::size_t n_seq,
                              std::size_t n_heads, std::span<const std::uint8_t> mask,
                              const ForwardOptions& options = {}, double dropout = 0.0);

/// Pre-norm GELU feed-forward sublayer: x + fc2(gelu(fc1(LN(x)))).
Tensor feed_forward_block(const Tensor& x, const BlockParams& block, const ForwardOptions& options = {},
                          double dropout = 0.0);

/// Predicted actions [B * K x action_dim], read from each timestep's state token and
/// squashed into [-1, 1].
Tensor forward(std::span<const TrajectoryWindow> windows, const DTModel& model, const ForwardOptions& options = {});
Tensor forward(const TrajectoryWindow& window, const DTModel& model, const ForwardOptions& options = {});

/// Mean squared action error over unmasked timesteps.
Tensor action_loss(const Tensor& pred, const Tensor& target, std::span<const std::uint8_t> mask);

/// Stacks the windows' action rows into a [B * K x action_dim] tensor.
Tensor stack_actions(std::span<const TrajectoryWindow> windows, std::size_t action_dim);
std::vector<std::uint8_t> stack_masks(std::span<const TrajectoryWindow> windows);

}  // namespace gdt::dt
