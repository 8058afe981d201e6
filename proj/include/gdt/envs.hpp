#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace gdt::env {

enum class RewardMode { kSparse, kDense };

std::string to_string(RewardMode mode);
RewardMode parse_reward_mode(std::string_view text);

enum class Task { kReach, kPush, kPickPlace };

std::string task_name(Task task);
Task parse_task(std::string_view name);

using Vec = std::vector<double>;

/// Multi-goal observation: task state plus the desired and achieved goals.
struct GoalObservation {
  Vec observation;
  Vec desired_goal;
  Vec achieved_goal;

  friend bool operator==(const GoalObservation&, const GoalObservation&) = default;
};

struct Box {
  std::array<double, 2> low{-1.0, -1.0};
  std::array<double, 2> high{1.0, 1.0};

  bool contains(double x, double y) const { return x >= low[0] && x <= high[0] && y >= low[1] && y <= high[1]; }
  friend bool operator==(const Box&, const Box&) = default;
};

struct EnvSpec {
  std::string name;
  std::size_t state_dim = 0;  // observation length (without goals)
  std::size_t goal_dim = 2;
  std::size_t action_dim = 2;
  std::size_t episode_horizon = 50;
  double success_epsilon = 0.05;
  RewardMode reward_mode = RewardMode::kSparse;
  Box workspace;               // positions are clamped to this box
  double sample_half_extent = 1.0;  // initial positions and goals are drawn from [-h, h]^2
  double max_speed = 0.05;     // metres per step at |action| = 1
  double contact_radius = 0.05;

  std::size_t flat_state_dim() const { return state_dim + 2 * goal_dim; }
  friend bool operator==(const EnvSpec&, const EnvSpec&) = default;
};

void to_json(nlohmann::json& j, const EnvSpec& spec);
void from_json(const nlohmann::json& j, EnvSpec& spec);

EnvSpec make_spec(Task task, RewardMode mode);

struct StepResult {
  GoalObservation observation;
  double reward = 0.0;
  bool terminated = false;  // goal reached
  bool truncated = false;   // horizon reached without success
};

double goal_distance(std::span<const double> achieved, std::span<const double> desired);

/// 0 / -1 success reward (sparse, boundary inclusive) or negative Euclidean distance (dense).
double compute_reward(std::span<const double> achieved, std::span<const double> desired, RewardMode mode,
                      double success_epsilon);

/// [observation | desired_goal | achieved_goal].
Vec flatten_state(const GoalObservation& obs);
GoalObservation unflatten_state(std::span<const double> flat, std::size_t state_dim, std::size_t goal_dim);

/// Planar point-mass multi-goal environment. One instance is single-threaded and
/// owns its random generator.
class MultiGoalEnv {
 public:
  virtual ~MultiGoalEnv() = default;

  const EnvSpec& spec() const { return spec_; }
  Task task() const { return task_; }

  GoalObservation reset(std::uint64_t seed);
  StepResult step(std::span<const double> action);

  GoalObservation observe() const;
  std::size_t elapsed_steps() const { return steps_; }
  bool done() const { return done_; }

  std::array<double, 2> agent_position() const { return agent_; }
  std::array<double, 2> object_position() const { return object_; }
  std::array<double, 2> goal_position() const { return goal_; }
  bool grasped() const { return grasped_; }

  /// Goal currently achieved, derived from simulator state.
  Vec achieved_goal() const;

 protected:
  MultiGoalEnv(Task task, EnvSpec spec) : task_(task), spec_(std::move(spec)) {}

  virtual void sample_layout(std::mt19937_64& rng) = 0;
  virtual void apply_action(std::span<const double> action) = 0;
  virtual Vec task_observation() const = 0;
  virtual std::array<double, 2> achieved() const = 0;

  std::array<double, 2> sample_point(std::mt19937_64& rng) const;
  std::array<double, 2> clamp_to_workspace(std::array<double, 2> p) const;
  /// Moves the agent by the velocity command; returns the realized displacement.
  std::array<double, 2> move_agent(double ax, double ay);

  Task task_;
  EnvSpec spec_;
  std::array<double, 2> agent_{};
  std::array<double, 2> velocity_{};
  std::array<double, 2> object_{};
  std::array<double, 2> goal_{};
  bool grasped_ = false;
  std::size_t steps_ = 0;
  bool done_ = true;
};

std::unique_ptr<MultiGoalEnv> make_env(Task task, RewardMode mode);
std::unique_ptr<MultiGoalEnv> make_env(std::string_view name, RewardMode mode);

/// Maps an observation to an action in [-1, 1]^action_dim.
using Policy = std::function<Vec(const GoalObservation&)>;

/// Scripted demonstrator for the environment's task.
Policy oracle_policy(const EnvSpec& spec);

/// Uniform random actions, deterministic in `seed`.
Policy random_policy(const EnvSpec& spec, std::uint64_t seed);

/// Mixes (seed, stream) into an independent 64-bit seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace gdt::env
