#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "gdt/envs.hpp"

namespace gdt::data {

enum class PolicyTag : std::uint8_t { kExpert = 0, kRandom = 1 };

std::string to_string(PolicyTag tag);
PolicyTag parse_policy_tag(std::string_view text);

struct Transition {
  std::vector<double> flat_state;  // [observation | desired goal | achieved goal]
  std::vector<double> action;
  double reward = 0.0;
  bool terminated = false;
  bool truncated = false;

  friend bool operator==(const Transition&, const Transition&) = default;
};

struct Episode {
  std::vector<Transition> transitions;
  std::vector<double> returns_to_go;
  bool success = false;
  std::string env_name;
  PolicyTag policy_tag = PolicyTag::kExpert;

  std::size_t size() const { return transitions.size(); }
  double episode_return() const { return returns_to_go.empty() ? 0.0 : returns_to_go.front(); }

  friend bool operator==(const Episode&, const Episode&) = default;
};

/// Suffix sums: out[t] = sum of rewards[t..end], accumulated from the back.
std::vector<double> returns_to_go(std::span<const double> rewards);

struct Normalization {
  std::vector<double> mean;
  std::vector<double> std;

  friend bool operator==(const Normalization&, const Normalization&) = default;
};

struct DatasetManifest {
  std::string env_name;
  env::RewardMode reward_mode = env::RewardMode::kSparse;
  std::size_t state_dim = 0;
  std::size_t goal_dim = 0;
  std::size_t action_dim = 0;
  std::size_t n_episodes = 0;
  std::size_t n_transitions = 0;
  double expert_fraction = 0.0;
  std::uint64_t seed = 0;
  Normalization normalization;
  double best_return = 0.0;
  std::string provenance;  // how the dataset was produced
  std::string command;     // full command line, when produced by the CLI

  std::size_t flat_state_dim() const { return state_dim + 2 * goal_dim; }
  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

void to_json(nlohmann::json& j, const DatasetManifest& m);
void from_json(const nlohmann::json& j, DatasetManifest& m);

/// Offline dataset of complete episodes. Immutable once built.
struct Dataset {
  DatasetManifest manifest;
  std::vector<Episode> episodes;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Per-dimension population mean and standard deviation over all flat states;
/// deviations are floored at kStdFloor.
inline constexpr double kStdFloor = 1e-6;
Normalization normalization_stats(const Dataset& ds);

/// Recomputes counts, composition, normalization and best return from the episodes.
void refresh_manifest(Dataset& ds);

/// Throws ContractError when an episode is partial, returns-to-go are stale or the
/// manifest disagrees with the payload.
void validate(const Dataset& ds);

/// Rolls one complete episode of `policy` from reset(seed).
Episode rollout_episode(env::MultiGoalEnv& env, const env::Policy& policy, std::uint64_t seed, PolicyTag tag);

/// Records complete episodes until at least n_transitions are collected.
Dataset record(const env::EnvSpec& spec, PolicyTag tag, std::size_t n_transitions, std::uint64_t seed);

/// Blends whole episodes so that expert transitions reach expert_fraction * total
/// (overshooting by at most one episode) and the total reaches total_transitions.
Dataset mix(const Dataset& expert, const Dataset& random, double expert_fraction, std::size_t total_transitions,
            std::uint64_t seed);

/// Uniformly samples whole episodes until n_transitions is reached.
Dataset subset(const Dataset& ds, std::size_t n_transitions, std::uint64_t seed);

// "GDE1", u8 version, u64 manifest length + JSON manifest, then per episode:
//   u8 policy tag, u8 success, u64 transition count, u64 payload length (values),
//   f64 payload: per transition [state, action, reward, terminated, truncated],
//   followed by the returns-to-go.
inline constexpr std::uint8_t kDatasetVersion = 1;
void write_dataset(std::ostream& out, const Dataset& ds);
Dataset read_dataset(std::istream& in);
void save(const Dataset& ds, const std::filesystem::path& path);
Dataset load(const std::filesystem::path& path);

}  // namespace gdt::data
