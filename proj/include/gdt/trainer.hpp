#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "gdt/dataset.hpp"
#include "gdt/envs.hpp"
#include "gdt/model.hpp"
#include "gdt/optim.hpp"

namespace gdt::train {

enum class TargetMode { kBestInDataset, kFixed };

struct TrainConfig {
  std::size_t batch_size = 64;
  std::size_t n_updates = 10000;
  std::size_t eval_interval = 10000;  // updates between on_eval hook calls
  std::size_t log_interval = 100;     // updates between loss-curve points
  std::uint64_t seed = 0;
  TargetMode target_mode = TargetMode::kBestInDataset;
  double fixed_target = 0.0;  // used when target_mode == kFixed
  bool normalize = true;
  AdamConfig optimizer;

  void validate() const;
};

/// Desk-scale profile: small enough to train in well under a minute on one core.
dt::DTConfig desk_shape();
TrainConfig desk_config();

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Builds the window that ends at timestep `end` (inclusive) of `episode`.
/// States are standardized with `norm` when it is non-null.
dt::TrajectoryWindow make_window(const data::Episode& episode, std::size_t end, std::size_t context,
                                 const data::Normalization* norm);

/// Draws windows whose end points are uniform over all stored transitions, which
/// picks episodes in proportion to their length.
class WindowSampler {
 public:
  WindowSampler(const data::Dataset& ds, std::size_t context, bool normalize);

  std::vector<dt::TrajectoryWindow> sample(std::size_t batch_size, std::mt19937_64& rng) const;
  /// Index of the episode owning global transition `i`, and the offset inside it.
  std::pair<std::size_t, std::size_t> locate(std::size_t i) const;

 private:
  const data::Dataset& ds_;
  std::size_t context_;
  bool normalize_;
  std::vector<std::size_t> ends_;  // exclusive prefix sums of episode lengths
};

std::vector<dt::TrajectoryWindow> sample_batch(const data::Dataset& ds, std::size_t context, std::size_t batch_size,
                                               std::mt19937_64& rng, bool normalize = true);

struct LossPoint {
  std::size_t update = 0;
  double loss = 0.0;
};

struct TrainHooks {
  std::function<void(const LossPoint&)> on_loss;
  std::function<void(std::size_t update, const dt::DTModel&)> on_eval;
};

struct TrainResult {
  std::vector<LossPoint> loss_curve;
  double target_return = 0.0;
};

/// Config for a model sized to a dataset's environment.
dt::DTConfig config_for(const data::DatasetManifest& manifest, dt::DTConfig shape);

/// Runs n_updates of sample, forward, loss, backward, clip and adaptive step.
/// Throws TrainingError naming the update when the loss stops being finite.
TrainResult train(dt::DTModel& model, const data::Dataset& ds, const TrainConfig& config,
                  const TrainHooks& hooks = {});

double resolve_target(const data::DatasetManifest& manifest, const TrainConfig& config);

/// A policy with per-episode memory, driven by the evaluation harness.
class Agent {
 public:
  virtual ~Agent() = default;
  virtual void begin_episode(const env::GoalObservation& first) = 0;
  virtual env::Vec act(const env::GoalObservation& obs) = 0;
  virtual void observe(const env::Vec& action, const env::StepResult& result) = 0;
};

using AgentFactory = std::function<std::unique_ptr<Agent>()>;

/// Wraps a stateless policy.
std::unique_ptr<Agent> policy_agent(env::Policy policy);

/// Return-conditioned transformer agent. Feeds at most K timesteps; the fed
/// return-to-go is target minus the reward collected so far.
class DTAgent : public Agent {
 public:
  DTAgent(const dt::DTModel& model, std::optional<data::Normalization> norm, double target_return);

  void begin_episode(const env::GoalObservation& first) override;
  env::Vec act(const env::GoalObservation& obs) override;
  void observe(const env::Vec& action, const env::StepResult& result) override;

  /// Window that the next act() call will feed, for inspection.
  dt::TrajectoryWindow current_window(const env::GoalObservation& obs) const;
  double return_to_go() const { return rtg_; }

 private:
  struct Step {
    std::vector<double> state;
    std::vector<double> action;
    double rtg;
    std::size_t t;
  };

  const dt::DTModel& model_;
  std::optional<data::Normalization> norm_;
  double target_;
  double rtg_ = 0.0;
  double collected_ = 0.0;  // reward observed so far this episode
  std::size_t t_ = 0;
  std::vector<Step> history_;  // at most K - 1 completed steps
};

struct EvalConfig {
  std::size_t n_timesteps = 2000;  // per seed; episodes run to completion
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t threads = 0;  // 0 = GDT_THREADS or hardware concurrency
};

struct SeedResult {
  std::uint64_t seed = 0;
  std::size_t episodes = 0;
  std::size_t successes = 0;
  std::size_t timesteps = 0;
  double success_rate = 0.0;  // percent
  double mean_return = 0.0;   // per-episode return averaged over completed episodes

  friend bool operator==(const SeedResult&, const SeedResult&) = default;
};

struct EvalReport {
  std::string env_name;
  env::RewardMode reward_mode = env::RewardMode::kSparse;
  double target_return = 0.0;
  std::size_t n_timesteps = 0;
  std::size_t episodes = 0;
  double success_rate = 0.0;  // mean over seeds
  double success_std = 0.0;   // population std over seeds
  double mean_return = 0.0;
  double return_std = 0.0;
  std::vector<SeedResult> per_seed;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

void to_json(nlohmann::json& j, const EvalReport& r);

/// Worker count: GDT_THREADS when set, otherwise the logical core count.
std::size_t default_threads();

EvalReport evaluate(const AgentFactory& factory, const env::EnvSpec& spec, const EvalConfig& config,
                    double target_return = 0.0);
EvalReport evaluate(const dt::DTModel& model, const std::optional<data::Normalization>& norm,
                    const env::EnvSpec& spec, double target_return, const EvalConfig& config);

/// Population mean and standard deviation.
std::pair<double, double> mean_std(std::span<const double> values);

/// Trained weights plus everything needed to evaluate them.
struct ModelBundle {
  dt::DTModel model;
  std::optional<data::Normalization> normalization;
  double target_return = 0.0;
  std::string env_name;
  env::RewardMode reward_mode = env::RewardMode::kSparse;
  nlohmann::json extra;  // free-form provenance (train config, command line)
};

/// Writes the checkpoint at `path` and a JSON sidecar at `path` + ".json".
void save_bundle(const ModelBundle& bundle, const std::filesystem::path& path);
ModelBundle load_bundle(const std::filesystem::path& path);
std::filesystem::path sidecar_path(const std::filesystem::path& path);

}  // namespace gdt::train
