#include "gdt/envs.hpp"

#include <algorithm>
#include <cmath>

#include "gdt/errors.hpp"

namespace gdt::env {

std::string to_string(RewardMode mode) { return mode == RewardMode::kSparse ? "sparse" : "dense"; }

RewardMode parse_reward_mode(std::string_view text) {
  if (text == "sparse") return RewardMode::kSparse;
  if (text == "dense") return RewardMode::kDense;
  throw ContractError("unknown reward mode '" + std::string(text) + "' (expected sparse or dense)");
}

std::string task_name(Task task) {
  switch (task) {
    case Task::kReach:
      return "point-reach";
    case Task::kPush:
      return "point-push";
    case Task::kPickPlace:
      return "point-pickplace";
  }
  return "unknown";
}

Task parse_task(std::string_view name) {
  if (name == "point-reach") return Task::kReach;
  if (name == "point-push") return Task::kPush;
  if (name == "point-pickplace") return Task::kPickPlace;
  throw ContractError("unknown environment '" + std::string(name) +
                      "' (expected point-reach, point-push or point-pickplace)");
}

void to_json(nlohmann::json& j, const EnvSpec& s) {
  j = nlohmann::json{{"name", s.name},
                     {"state_dim", s.state_dim},
                     {"goal_dim", s.goal_dim},
                     {"action_dim", s.action_dim},
                     {"episode_horizon", s.episode_horizon},
                     {"success_epsilon", s.success_epsilon},
                     {"reward_mode", to_string(s.reward_mode)},
                     {"workspace", {{"low", s.workspace.low}, {"high", s.workspace.high}}},
                     {"sample_half_extent", s.sample_half_extent},
                     {"max_speed", s.max_speed},
                     {"contact_radius", s.contact_radius}};
}

void from_json(const nlohmann::json& j, EnvSpec& s) {
  j.at("name").get_to(s.name);
  j.at("state_dim").get_to(s.state_dim);
  j.at("goal_dim").get_to(s.goal_dim);
  j.at("action_dim").get_to(s.action_dim);
  j.at("episode_horizon").get_to(s.episode_horizon);
  j.at("success_epsilon").get_to(s.success_epsilon);
  s.reward_mode = parse_reward_mode(j.at("reward_mode").get<std::string>());
  j.at("workspace").at("low").get_to(s.workspace.low);
  j.at("workspace").at("high").get_to(s.workspace.high);
  j.at("sample_half_extent").get_to(s.sample_half_extent);
  j.at("max_speed").get_to(s.max_speed);
  j.at("contact_radius").get_to(s.contact_radius);
}

EnvSpec make_spec(Task task, RewardMode mode) {
  EnvSpec s;
  s.name = task_name(task);
  s.reward_mode = mode;
  switch (task) {
    case Task::kReach:
      s.state_dim = 4;  // position, velocity
      s.action_dim = 2;
      s.sample_half_extent = 1.0;
      break;
    case Task::kPush:
      s.state_dim = 8;  // position, velocity, object position, object relative to agent
      s.action_dim = 2;
      s.sample_half_extent = 0.5;
      break;
    case Task::kPickPlace:
      s.state_dim = 9;  // as push, plus grasp flag
      s.action_dim = 3;
      s.sample_half_extent = 0.5;
      break;
  }
  return s;
}

double goal_distance(std::span<const double> achieved, std::span<const double> desired) {
  if (achieved.size() != desired.size()) {
    throw DimensionError("goal length mismatch: achieved " + std::to_string(achieved.size()) + " vs desired " +
                         std::to_string(desired.size()));
  }
  double sq = 0.0;
  for (std::size_t i = 0; i < achieved.size(); ++i) sq += (achieved[i] - desired[i]) * (achieved[i] - desired[i]);
  return std::sqrt(sq);
}

double compute_reward(std::span<const double> achieved, std::span<const double> desired, RewardMode mode,
                      double success_epsilon) {
  const double d = goal_distance(achieved, desired);
  if (mode == RewardMode::kDense) return -d;
  return d <= success_epsilon ? 0.0 : -1.0;
}

Vec flatten_state(const GoalObservation& obs) {
  Vec flat;
  flat.reserve(obs.observation.size() + obs.desired_goal.size() + obs.achieved_goal.size());
  flat.insert(flat.end(), obs.observation.begin(), obs.observation.end());
  flat.insert(flat.end(), obs.desired_goal.begin(), obs.desired_goal.end());
  flat.insert(flat.end(), obs.achieved_goal.begin(), obs.achieved_goal.end());
  return flat;
}

GoalObservation unflatten_state(std::span<const double> flat, std::size_t state_dim, std::size_t goal_dim) {
  if (flat.size() != state_dim + 2 * goal_dim) {
    throw DimensionError("flat state of length " + std::to_string(flat.size()) + " does not split into " +
                         std::to_string(state_dim) + " + 2 x " + std::to_string(goal_dim));
  }
  GoalObservation obs;
  obs.observation.assign(flat.begin(), flat.begin() + static_cast<std::ptrdiff_t>(state_dim));
  obs.desired_goal.assign(flat.begin() + static_cast<std::ptrdiff_t>(state_dim),
                          flat.begin() + static_cast<std::ptrdiff_t>(state_dim + goal_dim));
  obs.achieved_goal.assign(flat.begin() + static_cast<std::ptrdiff_t>(state_dim + goal_dim), flat.end());
  return obs;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

// ---------------------------------------------------------------------------

namespace {

double dist2d(const std::array<double, 2>& a, const std::array<double, 2>& b) {
  return std::hypot(a[0] - b[0], a[1] - b[1]);
}

constexpr int kMaxLayoutAttempts = 10000;

}  // namespace

std::array<double, 2> MultiGoalEnv::sample_point(std::mt19937_64& rng) const {
  std::uniform_real_distribution<double> u(-spec_.sample_half_extent, spec_.sample_half_extent);
  const double x = u(rng);
  const double y = u(rng);
  return {x, y};
}

std::array<double, 2> MultiGoalEnv::clamp_to_workspace(std::array<double, 2> p) const {
  for (std::size_t i = 0; i < 2; ++i) p[i] = std::clamp(p[i], spec_.workspace.low[i], spec_.workspace.high[i]);
  return p;
}

std::array<double, 2> MultiGoalEnv::move_agent(double ax, double ay) {
  const auto before = agent_;
  agent_ = clamp_to_workspace({agent_[0] + ax * spec_.max_speed, agent_[1] + ay * spec_.max_speed});
  velocity_ = {agent_[0] - before[0], agent_[1] - before[1]};
  return velocity_;
}

Vec MultiGoalEnv::achieved_goal() const {
  const auto a = achieved();
  return {a[0], a[1]};
}

GoalObservation MultiGoalEnv::observe() const {
  return GoalObservation{task_observation(), {goal_[0], goal_[1]}, achieved_goal()};
}

GoalObservation MultiGoalEnv::reset(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  agent_ = object_ = goal_ = {0.0, 0.0};
  velocity_ = {0.0, 0.0};
  grasped_ = false;
  sample_layout(rng);
  steps_ = 0;
  done_ = false;
  return observe();
}

StepResult MultiGoalEnv::step(std::span<const double> action) {
  if (done_) throw ContractError("step() called on a finished episode; call reset() first");
  if (action.size() != spec_.action_dim) {
    throw DimensionError("action has " + std::to_string(action.size()) + " components, expected " +
                         std::to_string(spec_.action_dim));
  }
  Vec clipped(action.size());
  for (std::size_t i = 0; i < action.size(); ++i) {
    if (!std::isfinite(action[i])) throw ContractError("action component " + std::to_string(i) + " is not finite");
    clipped[i] = std::clamp(action[i], -1.0, 1.0);
  }
  apply_action(clipped);
  ++steps_;

  StepResult result;
  result.observation = observe();
  const double d = goal_distance(result.observation.achieved_goal, result.observation.desired_goal);
  result.reward = compute_reward(result.observation.achieved_goal, result.observation.desired_goal,
                                 spec_.reward_mode, spec_.success_epsilon);
  result.terminated = d <= spec_.success_epsilon;
  result.truncated = !result.terminated && steps_ >= spec_.episode_horizon;
  done_ = result.terminated || result.truncated;
  return result;
}

// ---------------------------------------------------------------------------

namespace {

class PointReach final : public MultiGoalEnv {
 public:
  explicit PointReach(RewardMode mode) : MultiGoalEnv(Task::kReach, make_spec(Task::kReach, mode)) {}

 protected:
  void sample_layout(std::mt19937_64& rng) override {
    agent_ = sample_point(rng);
    for (int i = 0; i < kMaxLayoutAttempts; ++i) {
      goal_ = sample_point(rng);
      if (dist2d(goal_, agent_) >= 2.0 * spec_.success_epsilon) return;
    }
    throw ContractError("could not sample a separated reach goal");
  }

  void apply_action(std::span<const double> a) override { move_agent(a[0], a[1]); }

  Vec task_observation() const override { return {agent_[0], agent_[1], velocity_[0], velocity_[1]}; }
  std::array<double, 2> achieved() const override { return agent_; }
};

// Object sits on the plane; layout keeps agent, object and goal apart so no
// episode starts in contact or in success.
class ObjectTask : public MultiGoalEnv {
 protected:
  using MultiGoalEnv::MultiGoalEnv;

  void sample_layout(std::mt19937_64& rng) override {
    for (int i = 0; i < kMaxLayoutAttempts; ++i) {
      agent_ = sample_point(rng);
      object_ = sample_point(rng);
      goal_ = sample_point(rng);
      if (dist2d(agent_, object_) >= 2.0 * spec_.contact_radius &&
          dist2d(goal_, object_) >= 2.0 * spec_.success_epsilon) {
        return;
      }
    }
    throw ContractError("could not sample a separated object layout");
  }

  Vec object_observation() const {
    return {agent_[0],  agent_[1],  velocity_[0], velocity_[1], object_[0], object_[1], object_[0] - agent_[0],
            object_[1] - agent_[1]};
  }
  std::array<double, 2> achieved() const override { return object_; }
};

class PointPush final : public ObjectTask {
 public:
  explicit PointPush(RewardMode mode) : ObjectTask(Task::kPush, make_spec(Task::kPush, mode)) {}

 protected:
  // Sticky contact: an overlapping object translates rigidly with the agent.
  void apply_action(std::span<const double> a) override {
    const bool contact = dist2d(agent_, object_) <= spec_.contact_radius;
    const auto d = move_agent(a[0], a[1]);
    if (contact) object_ = clamp_to_workspace({object_[0] + d[0], object_[1] + d[1]});
  }
  Vec task_observation() const override { return object_observation(); }
};

class PointPickPlace final : public ObjectTask {
 public:
  explicit PointPickPlace(RewardMode mode) : ObjectTask(Task::kPickPlace, make_spec(Task::kPickPlace, mode)) {}

 protected:
  // Last action coordinate is the gripper: < 0 closes (attaching an object within
  // reach), >= 0 opens and drops it in place.
  void apply_action(std::span<const double> a) override {
    const double grip = a[2];
    if (grip < 0.0) {
      if (!grasped_ && dist2d(agent_, object_) <= spec_.contact_radius) grasped_ = true;
    } else {
      grasped_ = false;
    }
    const auto d = move_agent(a[0], a[1]);
    if (grasped_) object_ = clamp_to_workspace({object_[0] + d[0], object_[1] + d[1]});
  }
  Vec task_observation() const override {
    Vec obs = object_observation();
    obs.push_back(grasped_ ? 1.0 : 0.0);
    return obs;
  }
};

double clip_unit(double v) { return std::clamp(v, -1.0, 1.0); }

}  // namespace

std::unique_ptr<MultiGoalEnv> make_env(Task task, RewardMode mode) {
  switch (task) {
    case Task::kReach:
      return std::make_unique<PointReach>(mode);
    case Task::kPush:
      return std::make_unique<PointPush>(mode);
    case Task::kPickPlace:
      return std::make_unique<PointPickPlace>(mode);
  }
  throw ContractError("unknown task");
}

std::unique_ptr<MultiGoalEnv> make_env(std::string_view name, RewardMode mode) {
  return make_env(parse_task(name), mode);
}

Policy oracle_policy(const EnvSpec& spec) {
  const Task task = parse_task(spec.name);
  const double v = spec.max_speed;
  const double eps = spec.success_epsilon;
  const double contact = spec.contact_radius;
  const Box ws = spec.workspace;

  auto steer = [v](double fx, double fy, double tx, double ty) {
    return std::array<double, 2>{clip_unit((tx - fx) / v), clip_unit((ty - fy) / v)};
  };

  switch (task) {
    case Task::kReach:
      return [steer](const GoalObservation& o) {
        const auto a = steer(o.observation[0], o.observation[1], o.desired_goal[0], o.desired_goal[1]);
        return Vec{a[0], a[1]};
      };
    case Task::kPush:
      return [steer, contact, ws](const GoalObservation& o) {
        const double ax = o.observation[0], ay = o.observation[1];
        const double ox = o.observation[4], oy = o.observation[5];
        const double gx = o.desired_goal[0], gy = o.desired_goal[1];
        if (std::hypot(ox - ax, oy - ay) <= contact) {
          // In contact the object moves with the agent: drive the object to the goal.
          const auto a = steer(ox, oy, gx, gy);
          return Vec{a[0], a[1]};
        }
        // Line up on a pre-push point outside contact range behind the object, then
        // drive through it. Approach and carry point the same way at first contact,
        // which keeps the demonstrated action continuous there.
        const double len = std::hypot(gx - ox, gy - oy);
        const double ux = len > 0.0 ? (gx - ox) / len : 0.0;
        const double uy = len > 0.0 ? (gy - oy) / len : 0.0;
        const double px = std::clamp(ox - 1.5 * contact * ux, ws.low[0], ws.high[0]);
        const double py = std::clamp(oy - 1.5 * contact * uy, ws.low[1], ws.high[1]);
        const bool lined_up = std::hypot(px - ax, py - ay) <= 0.5 * contact;
        const auto a = lined_up ? steer(ax, ay, ox, oy) : steer(ax, ay, px, py);
        return Vec{a[0], a[1]};
      };
    case Task::kPickPlace:
      return [steer, contact, eps](const GoalObservation& o) {
        const double ax = o.observation[0], ay = o.observation[1];
        const double ox = o.observation[4], oy = o.observation[5];
        const bool holding = o.observation[8] > 0.5;
        const double gx = o.desired_goal[0], gy = o.desired_goal[1];
        if (holding) {
          if (std::hypot(gx - ox, gy - oy) <= 0.5 * eps) return Vec{0.0, 0.0, 1.0};  // release at goal
          const auto a = steer(ox, oy, gx, gy);
          return Vec{a[0], a[1], -1.0};
        }
        // Close the gripper while still homing on the object; carrying starts once
        // the grasp flag is set, so motion stays continuous across first contact.
        // Closing early is harmless because attachment needs contact anyway.
        const auto a = steer(ax, ay, ox, oy);
        return Vec{a[0], a[1], std::hypot(ox - ax, oy - ay) <= 2.0 * contact ? -1.0 : 1.0};
      };
  }
  throw ContractError("no oracle for task");
}

Policy random_policy(const EnvSpec& spec, std::uint64_t seed) {
  auto rng = std::make_shared<std::mt19937_64>(seed);
  const std::size_t dim = spec.action_dim;
  return [rng, dim](const GoalObservation&) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Vec a(dim);
    for (auto& x : a) x = u(*rng);
    return a;
  };
}

}  // namespace gdt::env
