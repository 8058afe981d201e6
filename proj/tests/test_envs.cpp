#include <cmath>
#include <random>

#include "doctest.h"

#include "gdt/envs.hpp"
#include "gdt/errors.hpp"

using namespace gdt;
using namespace gdt::env;

namespace {

const Task kTasks[] = {Task::kReach, Task::kPush, Task::kPickPlace};
const RewardMode kModes[] = {RewardMode::kSparse, RewardMode::kDense};

struct Rollout {
  std::size_t successes = 0;
  std::size_t episodes = 0;
};

Rollout sweep(Task task, RewardMode mode, const std::function<Policy(const EnvSpec&, std::uint64_t)>& make_policy,
              std::size_t episodes) {
  auto env = make_env(task, mode);
  Rollout r;
  for (std::size_t e = 0; e < episodes; ++e) {
    const Policy policy = make_policy(env->spec(), e);
    auto obs = env->reset(derive_seed(1234, e));
    while (true) {
      const auto res = env->step(policy(obs));
      obs = res.observation;
      if (res.terminated) ++r.successes;
      if (res.terminated || res.truncated) break;
    }
    ++r.episodes;
  }
  return r;
}

}  // namespace

TEST_CASE("specs have the documented shapes") {
  const auto reach = make_spec(Task::kReach, RewardMode::kSparse);
  CHECK(reach.name == "point-reach");
  CHECK(reach.goal_dim == 2);
  CHECK(reach.action_dim == 2);
  CHECK(reach.episode_horizon == 50);
  CHECK(reach.success_epsilon == 0.05);
  CHECK(make_spec(Task::kPickPlace, RewardMode::kDense).action_dim == 3);
  for (auto t : kTasks) {
    for (auto m : kModes) {
      const auto spec = make_spec(t, m);
      nlohmann::json j = spec;
      CHECK(j.get<EnvSpec>() == spec);
      auto env = make_env(spec.name, m);
      const auto obs = env->reset(1);
      CHECK(obs.observation.size() == spec.state_dim);
      CHECK(obs.desired_goal.size() == spec.goal_dim);
      CHECK(obs.achieved_goal.size() == spec.goal_dim);
    }
  }
  CHECK_THROWS(make_env("point-fly", RewardMode::kDense));
  CHECK_THROWS(parse_reward_mode("shaped"));
}

TEST_CASE("reward semantics on a distance grid") {
  const double eps = 0.05;
  const std::vector<double> goal{0.2, -0.3};
  std::size_t checked = 0;
  for (int i = 0; i < 100; ++i) {
    for (int j = 0; j < 100; ++j) {
      const std::vector<double> ach{goal[0] + (i - 50) * 0.002, goal[1] + (j - 50) * 0.002};
      const double sparse = compute_reward(ach, goal, RewardMode::kSparse, eps);
      const double dense = compute_reward(ach, goal, RewardMode::kDense, eps);
      CHECK((sparse == 0.0 || sparse == -1.0));
      CHECK((sparse == 0.0) == (dense >= -eps));
      ++checked;
    }
  }
  CHECK(checked == 10000);
  // The success boundary is inclusive.
  const std::vector<double> origin{0.0, 0.0}, edge{0.05, 0.0}, beyond{std::nextafter(0.05, 1.0), 0.0};
  CHECK(compute_reward(edge, origin, RewardMode::kSparse, eps) == 0.0);
  CHECK(compute_reward(beyond, origin, RewardMode::kSparse, eps) == -1.0);
  CHECK(compute_reward(edge, origin, RewardMode::kDense, eps) == -0.05);
}

TEST_CASE("determinism: seed and actions fix every step") {
  for (auto t : kTasks) {
    auto a = make_env(t, RewardMode::kDense);
    auto b = make_env(t, RewardMode::kDense);
    const auto pol = random_policy(a->spec(), 5);
    const auto pol2 = random_policy(b->spec(), 5);
    auto oa = a->reset(77);
    auto ob = b->reset(77);
    CHECK(oa == ob);
    while (!a->done()) {
      const auto ra = a->step(pol(oa));
      const auto rb = b->step(pol2(ob));
      CHECK(ra.observation == rb.observation);
      CHECK(ra.reward == rb.reward);
      CHECK(ra.terminated == rb.terminated);
      oa = ra.observation;
      ob = rb.observation;
    }
    CHECK(a->reset(78) != a->reset(77));
  }
}

TEST_CASE("step invariants under random play") {
  for (auto t : kTasks) {
    for (auto m : kModes) {
      auto env = make_env(t, m);
      const auto& spec = env->spec();
      for (std::uint64_t s = 0; s < 40; ++s) {
        const auto pol = random_policy(spec, s);
        auto obs = env->reset(s);
        std::size_t steps = 0;
        while (true) {
          const auto res = env->step(pol(obs));
          obs = res.observation;
          ++steps;
          // achieved goal always mirrors simulator state
          CHECK(obs.achieved_goal == env->achieved_goal());
          CHECK(spec.workspace.contains(env->agent_position()[0], env->agent_position()[1]));
          CHECK(spec.workspace.contains(env->object_position()[0], env->object_position()[1]));
          if (res.terminated) {
            CHECK(compute_reward(obs.achieved_goal, obs.desired_goal, RewardMode::kSparse, spec.success_epsilon) ==
                  0.0);
          }
          if (m == RewardMode::kSparse) CHECK((res.reward == 0.0 || res.reward == -1.0));
          if (res.terminated || res.truncated) break;
        }
        CHECK(steps <= spec.episode_horizon);
        CHECK_THROWS_AS(env->step(std::vector<double>(spec.action_dim, 0.0)), ContractError);
      }
    }
  }
}

TEST_CASE("actions are validated and clipped") {
  auto env = make_env(Task::kReach, RewardMode::kSparse);
  const auto obs = env->reset(3);
  CHECK_THROWS_AS(env->step(std::vector<double>{0.1}), DimensionError);
  CHECK_THROWS_AS(env->step(std::vector<double>{NAN, 0.0}), ContractError);
  const auto before = env->agent_position();
  env->step(std::vector<double>{50.0, 0.0});
  const double moved = env->agent_position()[0] - before[0];
  CHECK(moved <= env->spec().max_speed + 1e-15);
  (void)obs;
}

TEST_CASE("oracles solve their tasks; random play rarely does") {
  const auto oracle = [](const EnvSpec& s, std::uint64_t) { return oracle_policy(s); };
  const auto random = [](const EnvSpec& s, std::uint64_t e) { return random_policy(s, e); };
  const auto reach = sweep(Task::kReach, RewardMode::kSparse, oracle, 1000);
  CHECK(reach.successes >= 990);
  for (auto t : {Task::kPush, Task::kPickPlace}) {
    const auto r = sweep(t, RewardMode::kDense, oracle, 300);
    CHECK(r.successes >= 297);
  }
  CHECK(sweep(Task::kPush, RewardMode::kSparse, random, 300).successes <= 6);
}

TEST_CASE("reach oracle is quiet on a satisfied goal") {
  const auto spec = make_spec(Task::kReach, RewardMode::kSparse);
  const auto pol = oracle_policy(spec);
  GoalObservation obs{{0.3, 0.3, 0.0, 0.0}, {0.3, 0.3}, {0.3, 0.3}};
  for (double a : pol(obs)) CHECK(std::abs(a) < 1e-12);
}

TEST_CASE("push keeps the object on the plane and moves it only on contact") {
  auto env = make_env(Task::kPush, RewardMode::kDense);
  env->reset(11);
  const auto obj = env->object_position();
  // Moving directly away from the object never drags it.
  const auto a = env->agent_position();
  const double dx = a[0] - obj[0], dy = a[1] - obj[1], n = std::hypot(dx, dy);
  for (int i = 0; i < 10 && !env->done(); ++i) env->step(std::vector<double>{dx / n, dy / n});
  CHECK(env->object_position() == obj);
  CHECK(env->observe().observation.size() == 8);
}

TEST_CASE("pick-and-place gripper attaches only within reach") {
  auto env = make_env(Task::kPickPlace, RewardMode::kSparse);
  env->reset(4);
  env->step(std::vector<double>{0.0, 0.0, -1.0});
  CHECK_FALSE(env->grasped());  // layouts start out of contact
  const auto pol = oracle_policy(env->spec());
  auto obs = env->observe();
  bool ever_grasped = false;
  while (!env->done()) {
    obs = env->step(pol(obs)).observation;
    ever_grasped |= env->grasped();
    CHECK(obs.observation.back() == (env->grasped() ? 1.0 : 0.0));
  }
  CHECK(ever_grasped);
}

TEST_CASE("derived seeds are distinct and stable") {
  CHECK(derive_seed(1, 2) == derive_seed(1, 2));
  CHECK(derive_seed(1, 2) != derive_seed(2, 1));
  CHECK(derive_seed(1, 2) != derive_seed(1, 3));
}
