#include "gdt/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <thread>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "gdt/errors.hpp"
#include "gdt/ops.hpp"

namespace gdt::train {

namespace {

// Offsets mixing the user seed into independent streams.
constexpr std::uint64_t kSampleStream = 0x5A17;
constexpr std::uint64_t kDropoutStream = 0xD809;
constexpr std::uint64_t kEvalStream = 0xE7A1;

// Training allocates and frees the same large buffers every update; keeping them
// on the heap instead of mmap/munmap cuts system time by about a third.
void tune_allocator() {
#if defined(__GLIBC__)
  static std::once_flag once;
  std::call_once(once, [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    mallopt(M_TOP_PAD, 64 << 20);
  });
#endif
}

std::string target_mode_name(TargetMode m) { return m == TargetMode::kBestInDataset ? "best" : "fixed"; }

void write_state(std::span<double> dst, std::span<const double> src, const data::Normalization* norm) {
  for (std::size_t d = 0; d < src.size(); ++d) {
    dst[d] = norm == nullptr ? src[d] : (src[d] - norm->mean[d]) / norm->std[d];
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size == 0 || n_updates == 0 || eval_interval == 0 || log_interval == 0) {
    throw ContractError("train config: batch_size, n_updates, eval_interval and log_interval must be positive");
  }
  if (eval_interval > n_updates) {
    throw ContractError("train config: eval_interval (" + std::to_string(eval_interval) + ") exceeds n_updates (" +
                        std::to_string(n_updates) + ")");
  }
  if (!(optimizer.learning_rate > 0.0)) throw ContractError("train config: learning rate must be positive");
}

dt::DTConfig desk_shape() {
  dt::DTConfig c;
  c.context_length = 5;
  c.embed_dim = 32;
  c.n_layers = 2;
  c.n_heads = 1;
  c.dropout = 0.1;
  return c;
}

TrainConfig desk_config() {
  TrainConfig c;
  c.batch_size = 64;
  c.n_updates = 2000;
  c.eval_interval = 2000;
  c.optimizer.learning_rate = 1e-3;
  c.optimizer.warmup_steps = 100;
  return c;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"batch_size", c.batch_size},
                     {"n_updates", c.n_updates},
                     {"eval_interval", c.eval_interval},
                     {"log_interval", c.log_interval},
                     {"seed", c.seed},
                     {"target_mode", target_mode_name(c.target_mode)},
                     {"fixed_target", c.fixed_target},
                     {"normalize", c.normalize},
                     {"learning_rate", c.optimizer.learning_rate},
                     {"beta1", c.optimizer.beta1},
                     {"beta2", c.optimizer.beta2},
                     {"adam_eps", c.optimizer.eps},
                     {"weight_decay", c.optimizer.weight_decay},
                     {"warmup_steps", c.optimizer.warmup_steps},
                     {"clip_norm", c.optimizer.clip_norm}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("batch_size").get_to(c.batch_size);
  j.at("n_updates").get_to(c.n_updates);
  j.at("eval_interval").get_to(c.eval_interval);
  j.at("log_interval").get_to(c.log_interval);
  j.at("seed").get_to(c.seed);
  c.target_mode = j.at("target_mode").get<std::string>() == "fixed" ? TargetMode::kFixed : TargetMode::kBestInDataset;
  j.at("fixed_target").get_to(c.fixed_target);
  j.at("normalize").get_to(c.normalize);
  j.at("learning_rate").get_to(c.optimizer.learning_rate);
  j.at("beta1").get_to(c.optimizer.beta1);
  j.at("beta2").get_to(c.optimizer.beta2);
  j.at("adam_eps").get_to(c.optimizer.eps);
  j.at("weight_decay").get_to(c.optimizer.weight_decay);
  j.at("warmup_steps").get_to(c.optimizer.warmup_steps);
  j.at("clip_norm").get_to(c.optimizer.clip_norm);
}

dt::TrajectoryWindow make_window(const data::Episode& episode, std::size_t end, std::size_t context,
                                 const data::Normalization* norm) {
  if (end >= episode.size()) {
    throw RangeError("window end " + std::to_string(end) + " outside episode of length " +
                     std::to_string(episode.size()));
  }
  const std::size_t flat = episode.transitions[end].flat_state.size();
  const std::size_t act = episode.transitions[end].action.size();
  auto w = dt::TrajectoryWindow::padded(context, flat, act);
  const std::size_t len = std::min(context, end + 1);
  const std::size_t start = end + 1 - len;
  const std::size_t pad = context - len;
  for (std::size_t i = 0; i < len; ++i) {
    const auto& tr = episode.transitions[start + i];
    const std::size_t row = pad + i;
    write_state(std::span(w.states).subspan(row * flat, flat), tr.flat_state, norm);
    std::copy(tr.action.begin(), tr.action.end(), w.actions.begin() + static_cast<std::ptrdiff_t>(row * act));
    w.returns_to_go[row] = episode.returns_to_go[start + i];
    w.timesteps[row] = start + i;
    w.mask[row] = 1;
  }
  return w;
}

WindowSampler::WindowSampler(const data::Dataset& ds, std::size_t context, bool normalize)
    : ds_(ds), context_(context), normalize_(normalize) {
  if (ds.episodes.empty()) throw ContractError("cannot sample windows from an empty dataset");
  if (context == 0) throw ContractError("context length must be positive");
  std::size_t total = 0;
  for (const auto& ep : ds.episodes) {
    total += ep.size();
    ends_.push_back(total);
  }
  if (normalize && ds.manifest.normalization.mean.size() != ds.manifest.flat_state_dim()) {
    throw ContractError("dataset manifest carries no normalization statistics");
  }
}

std::pair<std::size_t, std::size_t> WindowSampler::locate(std::size_t i) const {
  const auto it = std::upper_bound(ends_.begin(), ends_.end(), i);
  const auto e = static_cast<std::size_t>(it - ends_.begin());
  const std::size_t begin = e == 0 ? 0 : ends_[e - 1];
  return {e, i - begin};
}

std::vector<dt::TrajectoryWindow> WindowSampler::sample(std::size_t batch_size, std::mt19937_64& rng) const {
  std::uniform_int_distribution<std::size_t> pick(0, ends_.back() - 1);
  const data::Normalization* norm = normalize_ ? &ds_.manifest.normalization : nullptr;
  std::vector<dt::TrajectoryWindow> out;
  out.reserve(batch_size);
  for (std::size_t b = 0; b < batch_size; ++b) {
    const auto [e, t] = locate(pick(rng));
    out.push_back(make_window(ds_.episodes[e], t, context_, norm));
  }
  return out;
}

std::vector<dt::TrajectoryWindow> sample_batch(const data::Dataset& ds, std::size_t context, std::size_t batch_size,
                                               std::mt19937_64& rng, bool normalize) {
  return WindowSampler(ds, context, normalize).sample(batch_size, rng);
}

dt::DTConfig config_for(const data::DatasetManifest& manifest, dt::DTConfig shape) {
  shape.state_dim = manifest.state_dim;
  shape.goal_dim = manifest.goal_dim;
  shape.action_dim = manifest.action_dim;
  shape.validate();
  return shape;
}

double resolve_target(const data::DatasetManifest& manifest, const TrainConfig& config) {
  return config.target_mode == TargetMode::kFixed ? config.fixed_target : manifest.best_return;
}

TrainResult train(dt::DTModel& model, const data::Dataset& ds, const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  tune_allocator();
  const auto& mc = model.config;
  const auto& m = ds.manifest;
  if (mc.state_dim != m.state_dim || mc.goal_dim != m.goal_dim || mc.action_dim != m.action_dim) {
    throw DimensionError("model dimensions (state " + std::to_string(mc.state_dim) + ", goal " +
                         std::to_string(mc.goal_dim) + ", action " + std::to_string(mc.action_dim) +
                         ") do not match dataset " + m.env_name);
  }

  const WindowSampler sampler(ds, mc.context_length, config.normalize);
  std::mt19937_64 sample_rng(env::derive_seed(config.seed, kSampleStream));
  std::mt19937_64 dropout_rng(env::derive_seed(config.seed, kDropoutStream));
  std::vector<Tensor> params = model.parameters();
  OptimizerState opt = make_optimizer_state(params, config.optimizer);

  TrainResult result;
  result.target_return = resolve_target(m, config);
  for (std::size_t update = 0; update < config.n_updates; ++update) {
    const auto windows = sampler.sample(config.batch_size, sample_rng);
    double loss_value = 0.0;
    {
      Tape tape;
      TapeScope scope(tape);
      const Tensor pred = dt::forward(windows, model, {.training = true, .rng = &dropout_rng});
      const Tensor loss = dt::action_loss(pred, dt::stack_actions(windows, mc.action_dim), dt::stack_masks(windows));
      loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        throw TrainingError("loss became non-finite at update " + std::to_string(update));
      }
      tape.backward(loss);
    }
    clip_grad_norm(params, config.optimizer.clip_norm);
    adam_step(params, opt);
    for (auto& p : params) p.zero_grad();

    const std::size_t done = update + 1;
    if (update % config.log_interval == 0 || done == config.n_updates) {
      result.loss_curve.push_back({update, loss_value});
      if (hooks.on_loss) hooks.on_loss(result.loss_curve.back());
    }
    if (hooks.on_eval && done % config.eval_interval == 0) hooks.on_eval(done, model);
  }
  for (const auto& p : params) {
    for (double v : p.data()) {
      if (!std::isfinite(v)) throw TrainingError("non-finite parameter after training");
    }
  }
  return result;
}

namespace {

class PolicyAgent : public Agent {
 public:
  explicit PolicyAgent(env::Policy policy) : policy_(std::move(policy)) {}
  void begin_episode(const env::GoalObservation&) override {}
  env::Vec act(const env::GoalObservation& obs) override { return policy_(obs); }
  void observe(const env::Vec&, const env::StepResult&) override {}

 private:
  env::Policy policy_;
};

}  // namespace

std::unique_ptr<Agent> policy_agent(env::Policy policy) { return std::make_unique<PolicyAgent>(std::move(policy)); }

DTAgent::DTAgent(const dt::DTModel& model, std::optional<data::Normalization> norm, double target_return)
    : model_(model), norm_(std::move(norm)), target_(target_return) {}

void DTAgent::begin_episode(const env::GoalObservation&) {
  history_.clear();
  rtg_ = target_;
  collected_ = 0.0;
  t_ = 0;
}

dt::TrajectoryWindow DTAgent::current_window(const env::GoalObservation& obs) const {
  const auto& c = model_.config;
  const std::size_t flat = c.flat_state_dim();
  const std::size_t act = c.action_dim;
  const std::size_t k = c.context_length;
  auto w = dt::TrajectoryWindow::padded(k, flat, act);
  const std::size_t len = history_.size() + 1;
  const std::size_t pad = k - len;
  const data::Normalization* norm = norm_ ? &*norm_ : nullptr;
  for (std::size_t i = 0; i < history_.size(); ++i) {
    const auto& s = history_[i];
    const std::size_t row = pad + i;
    std::copy(s.state.begin(), s.state.end(), w.states.begin() + static_cast<std::ptrdiff_t>(row * flat));
    std::copy(s.action.begin(), s.action.end(), w.actions.begin() + static_cast<std::ptrdiff_t>(row * act));
    w.returns_to_go[row] = s.rtg;
    w.timesteps[row] = s.t;
    w.mask[row] = 1;
  }
  const std::size_t row = k - 1;
  write_state(std::span(w.states).subspan(row * flat, flat), env::flatten_state(obs), norm);
  w.returns_to_go[row] = rtg_;
  w.timesteps[row] = std::min(t_, c.max_timestep - 1);
  w.mask[row] = 1;
  return w;
}

env::Vec DTAgent::act(const env::GoalObservation& obs) {
  const auto window = current_window(obs);
  const Tensor pred = dt::forward(window, model_);
  const std::size_t act = model_.config.action_dim;
  const auto row = pred.data().subspan((model_.config.context_length - 1) * act, act);
  const std::size_t flat = model_.config.flat_state_dim();
  const std::size_t last = model_.config.context_length - 1;
  history_.push_back({std::vector<double>(window.states.begin() + static_cast<std::ptrdiff_t>(last * flat),
                                          window.states.end()),
                      env::Vec(row.begin(), row.end()), rtg_, window.timesteps[last]});
  return env::Vec(row.begin(), row.end());
}

void DTAgent::observe(const env::Vec& action, const env::StepResult& result) {
  if (!history_.empty()) history_.back().action = action;
  // Recomputed from the running total, so the fed value is exactly target minus
  // everything collected rather than an accumulation of per-step roundings.
  collected_ += result.reward;
  rtg_ = target_ - collected_;
  ++t_;
  if (history_.size() + 1 > model_.config.context_length) history_.erase(history_.begin());
}

std::size_t default_threads() {
  if (const char* v = std::getenv("GDT_THREADS"); v != nullptr && *v != '\0') {
    char* end = nullptr;
    const long n = std::strtol(v, &end, 10);
    if (end != v && *end == '\0' && n > 0) return static_cast<std::size_t>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

std::pair<double, double> mean_std(std::span<const double> values) {
  if (values.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  return {mean, std::sqrt(var / static_cast<double>(values.size()))};
}

namespace {

SeedResult run_seed(const AgentFactory& factory, const env::EnvSpec& spec, std::uint64_t seed,
                    std::size_t n_timesteps) {
  auto environment = env::make_env(spec.name, spec.reward_mode);
  auto agent = factory();
  SeedResult r;
  r.seed = seed;
  double return_sum = 0.0;
  const std::uint64_t base = env::derive_seed(seed, kEvalStream);
  while (r.timesteps < n_timesteps) {
    auto obs = environment->reset(env::derive_seed(base, r.episodes));
    agent->begin_episode(obs);
    double ep_return = 0.0;
    bool success = false;
    while (true) {
      const env::Vec action = agent->act(obs);
      env::StepResult step = environment->step(action);
      agent->observe(action, step);
      ep_return += step.reward;
      ++r.timesteps;
      if (step.terminated || step.truncated) {
        success = step.terminated;
        break;
      }
      obs = std::move(step.observation);
    }
    ++r.episodes;
    r.successes += success ? 1 : 0;
    return_sum += ep_return;
  }
  r.success_rate = 100.0 * static_cast<double>(r.successes) / static_cast<double>(r.episodes);
  r.mean_return = return_sum / static_cast<double>(r.episodes);
  return r;
}

}  // namespace

EvalReport evaluate(const AgentFactory& factory, const env::EnvSpec& spec, const EvalConfig& config,
                    double target_return) {
  if (config.seeds.empty()) throw ContractError("evaluation needs at least one seed");
  if (config.n_timesteps == 0) throw ContractError("evaluation needs a positive timestep budget");

  std::vector<SeedResult> results(config.seeds.size());
  const std::size_t workers = std::min(config.threads == 0 ? default_threads() : config.threads, results.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < results.size(); ++i) {
      results[i] = run_seed(factory, spec, config.seeds[i], config.n_timesteps);
    }
  } else {
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < results.size(); i += workers) {
            results[i] = run_seed(factory, spec, config.seeds[i], config.n_timesteps);
          }
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  EvalReport report;
  report.env_name = spec.name;
  report.reward_mode = spec.reward_mode;
  report.target_return = target_return;
  report.n_timesteps = config.n_timesteps;
  std::vector<double> success, returns;
  for (const auto& r : results) {
    report.episodes += r.episodes;
    success.push_back(r.success_rate);
    returns.push_back(r.mean_return);
  }
  std::tie(report.success_rate, report.success_std) = mean_std(success);
  std::tie(report.mean_return, report.return_std) = mean_std(returns);
  report.per_seed = std::move(results);
  return report;
}

EvalReport evaluate(const dt::DTModel& model, const std::optional<data::Normalization>& norm,
                    const env::EnvSpec& spec, double target_return, const EvalConfig& config) {
  const auto& c = model.config;
  if (c.state_dim != spec.state_dim || c.goal_dim != spec.goal_dim || c.action_dim != spec.action_dim) {
    throw DimensionError("model dimensions do not match environment " + spec.name);
  }
  if (c.max_timestep < spec.episode_horizon) {
    throw ContractError("model max_timestep " + std::to_string(c.max_timestep) + " is below the episode horizon");
  }
  const AgentFactory factory = [&] { return std::make_unique<DTAgent>(model, norm, target_return); };
  return evaluate(factory, spec, config, target_return);
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  nlohmann::json seeds = nlohmann::json::array();
  for (const auto& s : r.per_seed) {
    seeds.push_back({{"seed", s.seed},
                     {"episodes", s.episodes},
                     {"successes", s.successes},
                     {"timesteps", s.timesteps},
                     {"success_rate", s.success_rate},
                     {"mean_return", s.mean_return}});
  }
  j = nlohmann::json{{"env", r.env_name},
                     {"reward_mode", env::to_string(r.reward_mode)},
                     {"target_return", r.target_return},
                     {"n_timesteps", r.n_timesteps},
                     {"episodes", r.episodes},
                     {"success_rate", r.success_rate},
                     {"success_std", r.success_std},
                     {"mean_return", r.mean_return},
                     {"return_std", r.return_std},
                     {"per_seed", seeds}};
}

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".json";
  return p;
}

void save_bundle(const ModelBundle& bundle, const std::filesystem::path& path) {
  save_parameters(path, bundle.model.named_parameters());
  nlohmann::json j{{"config", bundle.model.config},
                   {"target_return", bundle.target_return},
                   {"env", bundle.env_name},
                   {"reward_mode", env::to_string(bundle.reward_mode)},
                   {"normalize", bundle.normalization.has_value()},
                   {"extra", bundle.extra}};
  if (bundle.normalization) {
    j["normalization"] = {{"mean", bundle.normalization->mean}, {"std", bundle.normalization->std}};
  }
  std::ofstream out(sidecar_path(path));
  if (!out) throw IoError("cannot write '" + sidecar_path(path).string() + "'");
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing '" + sidecar_path(path).string() + "'");
}

ModelBundle load_bundle(const std::filesystem::path& path) {
  std::ifstream in(sidecar_path(path));
  if (!in) throw IoError("cannot open model sidecar '" + sidecar_path(path).string() + "'");
  nlohmann::json j;
  try {
    in >> j;
    const auto config = j.at("config").get<dt::DTConfig>();
    ModelBundle b{dt::DTModel(config, 0), std::nullopt, j.at("target_return").get<double>(),
                  j.at("env").get<std::string>(), env::parse_reward_mode(j.at("reward_mode").get<std::string>()),
                  j.value("extra", nlohmann::json::object())};
    if (j.at("normalize").get<bool>()) {
      b.normalization = data::Normalization{j.at("normalization").at("mean").get<std::vector<double>>(),
                                            j.at("normalization").at("std").get<std::vector<double>>()};
    }
    b.model.load_parameters(load_parameters(path));
    return b;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed model sidecar '" + sidecar_path(path).string() + "': " + e.what());
  }
}

}  // namespace gdt::train
