#include "gdt/cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"

#include "gdt/dataset.hpp"
#include "gdt/errors.hpp"
#include "gdt/experiment.hpp"
#include "gdt/trainer.hpp"

namespace gdt::cli {

namespace {

namespace fs = std::filesystem;

const std::vector<std::string> kEnvNames{"point-reach", "point-push", "point-pickplace"};
const std::vector<std::string> kRewardNames{"sparse", "dense"};

/// Flag combinations that parse but make no sense; reported as usage errors.
class UsageError : public ContractError {
 public:
  using ContractError::ContractError;
  const char* kind() const noexcept override { return "usage"; }
};

std::string join_command(const std::vector<std::string>& args) {
  std::string out = "gdt";
  for (const auto& a : args) out += " " + a;
  return out;
}

void ensure_not_input(const fs::path& out, std::initializer_list<fs::path> inputs) {
  for (const auto& in : inputs) {
    std::error_code ec;
    if (fs::exists(in) && fs::exists(out) && fs::equivalent(in, out, ec)) {
      throw UsageError("output '" + out.string() + "' would overwrite input '" + in.string() + "'");
    }
  }
}

void print_manifest(std::ostream& out, const data::DatasetManifest& m) { out << nlohmann::json(m).dump(2) << '\n'; }

// Flags shared by train and experiment; each maps onto one config field.
void add_model_flags(CLI::App* app, dt::DTConfig& shape, train::TrainConfig& tc) {
  app->add_option("--context", shape.context_length, "Context length K in timesteps")->check(CLI::PositiveNumber);
  app->add_option("--embed-dim", shape.embed_dim, "Embedding width")->check(CLI::PositiveNumber);
  app->add_option("--layers", shape.n_layers, "Transformer blocks")->check(CLI::PositiveNumber);
  app->add_option("--heads", shape.n_heads, "Attention heads (must divide embed-dim)")->check(CLI::PositiveNumber);
  app->add_option("--dropout", shape.dropout, "Dropout probability")->check(CLI::Range(0.0, 0.999999));
  app->add_option("--max-timestep", shape.max_timestep, "Size of the timestep embedding table")
      ->check(CLI::PositiveNumber);
  app->add_option("--batch-size", tc.batch_size, "Windows per update")->check(CLI::PositiveNumber);
  app->add_option("--updates", tc.n_updates, "Optimizer updates")->check(CLI::PositiveNumber);
  app->add_option("--lr", tc.optimizer.learning_rate, "Peak learning rate")->check(CLI::PositiveNumber);
  app->add_option("--warmup", tc.optimizer.warmup_steps, "Linear warmup updates");
  app->add_option("--weight-decay", tc.optimizer.weight_decay, "Decoupled weight decay");
  app->add_option("--clip-norm", tc.optimizer.clip_norm, "Global gradient-norm clip (<= 0 disables)");
  app->add_option("--log-interval", tc.log_interval, "Updates between loss reports")->check(CLI::PositiveNumber);
  app->add_flag("!--no-normalize", tc.normalize, "Feed raw states instead of standardized ones");
}

struct Options {
  std::uint64_t seed = 0;

  // gen-data
  std::string env_name;
  std::string reward = "sparse";
  std::string policy;
  std::size_t transitions = 50000;
  fs::path out;

  // mix / subset
  fs::path expert_path, random_path, in_path;
  double fraction = 1.0;
  std::optional<std::size_t> subset_transitions;
  std::optional<double> subset_fraction;

  // train / eval
  fs::path data_path, model_path;
  dt::DTConfig shape = train::desk_shape();
  train::TrainConfig train = train::desk_config();
  std::optional<std::size_t> eval_interval;
  std::optional<double> target;
  std::size_t eval_timesteps = 2000;
  std::size_t n_seeds = 3;
  std::string eval_env;
  std::string eval_reward;

  // experiment
  std::string rq;
  std::vector<std::string> envs;
  std::vector<std::string> rewards;
  std::vector<double> grid;
  fs::path data_dir = "data";
  bool auto_gen = false;

  // report
  std::vector<fs::path> csvs;
  fs::path out_dir = "report";
};

int run_gen_data(const Options& o, const std::string& command, std::ostream& out) {
  const auto spec = env::make_spec(env::parse_task(o.env_name), env::parse_reward_mode(o.reward));
  auto ds = data::record(spec, data::parse_policy_tag(o.policy), o.transitions, o.seed);
  ds.manifest.command = command;
  data::save(ds, o.out);
  print_manifest(out, ds.manifest);
  return kExitOk;
}

int run_mix(const Options& o, const std::string& command, std::ostream& out) {
  ensure_not_input(o.out, {o.expert_path, o.random_path});
  auto ds = data::mix(data::load(o.expert_path), data::load(o.random_path), o.fraction, o.transitions, o.seed);
  ds.manifest.command = command;
  data::save(ds, o.out);
  print_manifest(out, ds.manifest);
  return kExitOk;
}

int run_subset(const Options& o, const std::string& command, std::ostream& out) {
  ensure_not_input(o.out, {o.in_path});
  const auto source = data::load(o.in_path);
  std::size_t n = 0;
  if (o.subset_transitions) {
    n = *o.subset_transitions;
  } else {
    n = static_cast<std::size_t>(std::llround(*o.subset_fraction * static_cast<double>(source.manifest.n_transitions)));
    n = std::max<std::size_t>(n, 1);
  }
  auto ds = data::subset(source, n, o.seed);
  ds.manifest.command = command;
  data::save(ds, o.out);
  print_manifest(out, ds.manifest);
  return kExitOk;
}

int run_inspect(const Options& o, std::ostream& out) {
  print_manifest(out, data::load(o.in_path).manifest);
  return kExitOk;
}

int run_train(Options o, const std::string& command, std::ostream& out) {
  ensure_not_input(o.out, {o.data_path});
  const auto ds = data::load(o.data_path);
  o.train.seed = o.seed;
  o.train.eval_interval = o.eval_interval.value_or(o.train.n_updates);
  if (o.target) {
    o.train.target_mode = train::TargetMode::kFixed;
    o.train.fixed_target = *o.target;
  }
  dt::DTModel model(train::config_for(ds.manifest, o.shape), env::derive_seed(o.seed, 0x1417));
  const auto env_spec = env::make_spec(env::parse_task(ds.manifest.env_name), ds.manifest.reward_mode);
  std::optional<data::Normalization> norm;
  if (o.train.normalize) norm = ds.manifest.normalization;
  const double target = train::resolve_target(ds.manifest, o.train);

  train::TrainHooks hooks;
  hooks.on_loss = [&](const train::LossPoint& p) { out << "update " << p.update << " loss " << p.loss << '\n'; };
  if (o.eval_interval) {
    hooks.on_eval = [&](std::size_t update, const dt::DTModel& m) {
      train::EvalConfig ec;
      ec.n_timesteps = o.eval_timesteps;
      ec.seeds = {o.seed};
      const auto rep = train::evaluate(m, norm, env_spec, target, ec);
      out << "update " << update << " eval success " << rep.success_rate << "% return " << rep.mean_return << '\n';
    };
  }
  const auto result = train::train(model, ds, o.train, hooks);

  train::ModelBundle bundle{std::move(model), norm, result.target_return, ds.manifest.env_name,
                            ds.manifest.reward_mode, nlohmann::json::object()};
  bundle.extra["command"] = command;
  bundle.extra["train"] = o.train;
  bundle.extra["dataset"] = o.data_path.string();
  bundle.extra["dataset_transitions"] = ds.manifest.n_transitions;
  train::save_bundle(bundle, o.out);
  out << "saved " << o.out.string() << " (" << bundle.model.parameter_count() << " parameters, target return "
      << result.target_return << ")\n";
  return kExitOk;
}

int run_eval(const Options& o, const std::string& command, std::ostream& out) {
  const auto bundle = train::load_bundle(o.model_path);
  const std::string env_name = o.eval_env.empty() ? bundle.env_name : o.eval_env;
  const auto mode = o.eval_reward.empty() ? bundle.reward_mode : env::parse_reward_mode(o.eval_reward);
  const auto spec = env::make_spec(env::parse_task(env_name), mode);
  const double target = o.target.value_or(bundle.target_return);

  train::EvalConfig ec;
  ec.n_timesteps = o.eval_timesteps;
  ec.seeds.clear();
  for (std::size_t i = 0; i < o.n_seeds; ++i) ec.seeds.push_back(o.seed + i);
  const auto report = train::evaluate(bundle.model, bundle.normalization, spec, target, ec);
  out << nlohmann::json(report).dump(2) << '\n';

  if (!o.out.empty()) {
    exp::ResultTable table;
    table.comments.push_back("command: " + command);
    table.comments.push_back("model: " + o.model_path.string() + ", seed: " + std::to_string(o.seed));
    table.comments.push_back("mean_return: per-episode return averaged over completed evaluation episodes; "
                             "agg rows give the mean and population std over seeds");
    const std::size_t transitions = bundle.extra.value("dataset_transitions", std::size_t{0});
    std::vector<exp::ResultRow> rows;
    for (const auto& s : report.per_seed) {
      exp::ResultRow r;
      r.env = env_name;
      r.reward_mode = env::to_string(mode);
      r.setting_name = "target_return";
      r.setting_value = target;
      r.seed = std::to_string(s.seed);
      r.episodes = s.episodes;
      r.success_rate = s.success_rate;
      r.mean_return = s.mean_return;
      r.transitions = transitions;
      rows.push_back(r);
    }
    table.rows = rows;
    table.rows.push_back(exp::aggregate(rows));
    exp::save_csv(table, o.out);
  }
  return kExitOk;
}

int run_experiment_cmd(const Options& o, const std::string& command, std::ostream& out, std::ostream& err) {
  exp::ExperimentSpec spec;
  spec.question = exp::parse_question(o.rq);
  if (!o.envs.empty()) spec.envs = o.envs;
  if (!o.rewards.empty()) {
    spec.rewards.clear();
    for (const auto& r : o.rewards) spec.rewards.push_back(env::parse_reward_mode(r));
  }
  spec.grid = o.grid;
  spec.data_dir = o.data_dir;
  spec.auto_generate = o.auto_gen;
  spec.full_transitions = o.transitions;
  spec.n_seeds = o.n_seeds;
  spec.seed = o.seed;
  spec.shape = o.shape;
  spec.train = o.train;
  spec.train.eval_interval = spec.train.n_updates;
  if (o.target) {
    spec.train.target_mode = train::TargetMode::kFixed;
    spec.train.fixed_target = *o.target;
  }
  spec.eval_timesteps = o.eval_timesteps;
  spec.command = command;
  const auto table = exp::run_experiment(spec, [&](const std::string& msg) { err << msg << '\n'; });
  exp::save_csv(table, o.out);
  out << exp::summary_text({table});
  return kExitOk;
}

int run_report(const Options& o, const std::string& command, std::ostream& out) {
  if (o.csvs.empty()) throw UsageError("report needs at least one experiment CSV");
  std::vector<exp::ResultTable> tables;
  std::vector<std::string> comments{"command: " + command};
  for (const auto& p : o.csvs) {
    tables.push_back(exp::load_csv(p));
    exp::verify_aggregates(tables.back());
    comments.push_back("source: " + p.string());
  }
  fs::create_directories(o.out_dir);
  for (const auto& fig : exp::build_figures(tables)) {
    const auto path = o.out_dir / (fig.name + ".csv");
    std::ofstream f(path);
    if (!f) throw IoError("cannot write '" + path.string() + "'");
    exp::write_figure(f, fig, comments);
  }
  const std::string summary = exp::summary_text(tables);
  std::ofstream s(o.out_dir / "summary.txt");
  for (const auto& c : comments) s << "# " << c << '\n';
  s << summary;
  out << summary;
  return kExitOk;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Goal-conditioned Decision Transformer workbench", "gdt"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1, 1);

  auto add_seed = [&](CLI::App* sub) { sub->add_option("--seed", o.seed, "Random seed"); };

  auto* gen = app.add_subcommand("gen-data", "Record episodes of the oracle or a random policy");
  gen->add_option("--env", o.env_name, "Environment")->required()->check(CLI::IsMember(kEnvNames));
  gen->add_option("--reward", o.reward, "Reward mode")->check(CLI::IsMember(kRewardNames));
  gen->add_option("--policy", o.policy, "Source policy")->required()->check(CLI::IsMember({"expert", "random"}));
  gen->add_option("--transitions", o.transitions, "Minimum transitions (whole episodes)")->check(CLI::PositiveNumber);
  gen->add_option("--out", o.out, "Output dataset file")->required();
  add_seed(gen);

  auto* mix = app.add_subcommand("mix", "Blend expert and random episodes at a transition ratio");
  mix->add_option("--expert", o.expert_path, "Expert dataset")->required();
  mix->add_option("--random", o.random_path, "Random dataset")->required();
  mix->add_option("--fraction", o.fraction, "Expert share of transitions")->required()->check(CLI::Range(0.0, 1.0));
  mix->add_option("--transitions", o.transitions, "Total transitions")->check(CLI::PositiveNumber);
  mix->add_option("--out", o.out, "Output dataset file")->required();
  add_seed(mix);

  auto* sub = app.add_subcommand("subset", "Sample whole episodes down to a transition budget");
  sub->add_option("--in", o.in_path, "Source dataset")->required();
  auto* sub_n = sub->add_option("--transitions", o.subset_transitions, "Transition budget")->check(CLI::PositiveNumber);
  auto* sub_f = sub->add_option("--fraction", o.subset_fraction, "Budget as a share of the source")
                    ->check(CLI::Range(0.0, 1.0));
  sub_n->excludes(sub_f);
  sub->add_option("--out", o.out, "Output dataset file")->required();
  add_seed(sub);

  auto* inspect = app.add_subcommand("inspect", "Print a dataset manifest as JSON");
  inspect->add_option("path", o.in_path, "Dataset file")->required();
  add_seed(inspect);

  auto* tr = app.add_subcommand("train", "Train a model on a dataset");
  tr->add_option("--data", o.data_path, "Training dataset")->required();
  tr->add_option("--out", o.out, "Output checkpoint (sidecar written to <out>.json)")->required();
  add_model_flags(tr, o.shape, o.train);
  tr->add_option("--eval-interval", o.eval_interval, "Updates between quick evaluations (default: none)")
      ->check(CLI::PositiveNumber);
  tr->add_option("--eval-timesteps", o.eval_timesteps, "Timesteps per quick evaluation")->check(CLI::PositiveNumber);
  tr->add_option("--target", o.target, "Fixed return-to-go target (default: best return in the dataset)");
  add_seed(tr);

  auto* ev = app.add_subcommand("eval", "Roll out a trained model and report success and return");
  ev->add_option("--model", o.model_path, "Checkpoint written by train")->required();
  ev->add_option("--env", o.eval_env, "Environment (default: the training environment)")
      ->check(CLI::IsMember(kEnvNames));
  ev->add_option("--reward", o.eval_reward, "Reward mode (default: the training mode)")
      ->check(CLI::IsMember(kRewardNames));
  ev->add_option("--timesteps", o.eval_timesteps, "Timesteps per seed")->check(CLI::PositiveNumber);
  ev->add_option("--n-seeds", o.n_seeds, "Evaluation seeds, counted up from --seed")->check(CLI::PositiveNumber);
  ev->add_option("--target", o.target, "Return-to-go target (default: stored with the model)");
  ev->add_option("--out", o.out, "Optional results CSV");
  add_seed(ev);

  auto* ex = app.add_subcommand("experiment", "Run a research-question sweep and write a results CSV");
  ex->add_option("--rq", o.rq, "Research question")->required()->check(CLI::IsMember({"rq1", "rq3", "rq4"}));
  ex->add_option("--env", o.envs, "Environments (repeatable; default: all)")->check(CLI::IsMember(kEnvNames));
  ex->add_option("--reward", o.rewards, "Reward modes (repeatable; default: dense and sparse)")
      ->check(CLI::IsMember(kRewardNames));
  ex->add_option("--grid", o.grid, "Override the sweep values");
  ex->add_option("--data-dir", o.data_dir, "Directory holding <env>-<reward>-<policy>.gde sources");
  ex->add_flag("--auto-gen", o.auto_gen, "Record missing source datasets");
  ex->add_option("--transitions", o.transitions, "Full dataset size")->check(CLI::PositiveNumber);
  ex->add_option("--n-seeds", o.n_seeds, "Training/evaluation seeds per setting")->check(CLI::PositiveNumber);
  ex->add_option("--timesteps", o.eval_timesteps, "Evaluation timesteps per seed")->check(CLI::PositiveNumber);
  ex->add_option("--target", o.target, "Fixed return-to-go target (default: best return in each dataset)");
  ex->add_option("--out", o.out, "Results CSV")->required();
  add_model_flags(ex, o.shape, o.train);
  add_seed(ex);

  auto* rep = app.add_subcommand("report", "Summarize experiment CSVs into per-figure tables");
  rep->add_option("csv", o.csvs, "Experiment CSV files");
  rep->add_option("--out-dir", o.out_dir, "Directory for per-figure CSVs and summary.txt");
  add_seed(rep);

  const std::string command = join_command(args);
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: usage: " << msg << '\n';
    return kExitUsage;
  }

  try {
    if (*gen) return run_gen_data(o, command, out);
    if (*mix) return run_mix(o, command, out);
    if (*sub) {
      if (!o.subset_transitions && !o.subset_fraction) throw UsageError("subset needs --transitions or --fraction");
      return run_subset(o, command, out);
    }
    if (*inspect) return run_inspect(o, out);
    if (*tr) return run_train(o, command, out);
    if (*ev) return run_eval(o, command, out);
    if (*ex) return run_experiment_cmd(o, command, out, err);
    if (*rep) return run_report(o, command, out);
  } catch (const UsageError& e) {
    err << "error: usage: " << e.what() << '\n';
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.kind() << ": " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: internal: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return dispatch(args, out, err);
}

}  // namespace gdt::cli
