#include <sstream>

#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "gdt/cli.hpp"
#include "gdt/dataset.hpp"
#include "gdt/envs.hpp"
#include "gdt/errors.hpp"
#include "gdt/model.hpp"
#include "gdt/trainer.hpp"

namespace py = pybind11;
using namespace gdt;

namespace {

// JSON crosses the boundary as text; the Python side decodes it.
template <typename T>
std::string as_json(const T& v) {
  return nlohmann::json(v).dump();
}

py::array_t<double> matrix(const std::vector<std::vector<double>>& rows, std::size_t cols) {
  py::array_t<double> out({rows.size(), cols});
  auto m = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < cols; ++j) m(i, j) = rows[i][j];
  }
  return out;
}

py::dict observation_dict(const env::GoalObservation& obs) {
  py::dict d;
  d["observation"] = py::array_t<double>(obs.observation.size(), obs.observation.data());
  d["desired_goal"] = py::array_t<double>(obs.desired_goal.size(), obs.desired_goal.data());
  d["achieved_goal"] = py::array_t<double>(obs.achieved_goal.size(), obs.achieved_goal.data());
  return d;
}

env::GoalObservation observation_from(const py::dict& d) {
  return {d["observation"].cast<env::Vec>(), d["desired_goal"].cast<env::Vec>(),
          d["achieved_goal"].cast<env::Vec>()};
}

py::dict episode_dict(const data::Episode& ep) {
  std::vector<std::vector<double>> states, actions;
  std::vector<double> rewards;
  std::vector<bool> terminated, truncated;
  for (const auto& tr : ep.transitions) {
    states.push_back(tr.flat_state);
    actions.push_back(tr.action);
    rewards.push_back(tr.reward);
    terminated.push_back(tr.terminated);
    truncated.push_back(tr.truncated);
  }
  py::dict d;
  d["states"] = matrix(states, states.empty() ? 0 : states[0].size());
  d["actions"] = matrix(actions, actions.empty() ? 0 : actions[0].size());
  d["rewards"] = py::array_t<double>(rewards.size(), rewards.data());
  d["returns_to_go"] = py::array_t<double>(ep.returns_to_go.size(), ep.returns_to_go.data());
  d["terminated"] = terminated;
  d["truncated"] = truncated;
  d["success"] = ep.success;
  d["policy"] = data::to_string(ep.policy_tag);
  return d;
}

class PyEnv {
 public:
  PyEnv(const std::string& name, const std::string& reward)
      : env_(env::make_env(name, env::parse_reward_mode(reward))), oracle_(env::oracle_policy(env_->spec())) {}

  py::dict reset(std::uint64_t seed) { return observation_dict(env_->reset(seed)); }

  py::tuple step(const env::Vec& action) {
    const auto r = env_->step(action);
    return py::make_tuple(observation_dict(r.observation), r.reward, r.terminated, r.truncated);
  }

  env::Vec oracle_action(const py::dict& obs) const { return oracle_(observation_from(obs)); }
  std::string spec_json() const { return as_json(env_->spec()); }
  bool done() const { return env_->done(); }

 private:
  std::unique_ptr<env::MultiGoalEnv> env_;
  env::Policy oracle_;
};

struct PyModel {
  train::ModelBundle bundle;
};

template <typename T>
using Opt = std::optional<T>;

// Unset arguments keep the desk-profile defaults.
PyModel train_model(const data::Dataset& ds, Opt<std::size_t> updates, std::uint64_t seed, Opt<std::size_t> batch_size,
                    Opt<double> lr, Opt<std::size_t> context, Opt<std::size_t> embed_dim, Opt<std::size_t> layers,
                    Opt<std::size_t> heads, Opt<double> dropout, bool normalize, Opt<double> target,
                    const std::function<void(std::size_t, double)>& on_loss, Opt<std::size_t> log_interval) {
  auto shape = train::desk_shape();
  shape.context_length = context.value_or(shape.context_length);
  shape.embed_dim = embed_dim.value_or(shape.embed_dim);
  shape.n_layers = layers.value_or(shape.n_layers);
  shape.n_heads = heads.value_or(shape.n_heads);
  shape.dropout = dropout.value_or(shape.dropout);
  auto tc = train::desk_config();
  tc.n_updates = updates.value_or(tc.n_updates);
  tc.eval_interval = tc.n_updates;
  tc.seed = seed;
  tc.batch_size = batch_size.value_or(tc.batch_size);
  tc.optimizer.learning_rate = lr.value_or(tc.optimizer.learning_rate);
  tc.normalize = normalize;
  tc.log_interval = log_interval.value_or(tc.log_interval);
  if (target) {
    tc.target_mode = train::TargetMode::kFixed;
    tc.fixed_target = *target;
  }
  // Same model seed as the command-line trainer, so both produce identical weights.
  dt::DTModel model(train::config_for(ds.manifest, shape), env::derive_seed(seed, 0x1417));
  train::TrainHooks hooks;
  if (on_loss) {
    hooks.on_loss = [&](const train::LossPoint& p) {
      py::gil_scoped_acquire gil;
      on_loss(p.update, p.loss);
    };
  }
  train::TrainResult result;
  {
    py::gil_scoped_release release;
    result = train::train(model, ds, tc, hooks);
  }
  std::optional<data::Normalization> norm;
  if (normalize) norm = ds.manifest.normalization;
  train::ModelBundle bundle{std::move(model), norm, result.target_return, ds.manifest.env_name,
                            ds.manifest.reward_mode, nlohmann::json::object()};
  bundle.extra["train"] = tc;
  bundle.extra["dataset_transitions"] = ds.manifest.n_transitions;
  return {std::move(bundle)};
}

std::string evaluate_model(const PyModel& m, std::size_t timesteps, const std::vector<std::uint64_t>& seeds,
                           const std::string& env_name, const std::string& reward, std::optional<double> target) {
  const auto& b = m.bundle;
  const auto spec = env::make_spec(env::parse_task(env_name.empty() ? b.env_name : env_name),
                                   reward.empty() ? b.reward_mode : env::parse_reward_mode(reward));
  train::EvalConfig ec;
  ec.n_timesteps = timesteps;
  ec.seeds = seeds;
  py::gil_scoped_release release;
  return as_json(train::evaluate(b.model, b.normalization, spec, target.value_or(b.target_return), ec));
}

}  // namespace

PYBIND11_MODULE(_gdt, m) {
  m.doc() = "Decision Transformer for goal-conditioned point-mass tasks";

  static py::exception<Error> base(m, "Error", PyExc_RuntimeError);
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<ContractError>(m, "ContractError", base.ptr());
  py::register_exception<RangeError>(m, "RangeError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());
  py::register_exception<TrainingError>(m, "TrainingError", base.ptr());

  m.def("compute_reward",
        [](const env::Vec& achieved, const env::Vec& desired, const std::string& mode, double eps) {
          return env::compute_reward(achieved, desired, env::parse_reward_mode(mode), eps);
        },
        py::arg("achieved"), py::arg("desired"), py::arg("mode"), py::arg("epsilon") = 0.05);
  m.def("returns_to_go", [](const std::vector<double>& r) { return data::returns_to_go(r); }, py::arg("rewards"));
  m.def("derive_seed", &env::derive_seed, py::arg("seed"), py::arg("stream"));
  m.def("env_spec_json",
        [](const std::string& name, const std::string& reward) {
          return as_json(env::make_spec(env::parse_task(name), env::parse_reward_mode(reward)));
        },
        py::arg("name"), py::arg("reward") = "sparse");

  py::class_<PyEnv>(m, "Env")
      .def(py::init<const std::string&, const std::string&>(), py::arg("name"), py::arg("reward") = "sparse")
      .def("reset", &PyEnv::reset, py::arg("seed"))
      .def("step", &PyEnv::step, py::arg("action"))
      .def("oracle_action", &PyEnv::oracle_action, py::arg("observation"))
      .def_property_readonly("done", &PyEnv::done)
      .def("_spec_json", &PyEnv::spec_json);

  py::class_<data::Dataset>(m, "Dataset")
      .def_property_readonly("n_transitions", [](const data::Dataset& d) { return d.manifest.n_transitions; })
      .def_property_readonly("n_episodes", [](const data::Dataset& d) { return d.episodes.size(); })
      .def("episode", [](const data::Dataset& d, std::size_t i) {
        if (i >= d.episodes.size()) throw py::index_error("episode index out of range");
        return episode_dict(d.episodes[i]);
      })
      .def("save", [](const data::Dataset& d, const std::filesystem::path& p) { data::save(d, p); })
      .def("validate", [](const data::Dataset& d) { data::validate(d); })
      .def("to_bytes", [](const data::Dataset& d) {
        std::ostringstream os;
        data::write_dataset(os, d);
        return py::bytes(os.str());
      })
      .def("__eq__", [](const data::Dataset& a, const data::Dataset& b) { return a == b; })
      .def("_manifest_json", [](const data::Dataset& d) { return as_json(d.manifest); });

  m.def("record",
        [](const std::string& name, const std::string& reward, const std::string& policy, std::size_t n,
           std::uint64_t seed) {
          py::gil_scoped_release release;
          return data::record(env::make_spec(env::parse_task(name), env::parse_reward_mode(reward)),
                              data::parse_policy_tag(policy), n, seed);
        },
        py::arg("env"), py::arg("reward"), py::arg("policy"), py::arg("transitions"), py::arg("seed") = 0);
  m.def("load_dataset", [](const std::filesystem::path& p) { return data::load(p); }, py::arg("path"));
  m.def("dataset_from_bytes",
        [](const py::bytes& b) {
          std::istringstream in(std::string{b});
          return data::read_dataset(in);
        },
        py::arg("data"));
  m.def("mix", &data::mix, py::arg("expert"), py::arg("random"), py::arg("expert_fraction"), py::arg("transitions"),
        py::arg("seed") = 0);
  m.def("subset", &data::subset, py::arg("dataset"), py::arg("transitions"), py::arg("seed") = 0);

  py::class_<PyModel>(m, "Model")
      .def_property_readonly("parameter_count", [](const PyModel& p) { return p.bundle.model.parameter_count(); })
      .def_property_readonly("target_return", [](const PyModel& p) { return p.bundle.target_return; })
      .def_property_readonly("env_name", [](const PyModel& p) { return p.bundle.env_name; })
      .def("save", [](const PyModel& p, const std::filesystem::path& path) { train::save_bundle(p.bundle, path); })
      .def("_config_json", [](const PyModel& p) { return as_json(p.bundle.model.config); })
      .def("_evaluate_json", &evaluate_model, py::arg("timesteps"), py::arg("seeds"), py::arg("env") = "",
           py::arg("reward") = "", py::arg("target") = std::nullopt);

  m.def("load_model", [](const std::filesystem::path& p) { return PyModel{train::load_bundle(p)}; }, py::arg("path"));
  const py::object none = py::none();
  m.def("train", &train_model, py::arg("dataset"), py::arg("updates") = none, py::arg("seed") = 0,
        py::arg("batch_size") = none, py::arg("lr") = none, py::arg("context") = none, py::arg("embed_dim") = none,
        py::arg("layers") = none, py::arg("heads") = none, py::arg("dropout") = none, py::arg("normalize") = true,
        py::arg("target") = none, py::arg("on_loss") = none, py::arg("log_interval") = none);

  m.def("_cli",
        [](const std::vector<std::string>& args) {
          std::ostringstream out, err;
          int code;
          {
            py::gil_scoped_release release;
            code = cli::dispatch(args, out, err);
          }
          return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"));
}
