#include "gdt/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "gdt/binary_io.hpp"
#include "gdt/errors.hpp"

namespace gdt::data {

namespace {

constexpr char kMagic[4] = {'G', 'D', 'E', '1'};

// Bounds on header fields so corrupt lengths fail fast instead of allocating.
constexpr std::uint64_t kMaxManifestBytes = 64ull << 20;
constexpr std::uint64_t kMaxEpisodeLength = 1ull << 24;

std::size_t expert_transitions(const std::vector<Episode>& episodes) {
  std::size_t n = 0;
  for (const auto& ep : episodes) {
    if (ep.policy_tag == PolicyTag::kExpert) n += ep.size();
  }
  return n;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

void require_compatible(const DatasetManifest& a, const DatasetManifest& b) {
  if (a.env_name != b.env_name || a.reward_mode != b.reward_mode || a.state_dim != b.state_dim ||
      a.goal_dim != b.goal_dim || a.action_dim != b.action_dim) {
    throw ContractError("mix: source datasets disagree (" + a.env_name + "/" + env::to_string(a.reward_mode) +
                        " vs " + b.env_name + "/" + env::to_string(b.reward_mode) + ")");
  }
}

}  // namespace

std::string to_string(PolicyTag tag) { return tag == PolicyTag::kExpert ? "expert" : "random"; }

PolicyTag parse_policy_tag(std::string_view text) {
  if (text == "expert") return PolicyTag::kExpert;
  if (text == "random") return PolicyTag::kRandom;
  throw ContractError("unknown policy '" + std::string(text) + "' (expected expert or random)");
}

std::vector<double> returns_to_go(std::span<const double> rewards) {
  std::vector<double> out(rewards.size());
  double acc = 0.0;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    acc += rewards[i];
    out[i] = acc;
  }
  return out;
}

void to_json(nlohmann::json& j, const DatasetManifest& m) {
  j = nlohmann::json{{"env_name", m.env_name},
                     {"reward_mode", env::to_string(m.reward_mode)},
                     {"state_dim", m.state_dim},
                     {"goal_dim", m.goal_dim},
                     {"action_dim", m.action_dim},
                     {"n_episodes", m.n_episodes},
                     {"n_transitions", m.n_transitions},
                     {"expert_fraction", m.expert_fraction},
                     {"seed", m.seed},
                     {"normalization", {{"mean", m.normalization.mean}, {"std", m.normalization.std}}},
                     {"best_return", m.best_return},
                     {"provenance", m.provenance},
                     {"command", m.command}};
}

void from_json(const nlohmann::json& j, DatasetManifest& m) {
  j.at("env_name").get_to(m.env_name);
  m.reward_mode = env::parse_reward_mode(j.at("reward_mode").get<std::string>());
  j.at("state_dim").get_to(m.state_dim);
  j.at("goal_dim").get_to(m.goal_dim);
  j.at("action_dim").get_to(m.action_dim);
  j.at("n_episodes").get_to(m.n_episodes);
  j.at("n_transitions").get_to(m.n_transitions);
  j.at("expert_fraction").get_to(m.expert_fraction);
  j.at("seed").get_to(m.seed);
  j.at("normalization").at("mean").get_to(m.normalization.mean);
  j.at("normalization").at("std").get_to(m.normalization.std);
  j.at("best_return").get_to(m.best_return);
  m.provenance = j.value("provenance", std::string{});
  m.command = j.value("command", std::string{});
}

Normalization normalization_stats(const Dataset& ds) {
  const std::size_t dim = ds.manifest.flat_state_dim();
  std::size_t count = 0;
  std::vector<double> mean(dim, 0.0);
  for (const auto& ep : ds.episodes) {
    for (const auto& tr : ep.transitions) {
      if (tr.flat_state.size() != dim) {
        throw DimensionError("normalization: state of length " + std::to_string(tr.flat_state.size()) +
                             ", expected " + std::to_string(dim));
      }
      for (std::size_t d = 0; d < dim; ++d) mean[d] += tr.flat_state[d];
      ++count;
    }
  }
  if (count == 0) throw ContractError("normalization: dataset has no transitions");
  for (double& m : mean) m /= static_cast<double>(count);

  std::vector<double> var(dim, 0.0);
  for (const auto& ep : ds.episodes) {
    for (const auto& tr : ep.transitions) {
      for (std::size_t d = 0; d < dim; ++d) {
        const double c = tr.flat_state[d] - mean[d];
        var[d] += c * c;
      }
    }
  }
  Normalization out{mean, std::vector<double>(dim)};
  for (std::size_t d = 0; d < dim; ++d) {
    out.std[d] = std::max(std::sqrt(var[d] / static_cast<double>(count)), kStdFloor);
  }
  return out;
}

void refresh_manifest(Dataset& ds) {
  auto& m = ds.manifest;
  m.n_episodes = ds.episodes.size();
  m.n_transitions = 0;
  for (const auto& ep : ds.episodes) m.n_transitions += ep.size();
  m.expert_fraction = m.n_transitions == 0 ? 0.0
                                           : static_cast<double>(expert_transitions(ds.episodes)) /
                                                 static_cast<double>(m.n_transitions);
  m.best_return = -std::numeric_limits<double>::infinity();
  for (const auto& ep : ds.episodes) m.best_return = std::max(m.best_return, ep.episode_return());
  if (ds.episodes.empty()) m.best_return = 0.0;
  m.normalization = m.n_transitions == 0 ? Normalization{} : normalization_stats(ds);
}

void validate(const Dataset& ds) {
  const auto& m = ds.manifest;
  const std::size_t flat = m.flat_state_dim();
  std::size_t total = 0;
  for (std::size_t e = 0; e < ds.episodes.size(); ++e) {
    const auto& ep = ds.episodes[e];
    const std::string where = "episode " + std::to_string(e);
    if (ep.transitions.empty()) throw ContractError(where + " is empty");
    if (ep.returns_to_go.size() != ep.size()) throw ContractError(where + ": returns-to-go length mismatch");
    std::vector<double> rewards;
    rewards.reserve(ep.size());
    for (std::size_t t = 0; t < ep.size(); ++t) {
      const auto& tr = ep.transitions[t];
      if (tr.flat_state.size() != flat || tr.action.size() != m.action_dim) {
        throw ContractError(where + ": transition " + std::to_string(t) + " has wrong dimensions");
      }
      const bool last = t + 1 == ep.size();
      if (last != (tr.terminated || tr.truncated)) {
        throw ContractError(where + " is partial or continues past its end at step " + std::to_string(t));
      }
      rewards.push_back(tr.reward);
    }
    if (returns_to_go(rewards) != ep.returns_to_go) throw ContractError(where + ": stale returns-to-go");
    total += ep.size();
  }
  if (m.n_episodes != ds.episodes.size() || m.n_transitions != total) {
    throw ContractError("manifest counts disagree with payload");
  }
  const double frac =
      total == 0 ? 0.0 : static_cast<double>(expert_transitions(ds.episodes)) / static_cast<double>(total);
  if (frac != m.expert_fraction) throw ContractError("manifest expert_fraction disagrees with episode tags");
}

Episode rollout_episode(env::MultiGoalEnv& env, const env::Policy& policy, std::uint64_t seed, PolicyTag tag) {
  Episode ep;
  ep.env_name = env.spec().name;
  ep.policy_tag = tag;
  env::GoalObservation obs = env.reset(seed);
  std::vector<double> rewards;
  while (true) {
    const env::Vec action = policy(obs);
    env::StepResult r = env.step(action);
    ep.transitions.push_back({env::flatten_state(obs), action, r.reward, r.terminated, r.truncated});
    rewards.push_back(r.reward);
    obs = std::move(r.observation);
    if (r.terminated || r.truncated) {
      ep.success = r.terminated;
      break;
    }
  }
  ep.returns_to_go = returns_to_go(rewards);
  return ep;
}

Dataset record(const env::EnvSpec& spec, PolicyTag tag, std::size_t n_transitions, std::uint64_t seed) {
  if (n_transitions == 0) throw ContractError("record: n_transitions must be at least 1");
  auto env = env::make_env(spec.name, spec.reward_mode);
  Dataset ds;
  ds.manifest.env_name = spec.name;
  ds.manifest.reward_mode = spec.reward_mode;
  ds.manifest.state_dim = spec.state_dim;
  ds.manifest.goal_dim = spec.goal_dim;
  ds.manifest.action_dim = spec.action_dim;
  ds.manifest.seed = seed;
  ds.manifest.provenance = "record:" + to_string(tag);

  const env::Policy expert = env::oracle_policy(env->spec());
  std::size_t collected = 0;
  for (std::uint64_t i = 0; collected < n_transitions; ++i) {
    const std::uint64_t episode_seed = env::derive_seed(seed, 2 * i);
    Episode ep = tag == PolicyTag::kExpert
                     ? rollout_episode(*env, expert, episode_seed, tag)
                     : rollout_episode(*env, env::random_policy(env->spec(), env::derive_seed(seed, 2 * i + 1)),
                                       episode_seed, tag);
    collected += ep.size();
    ds.episodes.push_back(std::move(ep));
  }
  refresh_manifest(ds);
  return ds;
}

Dataset mix(const Dataset& expert, const Dataset& random, double expert_fraction, std::size_t total_transitions,
            std::uint64_t seed) {
  if (!(expert_fraction >= 0.0 && expert_fraction <= 1.0)) {
    throw RangeError("mix: expert fraction must lie in [0, 1]");
  }
  if (total_transitions == 0) throw ContractError("mix: total transitions must be at least 1");
  require_compatible(expert.manifest, random.manifest);

  std::mt19937_64 rng(env::derive_seed(seed, 0));
  const double expert_target = expert_fraction * static_cast<double>(total_transitions);

  Dataset out;
  out.manifest = expert.manifest;
  out.manifest.seed = seed;
  out.manifest.command.clear();
  std::size_t total = 0, expert_count = 0;
  for (std::size_t i : shuffled_indices(expert.episodes.size(), rng)) {
    if (static_cast<double>(expert_count) >= expert_target) break;
    out.episodes.push_back(expert.episodes[i]);
    out.episodes.back().policy_tag = PolicyTag::kExpert;
    expert_count += expert.episodes[i].size();
    total += expert.episodes[i].size();
  }
  if (static_cast<double>(expert_count) < expert_target) {
    throw ContractError("mix: expert source has " + std::to_string(expert_count) + " transitions, " +
                        std::to_string(static_cast<std::size_t>(std::ceil(expert_target - expert_count))) +
                        " short of the requested " +
                        std::to_string(static_cast<std::size_t>(std::ceil(expert_target))));
  }
  for (std::size_t i : shuffled_indices(random.episodes.size(), rng)) {
    if (total >= total_transitions) break;
    out.episodes.push_back(random.episodes[i]);
    out.episodes.back().policy_tag = PolicyTag::kRandom;
    total += random.episodes[i].size();
  }
  if (total < total_transitions) {
    throw ContractError("mix: random source exhausted, " + std::to_string(total_transitions - total) +
                        " transitions short of the requested " + std::to_string(total_transitions));
  }
  std::shuffle(out.episodes.begin(), out.episodes.end(), rng);

  std::ostringstream prov;
  prov << "mix:expert_fraction=" << expert_fraction << ",total=" << total_transitions;
  out.manifest.provenance = prov.str();
  refresh_manifest(out);
  return out;
}

Dataset subset(const Dataset& ds, std::size_t n_transitions, std::uint64_t seed) {
  if (n_transitions == 0) throw ContractError("subset: n_transitions must be at least 1");
  if (n_transitions > ds.manifest.n_transitions) {
    throw ContractError("subset: requested " + std::to_string(n_transitions) + " transitions but the dataset has " +
                        std::to_string(ds.manifest.n_transitions));
  }
  std::mt19937_64 rng(env::derive_seed(seed, 1));
  Dataset out;
  out.manifest = ds.manifest;
  out.manifest.seed = seed;
  out.manifest.command.clear();
  std::size_t total = 0;
  for (std::size_t i : shuffled_indices(ds.episodes.size(), rng)) {
    if (total >= n_transitions) break;
    out.episodes.push_back(ds.episodes[i]);
    total += ds.episodes[i].size();
  }
  out.manifest.provenance = ds.manifest.provenance + "|subset:" + std::to_string(n_transitions);
  refresh_manifest(out);
  return out;
}

void write_dataset(std::ostream& out, const Dataset& ds) {
  out.write(kMagic, sizeof(kMagic));
  binary::write_uint<std::uint8_t>(out, kDatasetVersion);
  const std::string manifest = nlohmann::json(ds.manifest).dump();
  binary::write_uint<std::uint64_t>(out, manifest.size());
  out.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));

  const std::size_t flat = ds.manifest.flat_state_dim();
  const std::size_t act = ds.manifest.action_dim;
  for (const auto& ep : ds.episodes) {
    binary::write_uint<std::uint8_t>(out, static_cast<std::uint8_t>(ep.policy_tag));
    binary::write_uint<std::uint8_t>(out, ep.success ? 1 : 0);
    binary::write_uint<std::uint64_t>(out, ep.size());
    binary::write_uint<std::uint64_t>(out, ep.size() * (flat + act + 4));
    for (const auto& tr : ep.transitions) {
      if (tr.flat_state.size() != flat || tr.action.size() != act) {
        throw DimensionError("write_dataset: transition dimensions disagree with the manifest");
      }
      for (double v : tr.flat_state) binary::write_f64(out, v);
      for (double v : tr.action) binary::write_f64(out, v);
      binary::write_f64(out, tr.reward);
      binary::write_f64(out, tr.terminated ? 1.0 : 0.0);
      binary::write_f64(out, tr.truncated ? 1.0 : 0.0);
    }
    for (double v : ep.returns_to_go) binary::write_f64(out, v);
  }
  if (!out) throw IoError("write_dataset: stream write failed");
}

Dataset read_dataset(std::istream& in) {
  char magic[4] = {};
  in.read(magic, sizeof(magic));
  if (in.gcount() != sizeof(magic) || !std::equal(magic, magic + 4, kMagic)) {
    throw FormatError("not a dataset file (bad magic, expected GDE1)");
  }
  const auto version = binary::read_uint<std::uint8_t>(in, "version byte");
  if (version != kDatasetVersion) {
    throw FormatError("unsupported dataset version " + std::to_string(version) + " (expected " +
                      std::to_string(kDatasetVersion) + ")");
  }
  const auto manifest_len = binary::read_uint<std::uint64_t>(in, "manifest length");
  if (manifest_len > kMaxManifestBytes || manifest_len > binary::remaining(in)) {
    throw FormatError("corrupt manifest length " + std::to_string(manifest_len));
  }
  std::string text(manifest_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(manifest_len));

  Dataset ds;
  try {
    ds.manifest = nlohmann::json::parse(text).get<DatasetManifest>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  }

  const std::size_t flat = ds.manifest.flat_state_dim();
  const std::size_t act = ds.manifest.action_dim;
  const std::uint64_t per_step = flat + act + 3;  // state, action, reward, two flags
  while (in.peek() != std::char_traits<char>::eof()) {
    const std::string where = "episode " + std::to_string(ds.episodes.size());
    const auto tag = binary::read_uint<std::uint8_t>(in, "episode policy tag");
    if (tag > 1) throw FormatError(where + ": invalid policy tag " + std::to_string(tag));
    const auto success = binary::read_uint<std::uint8_t>(in, "episode success flag");
    const auto n = binary::read_uint<std::uint64_t>(in, "episode length");
    const auto payload = binary::read_uint<std::uint64_t>(in, "episode payload length");
    if (n == 0 || n > kMaxEpisodeLength || payload != n * (per_step + 1)) {
      throw FormatError(where + ": corrupt length fields (n=" + std::to_string(n) +
                        ", payload=" + std::to_string(payload) + ")");
    }
    if (payload * 8 > binary::remaining(in)) {
      throw FormatError(where + ": truncated payload (" + std::to_string(payload * 8) + " bytes declared, " +
                        std::to_string(binary::remaining(in)) + " available)");
    }
    Episode ep;
    ep.env_name = ds.manifest.env_name;
    ep.policy_tag = static_cast<PolicyTag>(tag);
    ep.success = success != 0;
    ep.transitions.resize(n);
    for (auto& tr : ep.transitions) {
      tr.flat_state.resize(flat);
      tr.action.resize(act);
      for (double& v : tr.flat_state) v = binary::read_f64(in, "state");
      for (double& v : tr.action) v = binary::read_f64(in, "action");
      tr.reward = binary::read_f64(in, "reward");
      tr.terminated = binary::read_f64(in, "terminated flag") != 0.0;
      tr.truncated = binary::read_f64(in, "truncated flag") != 0.0;
    }
    ep.returns_to_go.resize(n);
    for (double& v : ep.returns_to_go) v = binary::read_f64(in, "returns-to-go");
    ds.episodes.push_back(std::move(ep));
  }
  if (ds.episodes.size() != ds.manifest.n_episodes) {
    throw FormatError("dataset holds " + std::to_string(ds.episodes.size()) + " episodes but the manifest declares " +
                      std::to_string(ds.manifest.n_episodes));
  }
  try {
    validate(ds);
  } catch (const ContractError& e) {
    throw FormatError(std::string("inconsistent dataset: ") + e.what());
  }
  return ds;
}

void save(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  write_dataset(out, ds);
  out.close();
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

Dataset load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "': file not found or unreadable");
  return read_dataset(in);
}

}  // namespace gdt::data
