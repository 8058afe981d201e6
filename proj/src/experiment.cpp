#include "gdt/experiment.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <tuple>

#include "gdt/errors.hpp"

namespace gdt::exp {

namespace {

constexpr std::uint64_t kModelInitStream = 0x1417;
constexpr std::uint64_t kCellStream = 1000;
constexpr double kAggregateTolerance = 1e-9;

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, sep)) out.push_back(field);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

double parse_double(const std::string& text, const std::string& column) {
  if (text.empty()) return 0.0;
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw FormatError("column '" + column + "': cannot parse '" + text + "' as a number");
  }
  return v;
}

std::size_t parse_count(const std::string& text, const std::string& column) {
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || ec != std::errc{} || ptr != text.data() + text.size()) {
    throw FormatError("column '" + column + "': cannot parse '" + text + "' as a count");
  }
  return v;
}

bool close(double a, double b) { return std::abs(a - b) <= kAggregateTolerance * std::max(1.0, std::abs(b)); }

data::Dataset load_source(const ExperimentSpec& spec, const std::string& env_name, env::RewardMode mode,
                          data::PolicyTag tag, const Progress& progress) {
  const auto path = dataset_path(spec.data_dir, env_name, mode, tag);
  const std::uint64_t seed = spec.seed + (tag == data::PolicyTag::kExpert ? 0 : 1);
  if (!std::filesystem::exists(path)) {
    if (!spec.auto_generate) {
      throw IoError("missing dataset '" + path.string() + "'; create it with: " +
                    generation_command(spec.data_dir, env_name, mode, tag, spec.full_transitions, seed));
    }
    if (progress) progress("generating " + path.string());
    auto ds = data::record(env::make_spec(env::parse_task(env_name), mode), tag, spec.full_transitions, seed);
    ds.manifest.command = generation_command(spec.data_dir, env_name, mode, tag, spec.full_transitions, seed);
    std::filesystem::create_directories(spec.data_dir);
    data::save(ds, path);
    return ds;
  }
  auto ds = data::load(path);
  if (ds.manifest.env_name != env_name || ds.manifest.reward_mode != mode) {
    throw ContractError("dataset '" + path.string() + "' holds " + ds.manifest.env_name + "/" +
                        env::to_string(ds.manifest.reward_mode) + ", expected " + env_name + "/" +
                        env::to_string(mode));
  }
  return ds;
}

data::Dataset cell_dataset(const ExperimentSpec& spec, double value, std::uint64_t cell_seed,
                           const data::Dataset& expert, const data::Dataset* random) {
  switch (spec.question) {
    case Question::kRQ1: {
      const auto n = static_cast<std::size_t>(std::llround(value));
      if (n > expert.manifest.n_transitions) {
        throw ContractError("expert dataset has " + std::to_string(expert.manifest.n_transitions) +
                            " transitions, fewer than the requested " + std::to_string(n));
      }
      return n >= spec.full_transitions ? expert : data::subset(expert, n, cell_seed);
    }
    case Question::kRQ3:
      if (value >= 1.0) return expert;
      return data::subset(expert,
                          std::max<std::size_t>(1, static_cast<std::size_t>(
                                                       std::llround(value * static_cast<double>(spec.full_transitions)))),
                          cell_seed);
    case Question::kRQ4:
      // All-expert is the base dataset itself, shared with the other questions.
      if (value >= 1.0) return expert;
      return data::mix(expert, *random, value, spec.full_transitions, cell_seed);
  }
  throw ContractError("unknown research question");
}

void validate_grid(Question q, const std::vector<double>& grid) {
  if (grid.empty()) throw ContractError("experiment grid is empty");
  for (double v : grid) {
    const bool ok = q == Question::kRQ1 ? v >= 1.0 : q == Question::kRQ3 ? (v > 0.0 && v <= 1.0) : (v >= 0.0 && v <= 1.0);
    if (!ok) throw RangeError("grid value " + format_double(v) + " is invalid for " + to_string(q));
  }
}

}  // namespace

std::string to_string(Question q) {
  switch (q) {
    case Question::kRQ1: return "rq1";
    case Question::kRQ3: return "rq3";
    case Question::kRQ4: return "rq4";
  }
  return "?";
}

Question parse_question(std::string_view text) {
  if (text == "rq1") return Question::kRQ1;
  if (text == "rq3") return Question::kRQ3;
  if (text == "rq4") return Question::kRQ4;
  throw ContractError("unknown research question '" + std::string(text) + "' (expected rq1, rq3 or rq4)");
}

std::string setting_name(Question q) {
  switch (q) {
    case Question::kRQ1: return "expert_transitions";
    case Question::kRQ3: return "subset_fraction";
    case Question::kRQ4: return "expert_fraction";
  }
  return "?";
}

std::vector<double> default_grid(Question q, std::size_t full_transitions) {
  switch (q) {
    case Question::kRQ1: return {static_cast<double>(full_transitions)};
    case Question::kRQ3: return {1.0, 0.75, 0.5, 0.25, 0.1};
    case Question::kRQ4: return {1.0, 0.75, 0.5, 0.25, 0.0};
  }
  return {};
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

void write_csv(std::ostream& out, const ResultTable& table) {
  for (const auto& c : table.comments) out << "# " << c << '\n';
  for (std::size_t i = 0; i < kCsvColumns.size(); ++i) out << (i ? "," : "") << kCsvColumns[i];
  out << '\n';
  for (const auto& r : table.rows) {
    out << r.env << ',' << r.reward_mode << ',' << r.setting_name << ',' << format_double(r.setting_value) << ','
        << r.seed << ',' << r.episodes << ',' << format_double(r.success_rate) << ',' << format_double(r.mean_return)
        << ',';
    if (r.is_aggregate()) out << format_double(r.success_std) << ',' << format_double(r.return_std);
    else out << ',';
    out << ',' << r.transitions << '\n';
  }
}

ResultTable read_csv(std::istream& in) {
  ResultTable table;
  std::string line;
  bool header_seen = false;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      table.comments.push_back(line.size() > 2 && line[1] == ' ' ? line.substr(2) : line.substr(1));
      continue;
    }
    const auto fields = split(line, ',');
    if (!header_seen) {
      for (std::size_t i = 0; i < kCsvColumns.size(); ++i) {
        if (i >= fields.size()) throw FormatError("missing column '" + kCsvColumns[i] + "'");
        if (fields[i] != kCsvColumns[i]) {
          throw FormatError("unexpected column '" + fields[i] + "' at position " + std::to_string(i + 1) +
                            ", expected '" + kCsvColumns[i] + "'");
        }
      }
      if (fields.size() > kCsvColumns.size()) {
        throw FormatError("unexpected column '" + fields[kCsvColumns.size()] + "'");
      }
      header_seen = true;
      continue;
    }
    if (fields.size() != kCsvColumns.size()) {
      throw FormatError("line " + std::to_string(line_no) + " has " + std::to_string(fields.size()) +
                        " fields, expected " + std::to_string(kCsvColumns.size()));
    }
    ResultRow r;
    r.env = fields[0];
    r.reward_mode = fields[1];
    r.setting_name = fields[2];
    r.setting_value = parse_double(fields[3], "setting_value");
    r.seed = fields[4];
    if (!r.is_aggregate()) parse_count(r.seed, "seed");
    r.episodes = parse_count(fields[5], "episodes");
    r.success_rate = parse_double(fields[6], "success_rate");
    r.mean_return = parse_double(fields[7], "mean_return");
    r.success_std = parse_double(fields[8], "success_std");
    r.return_std = parse_double(fields[9], "return_std");
    r.transitions = parse_count(fields[10], "transitions");
    table.rows.push_back(std::move(r));
  }
  if (!header_seen) throw FormatError("missing CSV header row");
  return table;
}

void save_csv(const ResultTable& table, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  write_csv(out, table);
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

ResultTable load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "': file not found or unreadable");
  try {
    return read_csv(in);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

ResultRow aggregate(const std::vector<ResultRow>& seed_rows) {
  if (seed_rows.empty()) throw ContractError("cannot aggregate zero seed rows");
  ResultRow agg = seed_rows.front();
  agg.seed = "agg";
  agg.episodes = 0;
  std::vector<double> success, returns;
  for (const auto& r : seed_rows) {
    agg.episodes += r.episodes;
    success.push_back(r.success_rate);
    returns.push_back(r.mean_return);
  }
  std::tie(agg.success_rate, agg.success_std) = train::mean_std(success);
  std::tie(agg.mean_return, agg.return_std) = train::mean_std(returns);
  return agg;
}

std::filesystem::path dataset_path(const std::filesystem::path& dir, const std::string& env, env::RewardMode mode,
                                   data::PolicyTag tag) {
  return dir / (env + "-" + env::to_string(mode) + "-" + data::to_string(tag) + ".gde");
}

std::string generation_command(const std::filesystem::path& dir, const std::string& env, env::RewardMode mode,
                               data::PolicyTag tag, std::size_t transitions, std::uint64_t seed) {
  return "gdt gen-data --env " + env + " --reward " + env::to_string(mode) + " --policy " + data::to_string(tag) +
         " --transitions " + std::to_string(transitions) + " --out " + dataset_path(dir, env, mode, tag).string() +
         " --seed " + std::to_string(seed);
}

ResultTable run_experiment(const ExperimentSpec& spec, const Progress& progress) {
  const auto grid = spec.grid.empty() ? default_grid(spec.question, spec.full_transitions) : spec.grid;
  validate_grid(spec.question, grid);
  if (spec.n_seeds == 0) throw ContractError("experiment needs at least one seed");
  if (spec.envs.empty() || spec.rewards.empty()) throw ContractError("experiment needs an env and a reward mode");

  ResultTable table;
  if (!spec.command.empty()) table.comments.push_back("command: " + spec.command);
  table.comments.push_back("question: " + to_string(spec.question) + ", seed: " + std::to_string(spec.seed) +
                           ", seeds per setting: " + std::to_string(spec.n_seeds) +
                           ", eval timesteps per seed: " + std::to_string(spec.eval_timesteps));
  table.comments.push_back("mean_return: per-episode return averaged over completed evaluation episodes; "
                           "agg rows give the mean and population std over seeds");

  for (const auto& env_name : spec.envs) {
    const env::Task task = env::parse_task(env_name);
    for (const auto mode : spec.rewards) {
      const env::EnvSpec env_spec = env::make_spec(task, mode);
      const data::Dataset expert = load_source(spec, env_name, mode, data::PolicyTag::kExpert, progress);
      data::Dataset random;
      if (spec.question == Question::kRQ4) {
        random = load_source(spec, env_name, mode, data::PolicyTag::kRandom, progress);
      }
      for (std::size_t g = 0; g < grid.size(); ++g) {
        const double value = grid[g];
        const data::Dataset ds =
            cell_dataset(spec, value, env::derive_seed(spec.seed, kCellStream + g), expert, &random);
        std::vector<ResultRow> rows;
        for (std::size_t r = 0; r < spec.n_seeds; ++r) {
          const std::uint64_t seed = spec.seed + r;
          dt::DTModel model(train::config_for(ds.manifest, spec.shape), env::derive_seed(seed, kModelInitStream));
          train::TrainConfig tc = spec.train;
          tc.seed = seed;
          tc.eval_interval = std::min(tc.eval_interval, tc.n_updates);
          const auto trained = train::train(model, ds, tc);
          train::EvalConfig ec;
          ec.n_timesteps = spec.eval_timesteps;
          ec.seeds = {seed};
          ec.threads = 1;
          std::optional<data::Normalization> norm;
          if (tc.normalize) norm = ds.manifest.normalization;
          const auto report = train::evaluate(model, norm, env_spec, trained.target_return, ec);

          ResultRow row;
          row.env = env_name;
          row.reward_mode = env::to_string(mode);
          row.setting_name = setting_name(spec.question);
          row.setting_value = value;
          row.seed = std::to_string(seed);
          row.episodes = report.episodes;
          row.success_rate = report.success_rate;
          row.mean_return = report.mean_return;
          row.transitions = ds.manifest.n_transitions;
          rows.push_back(row);
          if (progress) {
            std::ostringstream msg;
            msg << env_name << ' ' << row.reward_mode << ' ' << row.setting_name << '=' << format_double(value)
                << " seed=" << seed << " success=" << row.success_rate << "% return=" << row.mean_return;
            progress(msg.str());
          }
        }
        table.rows.insert(table.rows.end(), rows.begin(), rows.end());
        table.rows.push_back(aggregate(rows));
      }
    }
  }
  return table;
}

void verify_aggregates(const ResultTable& table) {
  using Key = std::tuple<std::string, std::string, std::string, double>;
  std::map<Key, std::vector<ResultRow>> seeds;
  std::map<Key, ResultRow> aggs;
  for (const auto& r : table.rows) {
    Key k{r.env, r.reward_mode, r.setting_name, r.setting_value};
    if (r.is_aggregate()) {
      if (!aggs.emplace(k, r).second) throw FormatError("duplicate aggregate row for " + r.env + " " + r.setting_name);
    } else {
      seeds[k].push_back(r);
    }
  }
  for (const auto& [k, agg] : aggs) {
    const auto it = seeds.find(k);
    const std::string where = agg.env + "/" + agg.reward_mode + " " + agg.setting_name + "=" +
                              format_double(agg.setting_value);
    if (it == seeds.end()) throw FormatError("aggregate row without seed rows: " + where);
    const ResultRow expect = aggregate(it->second);
    if (!close(agg.success_rate, expect.success_rate) || !close(agg.success_std, expect.success_std)) {
      throw FormatError("column 'success_rate': aggregate disagrees with seed rows for " + where);
    }
    if (!close(agg.mean_return, expect.mean_return) || !close(agg.return_std, expect.return_std)) {
      throw FormatError("column 'mean_return': aggregate disagrees with seed rows for " + where);
    }
    if (agg.episodes != expect.episodes) {
      throw FormatError("column 'episodes': aggregate disagrees with seed rows for " + where);
    }
  }
}

std::vector<FigureTable> build_figures(const std::vector<ResultTable>& tables) {
  std::vector<FigureTable> figures;
  auto figure_for = [&](const std::string& setting) -> FigureTable& {
    std::string name = "eval_" + setting, x = setting;
    if (setting == "expert_transitions") name = "rq1_table", x = "transitions";
    if (setting == "subset_fraction") name = "rq3_data_size", x = "fraction";
    if (setting == "expert_fraction") name = "rq4_expert_fraction", x = "expert_fraction";
    for (auto& f : figures) {
      if (f.name == name) return f;
    }
    figures.push_back({name, x, {}});
    return figures.back();
  };
  for (const auto& t : tables) {
    for (const auto& r : t.rows) {
      if (!r.is_aggregate()) continue;
      figure_for(r.setting_name)
          .rows.push_back({r.env, r.reward_mode, format_double(r.setting_value), format_double(r.success_rate),
                           format_double(r.success_std), format_double(r.mean_return), format_double(r.return_std)});
    }
  }
  return figures;
}

void write_figure(std::ostream& out, const FigureTable& fig, const std::vector<std::string>& comments) {
  for (const auto& c : comments) out << "# " << c << '\n';
  out << "env,reward_mode," << fig.x_column << ",success_mean,success_std,return_mean,return_std\n";
  for (const auto& row : fig.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
    out << '\n';
  }
}

std::string summary_text(const std::vector<ResultTable>& tables) {
  std::vector<std::array<std::string, 7>> cells{
      {"env", "reward", "setting", "value", "success % (mean ± std)", "return (mean ± std)", "episodes"}};
  for (const auto& t : tables) {
    for (const auto& r : t.rows) {
      if (!r.is_aggregate()) continue;
      std::ostringstream s, ret, v;
      s << std::fixed << std::setprecision(2) << r.success_rate << " ± " << r.success_std;
      ret << std::fixed << std::setprecision(3) << r.mean_return << " ± " << r.return_std;
      cells.push_back({r.env, r.reward_mode, r.setting_name, format_double(r.setting_value), s.str(), ret.str(),
                       std::to_string(r.episodes)});
    }
  }
  // "±" is two bytes in UTF-8 but one column wide.
  auto width = [](const std::string& s) {
    std::size_t w = 0;
    for (unsigned char c : s) w += (c & 0xC0) != 0x80;
    return w;
  };
  std::array<std::size_t, 7> widths{};
  for (const auto& row : cells) {
    for (std::size_t i = 0; i < row.size(); ++i) widths[i] = std::max(widths[i], width(row[i]));
  }
  std::ostringstream out;
  for (const auto& row : cells) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      out << row[i];
      if (i + 1 < row.size()) out << std::string(widths[i] - width(row[i]) + 2, ' ');
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace gdt::exp
