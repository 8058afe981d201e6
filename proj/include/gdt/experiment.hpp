#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "gdt/dataset.hpp"
#include "gdt/envs.hpp"
#include "gdt/trainer.hpp"

namespace gdt::exp {

enum class Question { kRQ1, kRQ3, kRQ4 };

std::string to_string(Question q);
Question parse_question(std::string_view text);

/// Name written to the setting_name column for each question.
std::string setting_name(Question q);
/// Default sweep: the full-data size for RQ1, subset fractions for RQ3 and
/// expert fractions for RQ4.
std::vector<double> default_grid(Question q, std::size_t full_transitions);

struct ExperimentSpec {
  Question question = Question::kRQ1;
  std::vector<std::string> envs{"point-reach", "point-push", "point-pickplace"};
  std::vector<env::RewardMode> rewards{env::RewardMode::kDense, env::RewardMode::kSparse};
  std::vector<double> grid;  // empty = default_grid()
  std::filesystem::path data_dir = "data";
  bool auto_generate = false;  // record missing source datasets instead of failing
  std::size_t full_transitions = 50000;
  std::size_t n_seeds = 3;  // each seed retrains and evaluates once
  std::uint64_t seed = 0;
  dt::DTConfig shape = train::desk_shape();
  train::TrainConfig train = train::desk_config();
  std::size_t eval_timesteps = 2000;
  std::string command;  // echoed into the CSV header
};

struct ResultRow {
  std::string env;
  std::string reward_mode;
  std::string setting_name;
  double setting_value = 0.0;
  std::string seed;  // decimal seed, or "agg"
  std::size_t episodes = 0;
  double success_rate = 0.0;
  double mean_return = 0.0;
  double success_std = 0.0;  // agg rows only
  double return_std = 0.0;   // agg rows only
  std::size_t transitions = 0;

  bool is_aggregate() const { return seed == "agg"; }
  friend bool operator==(const ResultRow&, const ResultRow&) = default;
};

struct ResultTable {
  std::vector<std::string> comments;  // header lines without the leading "# "
  std::vector<ResultRow> rows;
};

inline const std::vector<std::string> kCsvColumns{"env",         "reward_mode",  "setting_name", "setting_value",
                                                  "seed",        "episodes",     "success_rate", "mean_return",
                                                  "success_std", "return_std",   "transitions"};

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

void write_csv(std::ostream& out, const ResultTable& table);
/// Throws FormatError naming the offending column on schema mismatch.
ResultTable read_csv(std::istream& in);
void save_csv(const ResultTable& table, const std::filesystem::path& path);
ResultTable load_csv(const std::filesystem::path& path);

/// Appends an aggregate row (mean and population std over seeds) after per-seed rows.
ResultRow aggregate(const std::vector<ResultRow>& seed_rows);

/// Canonical file name of a source dataset inside a data directory.
std::filesystem::path dataset_path(const std::filesystem::path& dir, const std::string& env,
                                   env::RewardMode mode, data::PolicyTag tag);
/// Command that produces a missing source dataset.
std::string generation_command(const std::filesystem::path& dir, const std::string& env, env::RewardMode mode,
                               data::PolicyTag tag, std::size_t transitions, std::uint64_t seed);

using Progress = std::function<void(const std::string&)>;

ResultTable run_experiment(const ExperimentSpec& spec, const Progress& progress = {});

/// Per-figure tidy data built from experiment tables.
struct FigureTable {
  std::string name;       // file stem, e.g. "rq3_data_size"
  std::string x_column;   // e.g. "fraction"
  std::vector<std::vector<std::string>> rows;  // env, reward_mode, x, success_mean, success_std, return_mean, return_std
};

/// Checks every aggregate row against recomputation from its seed rows (1e-9).
void verify_aggregates(const ResultTable& table);

std::vector<FigureTable> build_figures(const std::vector<ResultTable>& tables);
void write_figure(std::ostream& out, const FigureTable& fig, const std::vector<std::string>& comments);
/// Aligned plain-text summary of all aggregate rows.
std::string summary_text(const std::vector<ResultTable>& tables);

}  // namespace gdt::exp
