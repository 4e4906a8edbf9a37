#pragma once

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "advcomm/gridworld.hpp"
#include "advcomm/policy.hpp"
#include "advcomm/trainer.hpp"

namespace advcomm::harness {

using trainer::Phase;

inline constexpr const char* kCodeVersion = "advcomm 0.3.0";

enum class CommVariant { with_comms, no_comms, mask_si_outgoing };

std::string to_string(CommVariant v);
CommVariant comm_variant_from_string(const std::string& s);
policy::CommMode comm_mode(CommVariant v);
// accepts the variant names and the policy names ("full")
policy::CommMode comm_mode_from_string(const std::string& s);

// The five result columns: cooperative with and without communication, the
// self-interested phase with and without its outgoing messages, re-adaptation.
enum class Column { coop_comms, coop_no_comms, si_adv, si_no_adv, readapt_adv };
inline constexpr std::array<Column, 5> kColumns{Column::coop_comms, Column::coop_no_comms, Column::si_adv,
                                                Column::si_no_adv, Column::readapt_adv};

std::string column_key(Column c);
Column column_from_key(const std::string& s);
Phase column_phase(Column c);
CommVariant column_variant(Column c);
std::optional<Column> column_for(Phase p, CommVariant v);
// the run a column's training starts from, if any
std::optional<Column> column_parent(Column c);

struct ExperimentConfig {
  std::string label;  // table row name; the task name when empty
  gridworld::EnvConfig env;
  policy::ArchConfig arch;
  trainer::TrainerConfig trainer;
  std::vector<CommVariant> variants{CommVariant::with_comms, CommVariant::no_comms, CommVariant::mask_si_outgoing};
  std::vector<Phase> phases{Phase::cooperative, Phase::self_interested, Phase::readapt};
  std::size_t eval_episodes = 100;
  std::optional<int> eval_horizon;
  std::uint64_t eval_seed = 1000000;
  bool greedy = false;
  int si_agent = 0;
  std::vector<std::uint64_t> seeds{1};
  std::filesystem::path output_dir;

  static ExperimentConfig for_task(gridworld::Task t);

  std::string row_label() const;
  int horizon() const;
  // (phase, variant) combinations that map onto a column, in column order;
  // parents of requested columns are trained as well
  std::vector<Column> columns() const;
  std::vector<Column> runs() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
// Missing fields take the task's defaults.
void from_json(const nlohmann::json& j, ExperimentConfig& c);
ExperimentConfig load_config(const std::filesystem::path& path);

/// 64-bit FNV-1a, lower-case hex.
std::string fnv1a_hex(std::string_view data);
/// Hash of the configuration (output directory excluded) and code version.
std::string config_hash(const ExperimentConfig& c);

/// $ADVCOMM_OUT when set, "runs" otherwise.
std::filesystem::path default_output_root();

struct RunManifest {
  std::string hash;
  std::vector<std::uint64_t> seeds;
  std::map<std::string, std::string> checkpoints;
  std::string code_version = kCodeVersion;
  std::string started, finished;  // UTC, ISO 8601
  nlohmann::json config;
};

void to_json(nlohmann::json& j, const RunManifest& m);
void from_json(const nlohmann::json& j, RunManifest& m);
std::string utc_now();

// ---------------------------------------------------------------------------
// evaluation

struct EvalStats {
  CommVariant variant = CommVariant::with_comms;
  std::size_t episodes = 0;
  int horizon = 0;
  std::uint64_t seed = 0;
  bool greedy = false;
  bool has_si = false;
  // per-agent group return of every episode
  std::vector<double> episode_coop, episode_si;
  double mean_coop = 0.0, std_coop = 0.0, mean_si = 0.0, std_si = 0.0;
  std::vector<double> curve_coop, curve_coop_std, curve_si, curve_si_std;
  std::string manifest;
};

void to_json(nlohmann::json& j, const EvalStats& e);
void from_json(const nlohmann::json& j, EvalStats& e);

/// Fixed-horizon evaluation (no early termination). Rejects a checkpoint
/// whose agent count, task or observation window differs from `env`.
EvalStats evaluate_checkpoint(const trainer::Checkpoint& ck, const gridworld::EnvConfig& env, CommVariant variant,
                              std::size_t episodes, int horizon, std::uint64_t seed, bool greedy = false);

// ---------------------------------------------------------------------------
// results table

struct Cell {
  enum class State { value, not_applicable, missing };
  State state = State::missing;
  double mean = 0.0, std = 0.0;
};

struct ResultsTable {
  std::vector<std::string> rows;  // row labels (tasks), in order
  // [row][group: 0 = cooperative, 1 = self-interested][column]
  std::map<std::string, std::array<std::array<Cell, 5>, 2>> cells;
  std::string manifest;

  bool complete() const;
  std::string render() const;
};

void to_json(nlohmann::json& j, const ResultsTable& t);
void from_json(const nlohmann::json& j, ResultsTable& t);

/// Evaluation outputs of one column for one row, over seeds.
struct ColumnResult {
  std::string row;
  Column column = Column::coop_comms;
  std::vector<EvalStats> per_seed;
};

/// Pools episodes over seeds; self-interested cells of purely cooperative
/// columns are N/A, absent outputs MISSING.
ResultsTable render_results_table(const std::vector<ColumnResult>& results, const std::vector<std::string>& rows,
                                  const std::string& manifest);

// ---------------------------------------------------------------------------
// plots

struct Series {
  std::string label;
  std::string color;
  bool dashed = false;
  std::vector<double> x, y;
  std::vector<double> band;  // 1-sigma half-width per point; empty for none
};

struct Region {
  double x0 = 0.0, x1 = 0.0;
  std::string color;
  std::string label;
};

struct Plot {
  std::string title, xlabel, ylabel;
  std::vector<Series> series;
  std::vector<Region> regions;
  std::string manifest;

  bool empty() const;
};

std::string render_svg(const Plot& p);
void write_svg(const std::filesystem::path& path, const Plot& p);

inline constexpr const char* kBlue = "#1f5fbf";
inline constexpr const char* kRed = "#c8312b";
inline constexpr const char* kGreen = "#2e9a4a";

/// Training curves from consecutive phase logs: the x axis counts
/// environment steps across phases; phases are shaded blue, red, green.
Plot training_plot(const std::vector<std::vector<nlohmann::json>>& phase_logs, const std::string& manifest);

/// Cumulative per-agent reward over an episode with 1-sigma bands. Solid
/// lines for `with_adv`, dashed for `without_adv`.
Plot eval_plot(const EvalStats* with_adv, const EvalStats* without_adv, const std::string& title,
               const std::string& manifest);

std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path);

/// Writes training and evaluation plots for every seed of a run directory.
/// Returns warnings (e.g. empty logs); an empty plot is still written.
std::vector<std::string> emit_plots(const std::filesystem::path& run_dir);

// ---------------------------------------------------------------------------
// experiments

struct SeedResult {
  std::uint64_t seed = 0;
  std::map<Column, EvalStats> evals;
  std::map<Column, std::filesystem::path> checkpoints;
};

struct ExperimentResult {
  RunManifest manifest;
  std::vector<SeedResult> seeds;
  ResultsTable table;
};

using Progress = std::function<void(const std::string&)>;

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::uint64_t seed, Column c);
std::filesystem::path eval_path(const std::filesystem::path& dir, std::uint64_t seed, Column c);
std::filesystem::path log_path(const std::filesystem::path& dir, std::uint64_t seed, Column c);

/// Trains every needed run per seed, evaluates each column in its own
/// communication variant, then writes manifest.json, table.txt, table.json
/// and plots into cfg.output_dir. Existing checkpoints with a matching
/// manifest hash are reused when `resume` is set.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const Progress& progress = {}, bool resume = false);

/// Rebuilds the table from the evaluation files of a run directory.
ResultsTable table_from_run(const std::filesystem::path& run_dir);

// ---------------------------------------------------------------------------
// self-check

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

/// Gradient, centralized/decentralized equivalence and environment
/// conservation suites at a reduced size.
std::vector<CheckResult> run_selfcheck(std::uint64_t seed);

/// Command-line entry point; returns the process exit status.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace advcomm::harness
