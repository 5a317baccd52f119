#pragma once

// Experiment orchestration behind the command-line tool: config parsing,
// per-seed runs with report files, the ablation ladder and the threshold
// sweep.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clforge/pretrain.hpp"
#include "clforge/taskgen.hpp"
#include "clforge/trainer.hpp"

namespace clforge {

inline constexpr int kConfigVersion = 1;

struct ExperimentConfig {
  int version = kConfigVersion;
  std::string suite = "mixed";  // a committed suite name, or a path to a JSON task list
  Mode mode = Mode::kFull;
  TrainConfig train;
  std::vector<std::uint64_t> seeds = {43, 44, 45};
  std::filesystem::path out_dir = "clforge-out";
  std::size_t pretrain_steps = kDefaultPretrainSteps;
  std::uint64_t pretrain_seed = kDefaultPretrainSeed;
  // Per-split sample counts, when set, replace those of every task.
  std::optional<std::size_t> n_train, n_val, n_test;

  void validate() const;
};

// Required fields: version, suite, mode. Everything else has a default.
// Throws ConfigError naming the first offending field.
ExperimentConfig parse_experiment_config(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
nlohmann::json to_json(const ExperimentConfig& config);

struct Overrides {
  std::optional<double> tau;
  std::optional<std::string> mode;
  std::optional<std::vector<std::uint64_t>> seeds;
  std::optional<std::filesystem::path> out_dir;
};

// Flags replace config fields. The output directory comes from --out, else
// CLFORGE_OUT, else the config.
ExperimentConfig apply_overrides(ExperimentConfig config, const Overrides& overrides);

// The task list for one seed: committed suites derive their task seeds from it.
std::vector<TaskSpec> resolve_suite(const ExperimentConfig& config, std::uint64_t seed);

struct SeedOutcome {
  std::uint64_t seed = 0;
  double avg_dice = 0.0;
  double avg_fr = 0.0;
  std::size_t new_adapters = 0;
  std::size_t reused_adapters = 0;
  std::size_t invariant_violations = 0;
  double wall_clock_seconds = 0.0;
};

// Runs one seed; when out_dir is given, writes metrics.csv, summary.json,
// run_info.json, epochs.csv, allocations.jsonl, consolidation.csv and the
// checkpoint (refreshed after every task).
SeedOutcome run_seed(const ExperimentConfig& config, std::uint64_t seed,
                     const std::optional<std::filesystem::path>& out_dir);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation over seeds
};
MeanStd mean_std(const std::vector<double>& values);

nlohmann::json aggregate_json(const ExperimentConfig& config, const std::vector<SeedOutcome>& outcomes);

struct LadderRow {
  Mode mode = Mode::kSequential;
  double avg_dice = 0.0;
  double delta_dice = 0.0;  // against the sequential row
  double avg_fr = 0.0;
  double delta_fr = 0.0;
  std::vector<SeedOutcome> seeds;
};
std::vector<LadderRow> run_ablation(const ExperimentConfig& config,
                                    const std::optional<std::filesystem::path>& out_dir);

struct SweepRow {
  double tau = 0.0;
  double new_fraction = 0.0;
  double reuse_fraction = 0.0;
  double avg_dice = 0.0;
  double avg_fr = 0.0;
};
inline const std::vector<double> kDefaultTauGrid = {0.3, 0.5, 0.75, 0.9};
std::vector<SweepRow> run_tau_sweep(const ExperimentConfig& config, const std::vector<double>& taus,
                                    const std::optional<std::filesystem::path>& out_dir);

// Subcommands. Each returns a process exit code and reports to `out`.
int cmd_run(const ExperimentConfig& config, std::ostream& out);
int cmd_ablate(const ExperimentConfig& config, std::ostream& out);
int cmd_sweep_tau(const ExperimentConfig& config, const std::vector<double>& taus, std::ostream& out);
int cmd_gen_tasks(const std::string& suite, std::uint64_t seed, const std::filesystem::path& out_dir,
                  std::ostream& out);
int cmd_report(const std::filesystem::path& run_dir, std::ostream& out);

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitDivergence = 3;
inline constexpr int kExitGateFailure = 4;

}  // namespace clforge
