// clforge: continual segmentation experiments from the command line.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "clforge/error.hpp"
#include "clforge/experiment.hpp"
#include "clforge/selftest.hpp"

namespace {

struct ConfigFlags {
  std::string config_path;
  std::optional<double> tau;
  std::optional<std::string> mode;
  std::vector<std::uint64_t> seeds;
  std::optional<std::string> out;
};

void add_config_flags(CLI::App* cmd, ConfigFlags& f) {
  cmd->add_option("--config", f.config_path, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--tau", f.tau, "similarity threshold for adapter reuse");
  cmd->add_option("--mode", f.mode, "sequential | ewc | replay | fisher | bidirectional | full");
  cmd->add_option("--seeds", f.seeds, "seeds to run (replaces the config list)")->delimiter(',');
  cmd->add_option("--out", f.out, "output directory (overrides CLFORGE_OUT)");
}

clforge::ExperimentConfig resolve(const ConfigFlags& f) {
  clforge::Overrides o;
  o.tau = f.tau;
  o.mode = f.mode;
  if (!f.seeds.empty()) o.seeds = f.seeds;
  if (f.out) o.out_dir = *f.out;
  return clforge::apply_overrides(clforge::load_experiment_config(f.config_path), o);
}

int selftest(std::ostream& out) {
  bool ok = true;
  for (const auto& c : clforge::run_selftest()) {
    out << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << "\n";
    ok = ok && c.passed;
  }
  return ok ? clforge::kExitOk : clforge::kExitGateFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"clforge: continual learning experiments on synthetic segmentation tasks"};
  app.require_subcommand(1);

  ConfigFlags run_flags, ablate_flags, sweep_flags;
  auto* run = app.add_subcommand("run", "train every configured seed and aggregate the results");
  add_config_flags(run, run_flags);

  auto* ablate = app.add_subcommand("ablate", "run the five-mode ablation ladder");
  add_config_flags(ablate, ablate_flags);

  std::vector<double> taus;
  auto* sweep = app.add_subcommand("sweep-tau", "sweep the adapter-reuse threshold");
  add_config_flags(sweep, sweep_flags);
  sweep->add_option("--taus", taus, "threshold grid (default 0.3,0.5,0.75,0.9)")->delimiter(',');

  std::string suite = "mixed";
  std::uint64_t gen_seed = 43;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-tasks", "export a suite's datasets as raw float64 files");
  gen->add_option("--suite", suite, "committed suite name or task-list JSON");
  gen->add_option("--seed", gen_seed, "master seed");
  gen->add_option("--out", gen_out, "destination directory")->required();

  std::string report_dir;
  auto* report = app.add_subcommand("report", "regenerate summary.json from a finished run directory");
  report->add_option("dir", report_dir, "seed directory with metrics.csv and run_info.json")->required();

  auto* self = app.add_subcommand("selftest", "run the fast oracle checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : clforge::kExitConfig;
  }

  try {
    if (*run) return clforge::cmd_run(resolve(run_flags), std::cout);
    if (*ablate) return clforge::cmd_ablate(resolve(ablate_flags), std::cout);
    if (*sweep) {
      const auto config = resolve(sweep_flags);
      return clforge::cmd_sweep_tau(config, taus.empty() ? clforge::kDefaultTauGrid : taus, std::cout);
    }
    if (*gen) return clforge::cmd_gen_tasks(suite, gen_seed, gen_out, std::cout);
    if (*report) return clforge::cmd_report(report_dir, std::cout);
    if (*self) return selftest(std::cout);
  } catch (const clforge::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return clforge::kExitConfig;
  } catch (const clforge::NumericError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return clforge::kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
