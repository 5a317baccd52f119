#include "clforge/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <ostream>
#include <sstream>

#include <fmt/format.h>

#include "clforge/metrics.hpp"
#include "clforge/persist.hpp"

namespace clforge {

using nlohmann::json;

// ---- config ---------------------------------------------------------------

void ExperimentConfig::validate() const {
  if (version != kConfigVersion) throw ConfigError("version", "unsupported config version " + std::to_string(version));
  if (suite.empty()) throw ConfigError("suite", "must not be empty");
  if (seeds.empty()) throw ConfigError("seeds", "at least one seed is required");
  if (out_dir.empty()) throw ConfigError("out_dir", "must not be empty");
  for (auto n : {n_train, n_val, n_test}) {
    if (n && *n == 0) throw ConfigError("task_counts", "split sizes must be at least 1");
  }
  train.validate();
}

namespace {

template <typename T>
T field(const json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(key, j.contains(key) ? "has the wrong type" : "is required");
  }
}

}  // namespace

ExperimentConfig parse_experiment_config(const json& j) {
  if (!j.is_object()) throw ConfigError("config", "must be a JSON object");
  ExperimentConfig c;
  c.version = field<int>(j, "version");
  c.suite = field<std::string>(j, "suite");
  c.mode = parse_mode(field<std::string>(j, "mode"));
  json train = j.contains("train") ? j.at("train") : json::object();
  if (!train.is_object()) throw ConfigError("train", "must be an object");
  // Ratios and thresholds may also sit at the top level.
  for (const char* k : {"tau", "r_memory", "boost_alpha", "lambda_ewc", "r_replay", "lr", "weight_decay", "batch_size",
                        "max_epochs", "early_stop_patience", "lora_rank", "lora_alpha"}) {
    if (j.contains(k)) train[k] = j.at(k);
  }
  c.train = train_config_from_json(train);
  if (j.contains("seeds")) c.seeds = field<std::vector<std::uint64_t>>(j, "seeds");
  if (j.contains("out_dir")) c.out_dir = field<std::string>(j, "out_dir");
  if (j.contains("pretrain_steps")) c.pretrain_steps = field<std::size_t>(j, "pretrain_steps");
  if (j.contains("pretrain_seed")) c.pretrain_seed = field<std::uint64_t>(j, "pretrain_seed");
  if (j.contains("task_counts")) {
    const json& tc = j.at("task_counts");
    if (!tc.is_object()) throw ConfigError("task_counts", "must be an object");
    if (tc.contains("n_train")) c.n_train = field<std::size_t>(tc, "n_train");
    if (tc.contains("n_val")) c.n_val = field<std::size_t>(tc, "n_val");
    if (tc.contains("n_test")) c.n_test = field<std::size_t>(tc, "n_test");
  }
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const Error&) {
    throw ConfigError("config", "cannot read " + path.string());
  }
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError("config", std::string("not valid JSON: ") + e.what());
  }
  return parse_experiment_config(j);
}

json to_json(const ExperimentConfig& c) {
  json j{{"version", c.version},         {"suite", c.suite},
         {"mode", to_string(c.mode)},    {"train", to_json(c.train)},
         {"seeds", c.seeds},             {"out_dir", c.out_dir.string()},
         {"pretrain_steps", c.pretrain_steps}, {"pretrain_seed", c.pretrain_seed}};
  json tc = json::object();
  if (c.n_train) tc["n_train"] = *c.n_train;
  if (c.n_val) tc["n_val"] = *c.n_val;
  if (c.n_test) tc["n_test"] = *c.n_test;
  if (!tc.empty()) j["task_counts"] = tc;
  return j;
}

ExperimentConfig apply_overrides(ExperimentConfig c, const Overrides& o) {
  if (o.tau) c.train.tau = *o.tau;
  if (o.mode) c.mode = parse_mode(*o.mode);
  if (o.seeds) c.seeds = *o.seeds;
  if (o.out_dir) {
    c.out_dir = *o.out_dir;
  } else if (const char* env = std::getenv("CLFORGE_OUT"); env != nullptr && *env != '\0') {
    c.out_dir = env;
  }
  c.validate();
  return c;
}

namespace {

std::vector<TaskSpec> load_custom_suite(const std::string& path, std::uint64_t seed) {
  std::vector<TaskSpec> specs;
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const std::exception& e) {
    throw ConfigError("suite", "'" + path + "' is neither a committed suite nor a readable JSON task list");
  }
  const json& tasks = j.is_object() && j.contains("tasks") ? j.at("tasks") : j;
  if (!tasks.is_array()) throw ConfigError("suite", "custom suite must be a JSON array of task specs");
  try {
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      // Entries of an exported dataset manifest wrap the spec.
      const json& entry = tasks[i].is_object() && tasks[i].contains("spec") ? tasks[i].at("spec") : tasks[i];
      TaskSpec s = task_spec_from_json(entry);
      if (!entry.contains("seed")) s.seed = derive_seed(seed, Stream::kTaskGen, 1000 + i);
      specs.push_back(std::move(s));
    }
  } catch (const Error& e) {
    throw ConfigError("suite", e.what());
  }
  return specs;
}

}  // namespace

std::vector<TaskSpec> resolve_suite(const ExperimentConfig& c, std::uint64_t seed) {
  std::vector<TaskSpec> specs;
  const auto names = suite_names();
  if (std::find(names.begin(), names.end(), c.suite) != names.end()) {
    specs = default_suite(c.suite, seed);
  } else {
    specs = load_custom_suite(c.suite, seed);
  }
  for (auto& s : specs) {
    if (c.n_train) s.n_train = *c.n_train;
    if (c.n_val) s.n_val = *c.n_val;
    if (c.n_test) s.n_test = *c.n_test;
  }
  return specs;
}

// ---- runs -----------------------------------------------------------------

namespace {

std::string consolidation_csv(const ContinualState& s) {
  std::ostringstream os;
  os.precision(17);
  os << "task,fisher_avg,replay_weight,buffer_size\n";
  for (std::size_t i = 0; i < s.memories.size(); ++i) {
    const auto& m = s.memories[i];
    os << s.tasks[i].spec.name << ',' << m.fisher_avg << ',' << m.replay_weight << ',' << m.entries.size() << '\n';
  }
  return os.str();
}

std::string allocations_jsonl(const ContinualState& s) {
  std::string out;
  for (const auto& a : s.allocations) out += to_json(a).dump() + "\n";
  return out;
}

}  // namespace

SeedOutcome run_seed(const ExperimentConfig& config, std::uint64_t seed,
                     const std::optional<std::filesystem::path>& out_dir) {
  TrainConfig train = config.train;
  train.seed = seed;
  const auto specs = resolve_suite(config, seed);
  const BiModalSegmenter& base = pretrained_base(config.pretrain_steps, config.pretrain_seed);

  TaskHook hook;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    hook = [dir = *out_dir](const ContinualState& s) { save_state(dir / "checkpoint.clf", s); };
  }
  const RunResult run = run_sequence(base, specs, train, config.mode, hook);
  const auto& s = run.state;

  SeedOutcome o;
  o.seed = seed;
  o.avg_dice = avg_dice(s.results, s.results.stages() - 1);
  o.avg_fr = forgetting_rate(s.results).average;
  for (const auto& a : s.allocations) (a.kind == "new" ? o.new_adapters : o.reused_adapters) += 1;
  o.invariant_violations = s.monitor.violations.size();
  o.wall_clock_seconds = run.wall_clock_seconds;

  if (out_dir) {
    emit_report(s.results, run_info(run, config.suite), *out_dir);
    write_file_atomic(*out_dir / "epochs.csv", epoch_log_csv(s.epoch_log));
    write_file_atomic(*out_dir / "allocations.jsonl", allocations_jsonl(s));
    write_file_atomic(*out_dir / "consolidation.csv", consolidation_csv(s));
  }
  return o;
}

MeanStd mean_std(const std::vector<double>& v) {
  if (v.empty()) throw PreconditionError("mean_std: no values");
  MeanStd r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  for (double x : v) r.std += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(r.std / static_cast<double>(v.size()));
  return r;
}

json aggregate_json(const ExperimentConfig& config, const std::vector<SeedOutcome>& outcomes) {
  std::vector<double> dice, fr;
  json per_seed = json::array();
  for (const auto& o : outcomes) {
    dice.push_back(o.avg_dice);
    fr.push_back(o.avg_fr);
    per_seed.push_back({{"seed", o.seed},
                        {"avg_dice", o.avg_dice},
                        {"avg_fr", o.avg_fr},
                        {"new_adapters", o.new_adapters},
                        {"reused_adapters", o.reused_adapters},
                        {"invariant_violations", o.invariant_violations}});
  }
  const MeanStd d = mean_std(dice);
  const MeanStd f = mean_std(fr);
  return {{"version", kReportSchemaVersion},
          {"suite", config.suite},
          {"mode", to_string(config.mode)},
          {"seeds", per_seed},
          {"avg_dice", {{"mean", d.mean}, {"std", d.std}}},
          {"avg_fr", {{"mean", f.mean}, {"std", f.std}}}};
}

std::vector<LadderRow> run_ablation(const ExperimentConfig& config,
                                    const std::optional<std::filesystem::path>& out_dir) {
  std::vector<LadderRow> rows;
  for (Mode mode : ablation_ladder()) {
    ExperimentConfig c = config;
    c.mode = mode;
    LadderRow row;
    row.mode = mode;
    std::vector<double> dice, fr;
    for (auto seed : c.seeds) {
      std::optional<std::filesystem::path> dir;
      if (out_dir) dir = *out_dir / to_string(mode) / ("seed_" + std::to_string(seed));
      row.seeds.push_back(run_seed(c, seed, dir));
      dice.push_back(row.seeds.back().avg_dice);
      fr.push_back(row.seeds.back().avg_fr);
    }
    row.avg_dice = mean_std(dice).mean;
    row.avg_fr = mean_std(fr).mean;
    row.delta_dice = rows.empty() ? 0.0 : row.avg_dice - rows.front().avg_dice;
    row.delta_fr = rows.empty() ? 0.0 : row.avg_fr - rows.front().avg_fr;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<SweepRow> run_tau_sweep(const ExperimentConfig& config, const std::vector<double>& taus,
                                    const std::optional<std::filesystem::path>& out_dir) {
  std::vector<SweepRow> rows;
  for (double tau : taus) {
    if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("tau", "sweep values must lie in (0, 1)");
    ExperimentConfig c = config;
    c.train.tau = tau;
    SweepRow row;
    row.tau = tau;
    std::vector<double> dice, fr;
    double created = 0.0, reused = 0.0;
    for (auto seed : c.seeds) {
      std::optional<std::filesystem::path> dir;
      if (out_dir) dir = *out_dir / fmt::format("tau_{}", tau) / ("seed_" + std::to_string(seed));
      const SeedOutcome o = run_seed(c, seed, dir);
      dice.push_back(o.avg_dice);
      fr.push_back(o.avg_fr);
      created += static_cast<double>(o.new_adapters);
      reused += static_cast<double>(o.reused_adapters);
    }
    row.new_fraction = created / (created + reused);
    row.reuse_fraction = reused / (created + reused);
    row.avg_dice = mean_std(dice).mean;
    row.avg_fr = mean_std(fr).mean;
    rows.push_back(row);
  }
  return rows;
}

// ---- subcommands ----------------------------------------------------------

int cmd_run(const ExperimentConfig& config, std::ostream& out) {
  std::vector<SeedOutcome> outcomes;
  for (auto seed : config.seeds) {
    const auto dir = config.out_dir / ("seed_" + std::to_string(seed));
    outcomes.push_back(run_seed(config, seed, dir));
    const auto& o = outcomes.back();
    out << fmt::format("seed {}: avg Dice {:.4f}  avg FR {:.2f}%  adapters new/reuse {}/{}  ({:.1f} s)\n", seed,
                       o.avg_dice, o.avg_fr, o.new_adapters, o.reused_adapters, o.wall_clock_seconds);
  }
  const json agg = aggregate_json(config, outcomes);
  write_file_atomic(config.out_dir / "aggregate.json", agg.dump(2) + "\n");
  write_file_atomic(config.out_dir / "config.json", to_json(config).dump(2) + "\n");
  out << fmt::format("{} / {}: avg Dice {:.4f} ± {:.4f}  avg FR {:.2f} ± {:.2f}%\n", config.suite,
                     to_string(config.mode), agg["avg_dice"]["mean"].get<double>(),
                     agg["avg_dice"]["std"].get<double>(), agg["avg_fr"]["mean"].get<double>(),
                     agg["avg_fr"]["std"].get<double>());
  return kExitOk;
}

int cmd_ablate(const ExperimentConfig& config, std::ostream& out) {
  const auto rows = run_ablation(config, config.out_dir);
  std::ostringstream csv;
  csv.precision(17);
  csv << "mode,avg_dice,delta_dice,avg_fr,delta_fr\n";
  json ladder = json::array();
  out << fmt::format("{:<15}{:>10}{:>10}{:>10}{:>10}\n", "mode", "Dice", "ΔDice", "FR%", "ΔFR");
  for (const auto& r : rows) {
    csv << to_string(r.mode) << ',' << r.avg_dice << ',' << r.delta_dice << ',' << r.avg_fr << ',' << r.delta_fr
        << '\n';
    ladder.push_back({{"mode", to_string(r.mode)},
                      {"avg_dice", r.avg_dice},
                      {"delta_dice", r.delta_dice},
                      {"avg_fr", r.avg_fr},
                      {"delta_fr", r.delta_fr}});
    out << fmt::format("{:<15}{:>10.4f}{:>+10.4f}{:>10.2f}{:>+10.2f}\n", to_string(r.mode), r.avg_dice,
                       r.delta_dice, r.avg_fr, r.delta_fr);
  }
  write_file_atomic(config.out_dir / "ladder.csv", csv.str());
  write_file_atomic(config.out_dir / "ladder.json", json{{"suite", config.suite}, {"rows", ladder}}.dump(2) + "\n");
  return kExitOk;
}

int cmd_sweep_tau(const ExperimentConfig& config, const std::vector<double>& taus, std::ostream& out) {
  const auto rows = run_tau_sweep(config, taus, config.out_dir);
  std::ostringstream csv;
  csv.precision(17);
  csv << "tau,new_fraction,reuse_fraction,avg_dice,avg_fr\n";
  out << fmt::format("{:>6}{:>8}{:>8}{:>10}{:>10}\n", "tau", "new", "reuse", "Dice", "FR%");
  for (const auto& r : rows) {
    csv << r.tau << ',' << r.new_fraction << ',' << r.reuse_fraction << ',' << r.avg_dice << ',' << r.avg_fr << '\n';
    out << fmt::format("{:>6.3f}{:>7.0f}%{:>7.0f}%{:>10.4f}{:>10.2f}\n", r.tau, 100 * r.new_fraction,
                       100 * r.reuse_fraction, r.avg_dice, r.avg_fr);
  }
  write_file_atomic(config.out_dir / "sweep_tau.csv", csv.str());
  return kExitOk;
}

int cmd_gen_tasks(const std::string& suite, std::uint64_t seed, const std::filesystem::path& out_dir,
                  std::ostream& out) {
  ExperimentConfig c;
  c.suite = suite;
  const auto specs = resolve_suite(c, seed);
  const json manifest = export_dataset(out_dir, specs);
  out << "wrote " << manifest["tasks"].size() << " tasks to " << out_dir.string() << '\n';
  return kExitOk;
}

int cmd_report(const std::filesystem::path& run_dir, std::ostream& out) {
  const json summary = regenerate_summary(run_dir);
  const std::string text = summary.dump(2) + "\n";
  const auto path = run_dir / "summary.json";
  const bool same = std::filesystem::exists(path) && read_file(path) == text;
  write_file_atomic(path, text);
  const ResultsMatrix m = parse_metrics_csv(read_file(run_dir / "metrics.csv"));
  out << fmt::format("{:<20}", "stage");
  for (const auto& t : m.task_order()) out << fmt::format("{:>18}", t);
  out << '\n';
  for (std::size_t s = 0; s < m.stages(); ++s) {
    out << fmt::format("{:<20}", "after " + m.task_order()[s]);
    for (std::size_t i = 0; i <= s; ++i) out << fmt::format("{:>18.4f}", m.at(s, i));
    out << '\n';
  }
  if (m.stages() >= 2) {
    const auto fr = forgetting_rate(m);
    out << fmt::format("{:<20}", "FR%");
    for (const auto& v : fr.per_task) out << (v ? fmt::format("{:>18.2f}", *v) : fmt::format("{:>18}", "undef"));
    out << fmt::format("{:>18}\n", "-");
  }
  out << fmt::format("avg Dice {:.4f}  avg FR {}\n", summary["avg_dice"].get<double>(),
                     summary["avg_fr"].is_null() ? "n/a" : fmt::format("{:.2f}%", summary["avg_fr"].get<double>()));
  out << (same ? "summary.json unchanged\n" : "summary.json regenerated\n");
  return kExitOk;
}

}  // namespace clforge
