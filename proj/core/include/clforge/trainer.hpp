#pragma once

// Per-task continual training: mixed current/replay batches, the combined
// seg + dice + EWC objective, early stopping on validation Dice, and the
// end-of-task consolidation sequence (buffer, Fisher, anchor, replay weights).

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clforge/adapters.hpp"
#include "clforge/consolidation.hpp"
#include "clforge/memory.hpp"
#include "clforge/metrics.hpp"
#include "clforge/model.hpp"
#include "clforge/taskgen.hpp"

namespace clforge {

// The ablation ladder. kFull and kBidirectional are the same method.
enum class Mode { kSequential, kEwc, kReplay, kFisher, kBidirectional, kFull };

std::string to_string(Mode mode);
Mode parse_mode(const std::string& name);
std::vector<Mode> ablation_ladder();

enum class FisherSource {
  kNone,
  kTrainSetUniform,      // classic EWC: plain mean over the whole train split
  kBufferDifficulty,     // difficulty-weighted mean over the hard-sample buffer
};

// What each mode switches on.
struct ModeFeatures {
  bool similarity_allocation = false;  // otherwise one adapter shared by all tasks
  bool ewc = false;
  bool replay = false;
  FisherSource fisher = FisherSource::kNone;
  bool fisher_boost = false;           // Fisher term of the replay weight
  WithinTaskSampling within = WithinTaskSampling::kUniform;
};

ModeFeatures features(Mode mode);

struct TrainConfig {
  double lr = 8e-4;
  double weight_decay = 8e-5;
  std::size_t batch_size = 16;
  std::size_t max_epochs = 30;
  std::size_t early_stop_patience = 5;
  double r_replay = 0.4;
  double lambda_ewc = 500.0;
  std::size_t lora_rank = kDefaultLoraRank;
  double lora_alpha = kDefaultLoraAlpha;
  double tau = kDefaultSimilarityThreshold;
  double r_memory = kDefaultMemoryRatio;
  double boost_alpha = kDefaultBoostAlpha;
  // Route every task through one adapter even in modes that allocate by
  // similarity (used for the mode-collapse check).
  bool force_shared_adapter = false;
  std::uint64_t seed = 43;

  // Throws ConfigError naming the offending field.
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
// Fields absent from `j` keep their value in `base`.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

struct TaskRecord {
  TaskSpec spec;
  std::vector<std::size_t> tokens;
  PromptEmbedding prompt;
  AdapterId adapter = -1;
};

struct EpochLog {
  TaskId task = 0;
  std::size_t epoch = 0;
  double seg_loss = 0.0;
  double dice_loss = 0.0;
  double ewc_penalty = 0.0;
  double val_dice = 0.0;
  std::map<TaskId, std::size_t> replay_histogram;
};

struct AllocationLog {
  TaskId task = 0;
  std::string kind;  // "new" | "reuse"
  AdapterId adapter = -1;
  std::optional<TaskId> k_star;
  double similarity = 0.0;
};

nlohmann::json to_json(const AllocationLog& log);
std::string epoch_log_csv(const std::vector<EpochLog>& logs);

// Continuous invariant checks: base weights bit-identical across steps,
// adapters of other tasks untouched, adapter locality of the forward pass,
// and replay routing through the owning task's adapter.
struct InvariantMonitor {
  std::size_t checks = 0;
  std::vector<std::string> violations;

  void expect(bool ok, const std::string& what);
  bool clean() const { return violations.empty(); }
};

struct ContinualState {
  explicit ContinualState(BiModalSegmenter m) : model(std::move(m)) {}

  BiModalSegmenter model;
  Mode mode = Mode::kFull;
  TrainConfig config;
  AdapterBank bank;
  std::vector<TaskRecord> tasks;     // completed tasks, in order
  std::vector<TaskMemory> memories;  // one per completed task when replay is on
  std::vector<FisherMap> fishers;    // one per completed task when EWC is on
  std::vector<Anchor> anchors;
  ResultsMatrix results;
  std::vector<EpochLog> epoch_log;
  std::vector<AllocationLog> allocations;
  std::vector<TrainableCount> trainable;  // per task
  InvariantMonitor monitor;

  // Generated datasets of the completed tasks (regenerated from the specs on
  // checkpoint load, never serialised).
  std::vector<TaskData> data;

  std::size_t current() const { return tasks.size(); }
};

ContinualState make_state(BiModalSegmenter pretrained, Mode mode, const TrainConfig& config);

struct BatchItem {
  Tensor image;
  Tensor mask;
  TaskId task = 0;
  bool replay = false;
};

// round(batch_size * r_replay) when any memory is non-empty, else 0.
std::size_t replay_count(std::size_t batch_size, double r_replay, bool have_memories);

// The first batch_size - n_replay samples of `current` (fewer if it is
// shorter) plus n_replay draws from the memories.
std::vector<BatchItem> make_batch(std::span<const Sample> current, TaskId current_task,
                                  std::span<const TaskMemory> memories, std::size_t batch_size, double r_replay,
                                  Rng& rng, WithinTaskSampling within = WithinTaskSampling::kDifficulty);

struct LossParts {
  Tensor total;
  double seg = 0.0;
  double dice = 0.0;
  double ewc = 0.0;
};

// seg + dice averaged uniformly over the batch (each sample routed through
// its task's adapter and prompt) plus lambda_ewc * ewc_penalty over the
// parameters trainable now. `active` lists those parameters.
LossParts total_loss(const ContinualState& state, std::span<const BatchItem> batch, const TaskRecord& current,
                     const LoraAdapter& current_adapter, const NamedTensors& active, bool with_ewc);

// Mean per-sample Dice of the binarised prediction.
double evaluate_dice(const BiModalSegmenter& model, const LoraAdapter* adapter, std::span<const std::size_t> prompt,
                     std::span<const Sample> samples);

// Trains one task end to end and records its results row.
void train_task(ContinualState& state, TaskData data);

struct RunResult {
  ContinualState state;
  double wall_clock_seconds = 0.0;
};

using TaskHook = std::function<void(const ContinualState&)>;

// Throws PreconditionError for fewer than two tasks.
RunResult run_sequence(const BiModalSegmenter& pretrained, const std::vector<TaskSpec>& specs,
                       const TrainConfig& config, Mode mode, const TaskHook& after_task = {});

// Run-level facts for the report: mode, seed, trainable counts, allocations.
nlohmann::json run_info(const RunResult& run, const std::string& suite);

}  // namespace clforge
