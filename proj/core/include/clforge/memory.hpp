#pragma once

// Hard-sample replay memory: per-task buffers of the highest-loss training
// samples, and the Fisher-boosted task weights used to draw replay samples.

#include <span>
#include <vector>

#include "clforge/adapters.hpp"
#include "clforge/model.hpp"
#include "clforge/rng.hpp"
#include "clforge/taskgen.hpp"

namespace clforge {

struct FisherMap;

inline constexpr double kDefaultMemoryRatio = 0.15;
inline constexpr double kDefaultBoostAlpha = 0.5;

struct BufferEntry {
  Tensor image;
  Tensor mask;
  TaskId task = 0;
  double difficulty = 0.0;  // pixel cross-entropy at selection time
  std::size_t source_index = 0;
};

struct TaskMemory {
  TaskId task = 0;
  std::vector<BufferEntry> entries;  // sorted by descending difficulty
  double fisher_avg = 0.0;
  double replay_weight = 0.0;

  bool empty() const { return entries.empty(); }
};

// Mean pixel BCE of sigmoid(f(x, p)) against the mask.
double score_difficulty(const BiModalSegmenter& model, const LoraAdapter* adapter,
                        std::span<const std::size_t> prompt, const Sample& sample);
// Same score for many samples in one batched forward pass.
std::vector<double> score_difficulties(const BiModalSegmenter& model, const LoraAdapter* adapter,
                                       std::span<const std::size_t> prompt, std::span<const Sample> samples);

// floor(n * r_memory), clamped to at least one entry.
std::size_t buffer_capacity(std::size_t n, double r_memory);

// Keeps the buffer_capacity(|dataset|) highest-scoring samples, sorted by
// descending difficulty with ties broken by dataset index.
TaskMemory build_buffer(TaskId task, std::span<const Sample> dataset, std::span<const double> scores,
                        double r_memory = kDefaultMemoryRatio);

// Flat mean of every Fisher element over all parameters in the map.
double average_fisher(const FisherMap& fisher);

// (1 / (t_current - t)) * (1 + boost_alpha * fisher_avg).
double replay_weight(std::size_t t, std::size_t t_current, double fisher_avg,
                     double boost_alpha = kDefaultBoostAlpha);

// Task sampling probabilities: replay weights normalised to sum to 1
// (empty memories get probability 0).
std::vector<double> replay_probabilities(std::span<const TaskMemory> memories);

enum class WithinTaskSampling {
  kUniform,
  kDifficulty,  // proportional to 1 + difficulty / max task difficulty
};

// Draws n entries with replacement: a task by replay_probabilities, then an
// entry within the task.
std::vector<BufferEntry> sample_replay(std::span<const TaskMemory> memories, std::size_t n, Rng& rng,
                                       WithinTaskSampling within = WithinTaskSampling::kDifficulty);

}  // namespace clforge
