#include "clforge/memory.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "clforge/consolidation.hpp"
#include "clforge/losses.hpp"

namespace clforge {

double score_difficulty(const BiModalSegmenter& model, const LoraAdapter* adapter,
                        std::span<const std::size_t> prompt, const Sample& sample) {
  const Tensor logits = model.forward(sample.image, prompt, adapter);
  return pixel_cross_entropy(logits.data(), sample.mask.data());
}

std::vector<double> score_difficulties(const BiModalSegmenter& model, const LoraAdapter* adapter,
                                       std::span<const std::size_t> prompt, std::span<const Sample> samples) {
  if (samples.empty()) return {};
  NoGradGuard no_grad;
  const auto& cfg = model.config();
  std::vector<Tensor> patches;
  patches.reserve(samples.size());
  for (const auto& s : samples) patches.push_back(to_patches(s.image, cfg));
  const Tensor logits = model.forward_patches(concat(patches), prompt, adapter);
  std::vector<double> out;
  out.reserve(samples.size());
  const std::size_t per = cfg.pixels();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Tensor mask = to_patches(samples[i].mask, cfg);
    out.push_back(pixel_cross_entropy(logits.data().subspan(i * per, per), mask.data()));
  }
  return out;
}

std::size_t buffer_capacity(std::size_t n, double r_memory) {
  const auto k = static_cast<std::size_t>(std::floor(static_cast<double>(n) * r_memory));
  return std::min(n, std::max<std::size_t>(k, 1));
}

TaskMemory build_buffer(TaskId task, std::span<const Sample> dataset, std::span<const double> scores,
                        double r_memory) {
  if (!(r_memory > 0.0 && r_memory < 1.0)) throw PreconditionError("r_memory must lie in (0, 1)");
  if (dataset.empty()) throw PreconditionError("build_buffer: empty dataset");
  if (scores.size() != dataset.size()) throw ShapeError("build_buffer: one score per sample required");
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  TaskMemory mem;
  mem.task = task;
  const std::size_t k = buffer_capacity(dataset.size(), r_memory);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t idx = order[i];
    if (scores[idx] < 0.0) throw PreconditionError("difficulty scores must be non-negative");
    mem.entries.push_back({dataset[idx].image, dataset[idx].mask, task, scores[idx], idx});
  }
  return mem;
}

double average_fisher(const FisherMap& fisher) {
  if (fisher.values.empty()) throw PreconditionError("average_fisher: empty Fisher map");
  long double total = 0.0L;
  std::size_t count = 0;
  for (const auto& [name, t] : fisher.values) {
    for (double v : t.data()) total += v;
    count += t.numel();
  }
  return static_cast<double>(total / static_cast<long double>(count));
}

double replay_weight(std::size_t t, std::size_t t_current, double fisher_avg, double boost_alpha) {
  if (t >= t_current) throw PreconditionError("replay_weight: task index must precede the current task");
  if (fisher_avg < 0.0) throw PreconditionError("replay_weight: negative Fisher average");
  return (1.0 / static_cast<double>(t_current - t)) * (1.0 + boost_alpha * fisher_avg);
}

std::vector<double> replay_probabilities(std::span<const TaskMemory> memories) {
  std::vector<double> p(memories.size(), 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < memories.size(); ++i) {
    if (!memories[i].empty()) p[i] = std::max(0.0, memories[i].replay_weight);
    total += p[i];
  }
  if (total > 0.0) {
    for (auto& v : p) v /= total;
  }
  return p;
}

namespace {

std::size_t draw(std::span<const double> cumulative, Rng& rng) {
  const double u = uniform01(rng) * cumulative.back();
  const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
  return std::min<std::size_t>(static_cast<std::size_t>(it - cumulative.begin()), cumulative.size() - 1);
}

}  // namespace

std::vector<BufferEntry> sample_replay(std::span<const TaskMemory> memories, std::size_t n, Rng& rng,
                                       WithinTaskSampling within) {
  if (n == 0) return {};
  const auto probs = replay_probabilities(memories);
  std::vector<double> task_cum(probs.size());
  std::partial_sum(probs.begin(), probs.end(), task_cum.begin());
  if (task_cum.empty() || task_cum.back() <= 0.0) {
    throw PreconditionError("sample_replay: no non-empty memory with positive replay weight");
  }

  std::vector<std::vector<double>> entry_cum(memories.size());
  for (std::size_t t = 0; t < memories.size(); ++t) {
    const auto& entries = memories[t].entries;
    if (entries.empty()) continue;
    double max_d = 0.0;
    for (const auto& e : entries) max_d = std::max(max_d, e.difficulty);
    double acc = 0.0;
    for (const auto& e : entries) {
      const double w = (within == WithinTaskSampling::kDifficulty && max_d > 0.0) ? 1.0 + e.difficulty / max_d : 1.0;
      acc += w;
      entry_cum[t].push_back(acc);
    }
  }

  std::vector<BufferEntry> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t t = draw(task_cum, rng);
    const std::size_t e = draw(entry_cum[t], rng);
    out.push_back(memories[t].entries[e]);
  }
  return out;
}

}  // namespace clforge
