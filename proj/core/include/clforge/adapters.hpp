#pragma once

#include <map>
#include <optional>
#include <span>
#include <vector>

#include "clforge/model.hpp"
#include "clforge/rng.hpp"
#include "clforge/tensor.hpp"

namespace clforge {

using TaskId = int;
using AdapterId = int;

inline constexpr std::size_t kDefaultLoraRank = 8;
inline constexpr double kDefaultLoraAlpha = 16.0;
inline constexpr double kDefaultSimilarityThreshold = 0.75;

// Low-rank pair for one target matrix W [d, k]: B [d, r], A [r, k].
struct LoraFactors {
  Tensor a;
  Tensor b;
};

// One adapter: a (B, A) pair per target matrix, applied as
// W' = W + (alpha / rank) * B * A.
class LoraAdapter {
 public:
  // A ~ U(-1/sqrt(k), 1/sqrt(k)), B = 0, so the initial update is exactly zero.
  LoraAdapter(std::span<const LoraTarget> targets, std::size_t rank, double alpha, Rng& rng);
  LoraAdapter(std::size_t rank, double alpha, std::map<ParamId, LoraFactors> factors);

  LoraAdapter(const LoraAdapter& other);
  LoraAdapter& operator=(const LoraAdapter& other);
  LoraAdapter(LoraAdapter&&) noexcept = default;
  LoraAdapter& operator=(LoraAdapter&&) noexcept = default;

  std::size_t rank() const { return rank_; }
  double alpha() const { return alpha_; }
  double scaling() const { return alpha_ / static_cast<double>(rank_); }

  const std::map<ParamId, LoraFactors>& factors() const { return factors_; }
  const LoraFactors* find(const ParamId& target) const;

  // (alpha / r) * B * A for one target; differentiable w.r.t. A and B.
  Tensor delta(const ParamId& target) const;
  // W + delta(target). Throws ShapeError if W does not match the factors.
  Tensor effective(const ParamId& target, const Tensor& base) const;

  // Handles to the factor tensors, named "<prefix><target>.A" / ".B".
  NamedTensors parameters(const std::string& prefix) const;
  std::size_t element_count() const;
  void set_trainable(bool on);

  std::vector<TaskId> owner_tasks;

 private:
  std::size_t rank_;
  double alpha_;
  std::map<ParamId, LoraFactors> factors_;
};

double cosine_similarity(const PromptEmbedding& a, const PromptEmbedding& b);

struct AllocationDecision {
  enum class Kind { kReuse, kNew };
  Kind kind = Kind::kNew;
  AdapterId adapter = -1;
  std::optional<TaskId> most_similar_task;
  double similarity = 0.0;  // max similarity, 0 for an empty bank
  std::map<TaskId, double> all_similarities;

  bool reused() const { return kind == Kind::kReuse; }
};

class AdapterBank {
 public:
  const std::map<AdapterId, LoraAdapter>& adapters() const { return adapters_; }
  const LoraAdapter& adapter(AdapterId id) const;
  LoraAdapter& adapter(AdapterId id);
  const LoraAdapter& adapter_for_task(TaskId task) const { return adapter(assignment(task)); }
  LoraAdapter& adapter_for_task(TaskId task) { return adapter(assignment(task)); }
  AdapterId assignment(TaskId task) const;
  bool has_task(TaskId task) const { return task_assignment_.count(task) != 0; }

  const std::map<TaskId, AdapterId>& task_assignment() const { return task_assignment_; }
  const std::map<TaskId, PromptEmbedding>& task_prompts() const { return task_prompts_; }
  AdapterId next_adapter_id() const;

  // Records the decision for `task`. A New decision inserts a fresh adapter
  // under decision.adapter; a Reuse decision appends the task to the owners.
  void commit(TaskId task, const PromptEmbedding& prompt, const AllocationDecision& decision,
              std::span<const LoraTarget> targets, std::size_t rank, double alpha, Rng& rng);

  // Used by checkpoint restore.
  void restore(std::map<AdapterId, LoraAdapter> adapters, std::map<TaskId, AdapterId> assignment,
               std::map<TaskId, PromptEmbedding> prompts);

 private:
  std::map<AdapterId, LoraAdapter> adapters_;
  std::map<TaskId, AdapterId> task_assignment_;
  std::map<TaskId, PromptEmbedding> task_prompts_;
};

// Reuse the adapter of k* = argmax_k s(new, k) when that similarity exceeds
// tau (ties go to the lowest task id); otherwise a new adapter.
AllocationDecision allocate(const PromptEmbedding& new_prompt, const AdapterBank& bank,
                            double tau = kDefaultSimilarityThreshold);

// Effective weights of every target matrix with the adapter applied. The
// base model is not modified.
NamedTensors apply(const LoraAdapter& adapter, const BiModalSegmenter& base);

struct TrainableCount {
  std::size_t adapter_elements = 0;
  std::size_t shared_elements = 0;
  std::size_t trainable = 0;
  std::size_t total = 0;  // base + shared + the active adapter
  double fraction = 0.0;
};

TrainableCount trainable_count(const LoraAdapter& active, const BiModalSegmenter& model);

// Sum over targets of rank * (d + k).
std::size_t lora_element_formula(std::span<const LoraTarget> targets, std::size_t rank);

}  // namespace clforge
