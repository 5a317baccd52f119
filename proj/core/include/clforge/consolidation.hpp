#pragma once

// Difficulty-weighted diagonal Fisher information over the hard-sample
// buffer, post-task parameter anchors, and the EWC drift penalty.

#include <functional>
#include <span>

#include "clforge/adapters.hpp"
#include "clforge/memory.hpp"
#include "clforge/tensor.hpp"

namespace clforge {

struct FisherMap {
  std::map<ParamId, Tensor> values;  // elementwise >= 0, parameter-shaped
  TaskId source_task = 0;
  std::size_t sample_count = 0;

  bool empty() const { return values.empty(); }
};

struct Anchor {
  NamedTensors values;
  TaskId task = 0;
};

// w_diff = 1 + loss / max_loss, in [1, 2]; 1 for every sample when max_loss == 0.
double difficulty_weight(double loss, double max_loss);

enum class FisherWeighting { kUniform, kDifficulty };

// F_i = sum_x w(x) (dL(x)/dθ_i)^2 / sum_x w(x) over the samples, where
// sample_loss(k) builds the differentiable loss of sample k and w(x) is
// difficulty_weight (or 1 for kUniform). Generic over the loss so oracles can
// feed it directly.
FisherMap compute_fisher(const std::function<Tensor(std::size_t)>& sample_loss, std::size_t sample_count,
                         std::span<const double> difficulties, const NamedTensors& params,
                         FisherWeighting weighting, TaskId task);

// Per-sample loss is seg + dice of the sample through the task's adapter; the
// Fisher covers `params` (the parameters trainable during the task).
FisherMap compute_fisher(const BiModalSegmenter& model, const LoraAdapter& adapter,
                         std::span<const std::size_t> prompt, const TaskMemory& memory, const NamedTensors& params,
                         FisherWeighting weighting = FisherWeighting::kDifficulty);

// Same, over an arbitrary sample set (classic uniform EWC Fisher).
FisherMap compute_fisher(const BiModalSegmenter& model, const LoraAdapter& adapter,
                         std::span<const std::size_t> prompt, std::span<const Sample> samples, TaskId task,
                         const NamedTensors& params);

// sum_{t'} sum_i F_i^{t'} (θ_i - θ_i^{t'})^2. Anchors and Fisher maps are
// aligned by position; parameters missing from `live` contribute nothing.
Tensor ewc_penalty(const NamedTensors& live, std::span<const Anchor> anchors, std::span<const FisherMap> fishers);

// Deep copy of the given parameters.
Anchor snapshot_anchor(const NamedTensors& params, TaskId task);

}  // namespace clforge
