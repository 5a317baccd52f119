#include "clforge/consolidation.hpp"

#include <algorithm>

#include "clforge/losses.hpp"

namespace clforge {

double difficulty_weight(double loss, double max_loss) {
  if (max_loss <= 0.0) return 1.0;
  if (loss < 0.0 || loss > max_loss) throw PreconditionError("difficulty_weight: loss outside [0, max_loss]");
  return 1.0 + loss / max_loss;
}

FisherMap compute_fisher(const std::function<Tensor(std::size_t)>& sample_loss, std::size_t sample_count,
                         std::span<const double> difficulties, const NamedTensors& params,
                         FisherWeighting weighting, TaskId task) {
  if (sample_count == 0) throw PreconditionError("compute_fisher: empty memory");
  if (weighting == FisherWeighting::kDifficulty && difficulties.size() != sample_count) {
    throw ShapeError("compute_fisher: one difficulty per sample required");
  }
  double max_loss = 0.0;
  for (double d : difficulties) max_loss = std::max(max_loss, d);

  std::map<ParamId, std::vector<double>> acc;
  for (const auto& [name, p] : params) acc[name].assign(p.numel(), 0.0);
  double weight_total = 0.0;

  for (std::size_t k = 0; k < sample_count; ++k) {
    const double w = weighting == FisherWeighting::kDifficulty ? difficulty_weight(difficulties[k], max_loss) : 1.0;
    const GradientMap grads = backward(sample_loss(k), params);
    for (const auto& [name, g] : grads) {
      auto& dst = acc[name];
      const auto src = g.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += w * src[i] * src[i];
    }
    weight_total += w;
  }
  for (const auto& [name, p] : params) const_cast<Tensor&>(p).zero_grad();

  FisherMap fisher;
  fisher.source_task = task;
  fisher.sample_count = sample_count;
  for (auto& [name, values] : acc) {
    for (auto& v : values) v /= weight_total;
    fisher.values.emplace(name, Tensor(params.at(name).shape(), std::move(values)));
  }
  return fisher;
}

namespace {

Tensor single_sample_loss(const BiModalSegmenter& model, const LoraAdapter& adapter,
                          std::span<const std::size_t> prompt, const Tensor& image, const Tensor& mask) {
  const auto& cfg = model.config();
  const Tensor logits = model.forward_patches(to_patches(image, cfg), prompt, &adapter);
  const Tensor target = to_patches(mask, cfg);
  return add(seg_loss(logits, target), dice_loss(logits, target));
}

}  // namespace

FisherMap compute_fisher(const BiModalSegmenter& model, const LoraAdapter& adapter,
                         std::span<const std::size_t> prompt, const TaskMemory& memory, const NamedTensors& params,
                         FisherWeighting weighting) {
  if (memory.empty()) throw PreconditionError("compute_fisher: empty memory");
  std::vector<double> difficulties;
  for (const auto& e : memory.entries) difficulties.push_back(e.difficulty);
  return compute_fisher(
      [&](std::size_t k) {
        return single_sample_loss(model, adapter, prompt, memory.entries[k].image, memory.entries[k].mask);
      },
      memory.entries.size(), difficulties, params, weighting, memory.task);
}

FisherMap compute_fisher(const BiModalSegmenter& model, const LoraAdapter& adapter,
                         std::span<const std::size_t> prompt, std::span<const Sample> samples, TaskId task,
                         const NamedTensors& params) {
  return compute_fisher(
      [&](std::size_t k) { return single_sample_loss(model, adapter, prompt, samples[k].image, samples[k].mask); },
      samples.size(), {}, params, FisherWeighting::kUniform, task);
}

Tensor ewc_penalty(const NamedTensors& live, std::span<const Anchor> anchors, std::span<const FisherMap> fishers) {
  if (anchors.size() != fishers.size()) throw PreconditionError("ewc_penalty: anchors and Fisher maps misaligned");
  std::vector<Tensor> terms;
  for (std::size_t t = 0; t < anchors.size(); ++t) {
    for (const auto& [name, f] : fishers[t].values) {
      const auto live_it = live.find(name);
      if (live_it == live.end()) continue;
      const auto anchor_it = anchors[t].values.find(name);
      if (anchor_it == anchors[t].values.end()) {
        throw PreconditionError("ewc_penalty: no anchor for " + name);
      }
      if (anchor_it->second.shape() != live_it->second.shape() || f.shape() != live_it->second.shape()) {
        throw ShapeError("ewc_penalty: shape mismatch for " + name);
      }
      terms.push_back(reshape(sum(mul(f, square(sub(live_it->second, anchor_it->second)))), {1}));
    }
  }
  if (terms.empty()) return Tensor::scalar(0.0);
  return sum(concat(terms));
}

Anchor snapshot_anchor(const NamedTensors& params, TaskId task) {
  Anchor a;
  a.task = task;
  for (const auto& [name, p] : params) a.values.emplace(name, p.clone());
  return a;
}

}  // namespace clforge
