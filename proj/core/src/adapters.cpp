#include "clforge/adapters.hpp"

#include <algorithm>
#include <cmath>

namespace clforge {

LoraAdapter::LoraAdapter(std::span<const LoraTarget> targets, std::size_t rank, double alpha, Rng& rng)
    : rank_(rank), alpha_(alpha) {
  if (rank == 0) throw PreconditionError("LoRA rank must be positive");
  for (const auto& t : targets) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(t.cols));
    std::vector<double> a(rank * t.cols);
    for (auto& v : a) v = uniform(rng, -bound, bound);
    LoraFactors f{Tensor({rank, t.cols}, std::move(a)), Tensor::zeros({t.rows, rank})};
    factors_.emplace(t.name, std::move(f));
  }
}

LoraAdapter::LoraAdapter(std::size_t rank, double alpha, std::map<ParamId, LoraFactors> factors)
    : rank_(rank), alpha_(alpha), factors_(std::move(factors)) {
  if (rank == 0) throw PreconditionError("LoRA rank must be positive");
  for (const auto& [name, f] : factors_) {
    if (f.a.rank() != 2 || f.b.rank() != 2 || f.a.dim(0) != rank || f.b.dim(1) != rank) {
      throw ShapeError("LoRA factors for " + name + " do not have rank " + std::to_string(rank));
    }
  }
}

LoraAdapter::LoraAdapter(const LoraAdapter& other)
    : owner_tasks(other.owner_tasks), rank_(other.rank_), alpha_(other.alpha_) {
  for (const auto& [name, f] : other.factors_) {
    LoraFactors copy{f.a.clone(), f.b.clone()};
    copy.a.set_requires_grad(f.a.requires_grad());
    copy.b.set_requires_grad(f.b.requires_grad());
    factors_.emplace(name, std::move(copy));
  }
}

LoraAdapter& LoraAdapter::operator=(const LoraAdapter& other) {
  if (this != &other) *this = LoraAdapter(other);
  return *this;
}

const LoraFactors* LoraAdapter::find(const ParamId& target) const {
  const auto it = factors_.find(target);
  return it == factors_.end() ? nullptr : &it->second;
}

Tensor LoraAdapter::delta(const ParamId& target) const {
  const LoraFactors* f = find(target);
  if (f == nullptr) throw ShapeError("adapter has no factors for " + target);
  return scale(matmul(f->b, f->a), scaling());
}

Tensor LoraAdapter::effective(const ParamId& target, const Tensor& base) const {
  const LoraFactors* f = find(target);
  if (f == nullptr) throw ShapeError("adapter has no factors for " + target);
  if (base.rank() != 2 || base.dim(0) != f->b.dim(0) || base.dim(1) != f->a.dim(1)) {
    throw ShapeError("adapter factors for " + target + " do not match weight " + shape_str(base.shape()));
  }
  return add(base, delta(target));
}

NamedTensors LoraAdapter::parameters(const std::string& prefix) const {
  NamedTensors out;
  for (const auto& [name, f] : factors_) {
    out.emplace(prefix + name + ".A", f.a);
    out.emplace(prefix + name + ".B", f.b);
  }
  return out;
}

std::size_t LoraAdapter::element_count() const {
  std::size_t n = 0;
  for (const auto& [name, f] : factors_) n += f.a.numel() + f.b.numel();
  return n;
}

void LoraAdapter::set_trainable(bool on) {
  for (auto& [name, f] : factors_) {
    f.a.set_requires_grad(on);
    f.b.set_requires_grad(on);
  }
}

double cosine_similarity(const PromptEmbedding& a, const PromptEmbedding& b) {
  if (a.vector.size() != b.vector.size()) throw ShapeError("cosine_similarity: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.vector.size(); ++i) {
    dot += a.vector[i] * b.vector[i];
    na += a.vector[i] * a.vector[i];
    nb += b.vector[i] * b.vector[i];
  }
  if (na == 0.0 || nb == 0.0) throw PreconditionError("cosine_similarity of a zero-norm vector");
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

// ---- bank -----------------------------------------------------------------

const LoraAdapter& AdapterBank::adapter(AdapterId id) const {
  const auto it = adapters_.find(id);
  if (it == adapters_.end()) throw PreconditionError("unknown adapter id " + std::to_string(id));
  return it->second;
}

LoraAdapter& AdapterBank::adapter(AdapterId id) {
  const auto it = adapters_.find(id);
  if (it == adapters_.end()) throw PreconditionError("unknown adapter id " + std::to_string(id));
  return it->second;
}

AdapterId AdapterBank::assignment(TaskId task) const {
  const auto it = task_assignment_.find(task);
  if (it == task_assignment_.end()) throw PreconditionError("task " + std::to_string(task) + " has no adapter");
  return it->second;
}

AdapterId AdapterBank::next_adapter_id() const { return adapters_.empty() ? 0 : adapters_.rbegin()->first + 1; }

void AdapterBank::commit(TaskId task, const PromptEmbedding& prompt, const AllocationDecision& decision,
                         std::span<const LoraTarget> targets, std::size_t rank, double alpha, Rng& rng) {
  if (has_task(task)) throw PreconditionError("task " + std::to_string(task) + " already allocated");
  if (decision.reused()) {
    adapter(decision.adapter).owner_tasks.push_back(task);
  } else {
    if (adapters_.count(decision.adapter)) {
      throw PreconditionError("new adapter id " + std::to_string(decision.adapter) + " already exists");
    }
    LoraAdapter fresh(targets, rank, alpha, rng);
    fresh.owner_tasks.push_back(task);
    adapters_.emplace(decision.adapter, std::move(fresh));
  }
  task_assignment_[task] = decision.adapter;
  task_prompts_[task] = prompt;
}

void AdapterBank::restore(std::map<AdapterId, LoraAdapter> adapters, std::map<TaskId, AdapterId> assignment,
                          std::map<TaskId, PromptEmbedding> prompts) {
  for (const auto& [task, id] : assignment) {
    if (!adapters.count(id)) throw FormatError("assignment references missing adapter " + std::to_string(id));
  }
  adapters_ = std::move(adapters);
  task_assignment_ = std::move(assignment);
  task_prompts_ = std::move(prompts);
}

AllocationDecision allocate(const PromptEmbedding& new_prompt, const AdapterBank& bank, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw PreconditionError("similarity threshold must lie in (0, 1)");
  AllocationDecision d;
  for (const auto& [task, prompt] : bank.task_prompts()) {
    const double s = cosine_similarity(new_prompt, prompt);
    d.all_similarities[task] = s;
    // std::map iterates tasks in ascending id, so strict > keeps the lowest id on ties.
    if (!d.most_similar_task || s > d.similarity) {
      d.most_similar_task = task;
      d.similarity = s;
    }
  }
  if (d.most_similar_task && d.similarity > tau) {
    d.kind = AllocationDecision::Kind::kReuse;
    d.adapter = bank.assignment(*d.most_similar_task);
  } else {
    d.kind = AllocationDecision::Kind::kNew;
    d.adapter = bank.next_adapter_id();
  }
  return d;
}

NamedTensors apply(const LoraAdapter& adapter, const BiModalSegmenter& base) {
  NoGradGuard no_grad;
  NamedTensors out;
  for (const auto& [name, f] : adapter.factors()) {
    const auto it = base.parameters().find(name);
    if (it == base.parameters().end()) throw ShapeError("model has no target matrix " + name);
    out.emplace(name, adapter.effective(name, it->second));
  }
  return out;
}

std::size_t lora_element_formula(std::span<const LoraTarget> targets, std::size_t rank) {
  std::size_t n = 0;
  for (const auto& t : targets) n += rank * (t.rows + t.cols);
  return n;
}

TrainableCount trainable_count(const LoraAdapter& active, const BiModalSegmenter& model) {
  TrainableCount c;
  c.adapter_elements = active.element_count();
  for (const auto& [name, t] : model.shared_parameters()) c.shared_elements += t.numel();
  c.trainable = c.adapter_elements + c.shared_elements;
  c.total = model.parameter_count() + c.adapter_elements;
  c.fraction = static_cast<double>(c.trainable) / static_cast<double>(c.total);
  return c;
}

}  // namespace clforge
