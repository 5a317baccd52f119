#include "clforge/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "clforge/losses.hpp"
#include "clforge/optimizer.hpp"

namespace clforge {

// ---- modes ----------------------------------------------------------------

std::string to_string(Mode mode) {
  switch (mode) {
    case Mode::kSequential: return "sequential";
    case Mode::kEwc: return "ewc";
    case Mode::kReplay: return "replay";
    case Mode::kFisher: return "fisher";
    case Mode::kBidirectional: return "bidirectional";
    case Mode::kFull: return "full";
  }
  return "?";
}

Mode parse_mode(const std::string& name) {
  for (Mode m : {Mode::kSequential, Mode::kEwc, Mode::kReplay, Mode::kFisher, Mode::kBidirectional, Mode::kFull}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("mode", "unknown mode '" + name + "'");
}

std::vector<Mode> ablation_ladder() {
  return {Mode::kSequential, Mode::kEwc, Mode::kReplay, Mode::kFisher, Mode::kBidirectional};
}

ModeFeatures features(Mode mode) {
  ModeFeatures f;
  switch (mode) {
    case Mode::kSequential:
      break;
    case Mode::kEwc:
      f.ewc = true;
      f.fisher = FisherSource::kTrainSetUniform;
      break;
    case Mode::kReplay:
      f.ewc = f.replay = true;
      f.fisher = FisherSource::kTrainSetUniform;
      break;
    case Mode::kFisher:
      f.ewc = f.replay = f.fisher_boost = true;
      f.fisher = FisherSource::kTrainSetUniform;
      break;
    case Mode::kBidirectional:
    case Mode::kFull:
      f.similarity_allocation = f.ewc = f.replay = f.fisher_boost = true;
      f.fisher = FisherSource::kBufferDifficulty;
      f.within = WithinTaskSampling::kDifficulty;
      break;
  }
  return f;
}

// ---- config ---------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr", "must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay", "must be non-negative");
  if (batch_size == 0) throw ConfigError("batch_size", "must be at least 1");
  if (max_epochs == 0) throw ConfigError("max_epochs", "must be at least 1");
  if (!(r_replay >= 0.0 && r_replay < 1.0)) throw ConfigError("r_replay", "must lie in [0, 1)");
  if (!(lambda_ewc >= 0.0)) throw ConfigError("lambda_ewc", "must be non-negative");
  if (lora_rank == 0) throw ConfigError("lora_rank", "must be at least 1");
  if (!(lora_alpha > 0.0)) throw ConfigError("lora_alpha", "must be positive");
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("tau", "must lie in (0, 1)");
  if (!(r_memory > 0.0 && r_memory < 1.0)) throw ConfigError("r_memory", "must lie in (0, 1)");
  if (!(boost_alpha >= 0.0)) throw ConfigError("boost_alpha", "must be non-negative");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"early_stop_patience", c.early_stop_patience},
          {"r_replay", c.r_replay},
          {"lambda_ewc", c.lambda_ewc},
          {"lora_rank", c.lora_rank},
          {"lora_alpha", c.lora_alpha},
          {"tau", c.tau},
          {"r_memory", c.r_memory},
          {"boost_alpha", c.boost_alpha},
          {"force_shared_adapter", c.force_shared_adapter},
          {"seed", c.seed}};
}

namespace {

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(key, "has the wrong type");
  }
}

}  // namespace

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  if (!j.is_object()) throw ConfigError("train", "must be an object");
  read_field(j, "lr", c.lr);
  read_field(j, "weight_decay", c.weight_decay);
  read_field(j, "batch_size", c.batch_size);
  read_field(j, "max_epochs", c.max_epochs);
  read_field(j, "early_stop_patience", c.early_stop_patience);
  read_field(j, "r_replay", c.r_replay);
  read_field(j, "lambda_ewc", c.lambda_ewc);
  read_field(j, "lora_rank", c.lora_rank);
  read_field(j, "lora_alpha", c.lora_alpha);
  read_field(j, "tau", c.tau);
  read_field(j, "r_memory", c.r_memory);
  read_field(j, "boost_alpha", c.boost_alpha);
  read_field(j, "force_shared_adapter", c.force_shared_adapter);
  read_field(j, "seed", c.seed);
  c.validate();
  return c;
}

// ---- logs -----------------------------------------------------------------

nlohmann::json to_json(const AllocationLog& a) {
  nlohmann::json j{{"task", a.task}, {"kind", a.kind}, {"adapter", a.adapter}, {"similarity", a.similarity}};
  j["k_star"] = a.k_star ? nlohmann::json(*a.k_star) : nlohmann::json(nullptr);
  return j;
}

std::string epoch_log_csv(const std::vector<EpochLog>& logs) {
  std::ostringstream os;
  os.precision(17);
  os << "task,epoch,seg_loss,dice_loss,ewc_penalty,val_dice,replay_histogram\n";
  for (const auto& e : logs) {
    os << e.task << ',' << e.epoch << ',' << e.seg_loss << ',' << e.dice_loss << ',' << e.ewc_penalty << ','
       << e.val_dice << ',';
    bool first = true;
    for (const auto& [task, count] : e.replay_histogram) {
      os << (first ? "" : ";") << task << ':' << count;
      first = false;
    }
    os << '\n';
  }
  return os.str();
}

void InvariantMonitor::expect(bool ok, const std::string& what) {
  ++checks;
  if (!ok) violations.push_back(what);
}

// ---- batches and losses ---------------------------------------------------

ContinualState make_state(BiModalSegmenter pretrained, Mode mode, const TrainConfig& config) {
  config.validate();
  ContinualState s(std::move(pretrained));
  s.model.freeze_base();
  s.mode = mode;
  s.config = config;
  return s;
}

std::size_t replay_count(std::size_t batch_size, double r_replay, bool have_memories) {
  if (!have_memories) return 0;
  return static_cast<std::size_t>(std::llround(static_cast<double>(batch_size) * r_replay));
}

std::vector<BatchItem> make_batch(std::span<const Sample> current, TaskId current_task,
                                  std::span<const TaskMemory> memories, std::size_t batch_size, double r_replay,
                                  Rng& rng, WithinTaskSampling within) {
  if (current.empty()) throw PreconditionError("make_batch: empty current-task pool");
  const bool have = std::any_of(memories.begin(), memories.end(), [](const auto& m) { return !m.empty(); });
  const std::size_t n_replay = replay_count(batch_size, r_replay, have);
  const std::size_t n_current = std::min(current.size(), batch_size - n_replay);
  std::vector<BatchItem> batch;
  batch.reserve(n_current + n_replay);
  for (std::size_t i = 0; i < n_current; ++i) batch.push_back({current[i].image, current[i].mask, current_task, false});
  for (auto& e : sample_replay(memories, n_replay, rng, within)) batch.push_back({e.image, e.mask, e.task, true});
  return batch;
}

namespace {

std::string adapter_prefix(AdapterId id) { return "adapter" + std::to_string(id) + "."; }

struct Route {
  const LoraAdapter* adapter;
  std::span<const std::size_t> tokens;
};

Route route_for(const ContinualState& state, TaskId task, const TaskRecord& current,
                const LoraAdapter& current_adapter) {
  if (static_cast<std::size_t>(task) == state.current()) return {&current_adapter, current.tokens};
  return {&state.bank.adapter_for_task(task), state.tasks.at(static_cast<std::size_t>(task)).tokens};
}

Tensor stack_patches(std::span<const BatchItem> batch, std::span<const std::size_t> idx, bool masks,
                     const ModelConfig& cfg) {
  std::vector<Tensor> parts;
  parts.reserve(idx.size());
  for (std::size_t i : idx) parts.push_back(to_patches(masks ? batch[i].mask : batch[i].image, cfg));
  return parts.size() == 1 ? parts.front() : concat(parts);
}

}  // namespace

LossParts total_loss(const ContinualState& state, std::span<const BatchItem> batch, const TaskRecord& current,
                     const LoraAdapter& current_adapter, const NamedTensors& active, bool with_ewc) {
  if (batch.empty()) throw PreconditionError("total_loss: empty batch");
  const auto& cfg = state.model.config();
  std::map<TaskId, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < batch.size(); ++i) groups[batch[i].task].push_back(i);

  std::vector<Tensor> per_sample;
  LossParts parts;
  for (const auto& [task, idx] : groups) {
    const Route r = route_for(state, task, current, current_adapter);
    const Tensor logits = state.model.forward_patches(stack_patches(batch, idx, false, cfg), r.tokens, r.adapter);
    const Tensor masks = stack_patches(batch, idx, true, cfg);
    const Tensor seg = seg_loss_per_sample(logits, masks, idx.size());
    const Tensor dl = dice_loss_per_sample(logits, masks, idx.size());
    for (double v : seg.data()) parts.seg += v;
    for (double v : dl.data()) parts.dice += v;
    per_sample.push_back(add(seg, dl));
  }
  const double n = static_cast<double>(batch.size());
  parts.seg /= n;
  parts.dice /= n;
  parts.total = scale(sum(per_sample.size() == 1 ? per_sample.front() : concat(per_sample)), 1.0 / n);
  if (with_ewc && !state.anchors.empty() && state.config.lambda_ewc > 0.0) {
    const Tensor pen = ewc_penalty(active, state.anchors, state.fishers);
    parts.ewc = pen.item();
    parts.total = add(parts.total, scale(pen, state.config.lambda_ewc));
  }
  return parts;
}

double evaluate_dice(const BiModalSegmenter& model, const LoraAdapter* adapter, std::span<const std::size_t> prompt,
                     std::span<const Sample> samples) {
  if (samples.empty()) throw PreconditionError("evaluate_dice: no samples");
  NoGradGuard no_grad;
  const auto& cfg = model.config();
  std::vector<Tensor> images;
  images.reserve(samples.size());
  for (const auto& s : samples) images.push_back(to_patches(s.image, cfg));
  const Tensor logits = model.forward_patches(concat(images), prompt, adapter);
  const std::size_t per = cfg.pixels();
  double total = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto pred = binarize(logits.data().subspan(i * per, per));
    const Tensor mask = to_patches(samples[i].mask, cfg);
    total += dice(pred, mask.data());
  }
  return total / static_cast<double>(samples.size());
}

// ---- training -------------------------------------------------------------

namespace {

NamedTensors clone_all(const NamedTensors& params) {
  NamedTensors out;
  for (const auto& [name, t] : params) out.emplace(name, t.clone());
  return out;
}

bool all_equal(const NamedTensors& live, const NamedTensors& snapshot) {
  for (const auto& [name, t] : snapshot) {
    const auto it = live.find(name);
    if (it == live.end() || !it->second.same_values(t)) return false;
  }
  return true;
}

void copy_values(NamedTensors& dst, const NamedTensors& src) {
  for (auto& [name, t] : dst) {
    const auto s = src.at(name).data();
    std::copy(s.begin(), s.end(), t.mutable_data().begin());
  }
}

NamedTensors other_adapter_parameters(const AdapterBank& bank, AdapterId active) {
  NamedTensors out;
  for (const auto& [id, a] : bank.adapters()) {
    if (id == active) continue;
    auto p = a.parameters(adapter_prefix(id));
    out.insert(p.begin(), p.end());
  }
  return out;
}

AllocationDecision decide(const ContinualState& state, const PromptEmbedding& prompt, const ModeFeatures& f,
                          std::string& kind) {
  AllocationDecision d = allocate(prompt, state.bank, state.config.tau);
  if (f.similarity_allocation && !state.config.force_shared_adapter) {
    kind = d.reused() ? "reuse" : "new";
    return d;
  }
  // One adapter for the whole sequence.
  if (state.bank.adapters().empty()) {
    d.kind = AllocationDecision::Kind::kNew;
    d.adapter = 0;
    kind = "new";
  } else {
    d.kind = AllocationDecision::Kind::kReuse;
    d.adapter = state.bank.adapters().begin()->first;
    kind = "shared";
  }
  return d;
}

void check_locality(ContinualState& state, const LoraAdapter& active, const Sample& probe, const TaskRecord& rec) {
  const Tensor first = state.model.forward(probe.image, rec.tokens, &active);
  const LoraAdapter* other = nullptr;
  for (const auto& [id, a] : state.bank.adapters()) {
    if (&a != &active) {
      other = &a;
      break;
    }
  }
  state.model.forward(probe.image, rec.tokens, other);
  const Tensor again = state.model.forward(probe.image, rec.tokens, &active);
  state.monitor.expect(first.same_values(again), "adapter locality: forward output changed after using another adapter");
}

}  // namespace

void train_task(ContinualState& state, TaskData data) {
  const TrainConfig& cfg = state.config;
  const ModeFeatures f = features(state.mode);
  const auto t = static_cast<TaskId>(state.current());
  if (data.train.empty() || data.val.empty() || data.test.empty()) {
    throw PreconditionError("task " + data.spec.name + " has an empty split");
  }
  if (!state.model.base_frozen()) throw PreconditionError("train_task: base weights must be frozen");

  TaskRecord rec;
  rec.spec = data.spec;
  rec.tokens = Vocabulary::standard().tokenize(data.spec.prompt);
  rec.prompt = state.model.embed_text(data.spec.prompt);

  // (1) adapter allocation
  std::string kind;
  const AllocationDecision decision = decide(state, rec.prompt, f, kind);
  {
    Rng init_rng = make_rng(cfg.seed, Stream::kAdapterInit, static_cast<std::uint64_t>(t));
    const auto targets = state.model.lora_targets();
    state.bank.commit(t, rec.prompt, decision, targets, cfg.lora_rank, cfg.lora_alpha, init_rng);
  }
  rec.adapter = decision.adapter;
  state.allocations.push_back({t, kind, decision.adapter, decision.most_similar_task, decision.similarity});

  LoraAdapter& adapter = state.bank.adapter(rec.adapter);
  for (const auto& [id, a] : state.bank.adapters()) state.bank.adapter(id).set_trainable(id == rec.adapter);
  NamedTensors active = adapter.parameters(adapter_prefix(rec.adapter));
  for (const auto& [name, p] : state.model.shared_parameters()) active.emplace(name, p);
  state.trainable.push_back(trainable_count(adapter, state.model));

  const NamedTensors base_snapshot = clone_all(state.model.base_parameters());
  const NamedTensors others_live = other_adapter_parameters(state.bank, rec.adapter);
  const NamedTensors others_snapshot = clone_all(others_live);

  // (2) epochs over mixed batches
  const bool replay_on = f.replay && !state.memories.empty();
  const double r_replay = replay_on ? cfg.r_replay : 0.0;
  const std::size_t n_replay = replay_count(cfg.batch_size, r_replay, replay_on);
  const std::size_t n_current = cfg.batch_size - n_replay;
  if (n_current == 0) throw ConfigError("r_replay", "leaves no room for current-task samples");
  const std::span<const TaskMemory> memories = replay_on ? std::span<const TaskMemory>(state.memories)
                                                         : std::span<const TaskMemory>();

  Rng shuffle_rng = make_rng(cfg.seed, Stream::kShuffle, static_cast<std::uint64_t>(t));
  Rng replay_rng = make_rng(cfg.seed, Stream::kReplay, static_cast<std::uint64_t>(t));
  AdamW opt(active, {cfg.lr, cfg.weight_decay});

  double best_val = -1.0;
  NamedTensors best = clone_all(active);
  std::size_t since_best = 0;
  std::vector<std::size_t> order(data.train.size());
  std::vector<Sample> chunk;

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(shuffle_rng, i)]);

    EpochLog log;
    log.task = t;
    log.epoch = epoch;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += n_current) {
      chunk.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + n_current); ++i) chunk.push_back(data.train[order[i]]);
      const auto batch = make_batch(chunk, t, memories, cfg.batch_size, r_replay, replay_rng, f.within);
      for (const auto& item : batch) {
        if (!item.replay) continue;
        ++log.replay_histogram[item.task];
        const auto& owners = state.bank.adapter_for_task(item.task).owner_tasks;
        state.monitor.expect(item.task < t && std::find(owners.begin(), owners.end(), item.task) != owners.end(),
                             "replay routing: sample of task " + std::to_string(item.task) +
                                 " not served by its own adapter");
      }

      const LossParts parts = total_loss(state, batch, rec, adapter, active, f.ewc);
      if (!std::isfinite(parts.total.item())) {
        throw NumericError("training diverged on task " + data.spec.name + " (non-finite loss)");
      }
      backward(parts.total);
      opt.step();
      log.seg_loss += parts.seg;
      log.dice_loss += parts.dice;
      log.ewc_penalty += parts.ewc;
      ++steps;

      state.monitor.expect(all_equal(state.model.parameters(), base_snapshot),
                           "base freeze: a base weight changed during task " + data.spec.name);
      state.monitor.expect(all_equal(others_live, others_snapshot),
                           "adapter isolation: an inactive adapter changed during task " + data.spec.name);
    }
    log.seg_loss /= static_cast<double>(steps);
    log.dice_loss /= static_cast<double>(steps);
    log.ewc_penalty /= static_cast<double>(steps);
    log.val_dice = evaluate_dice(state.model, &adapter, rec.tokens, data.val);
    state.epoch_log.push_back(log);

    if (log.val_dice > best_val) {
      best_val = log.val_dice;
      best = clone_all(active);
      since_best = 0;
    } else if (++since_best >= cfg.early_stop_patience) {
      break;
    }
  }
  copy_values(active, best);
  opt.zero_grad();

  // (3) consolidation
  TaskMemory memory;
  memory.task = t;
  if (f.replay) {
    const auto scores = score_difficulties(state.model, &adapter, rec.tokens, data.train);
    memory = build_buffer(t, data.train, scores, cfg.r_memory);
  }
  if (f.ewc) {
    FisherMap fisher = f.fisher == FisherSource::kBufferDifficulty
                           ? compute_fisher(state.model, adapter, rec.tokens, memory, active)
                           : compute_fisher(state.model, adapter, rec.tokens, data.train, t, active);
    memory.fisher_avg = average_fisher(fisher);
    state.fishers.push_back(std::move(fisher));
    state.anchors.push_back(snapshot_anchor(active, t));
  }
  state.memories.push_back(std::move(memory));
  const std::size_t t_now = state.memories.size();
  for (std::size_t i = 0; i < t_now; ++i) {
    auto& m = state.memories[i];
    m.replay_weight = replay_weight(i, t_now, m.fisher_avg, f.fisher_boost ? cfg.boost_alpha : 0.0);
  }

  check_locality(state, adapter, data.test.front(), rec);
  state.monitor.expect(all_equal(state.model.parameters(), base_snapshot),
                       "base freeze: a base weight changed during consolidation of " + data.spec.name);
  adapter.set_trainable(false);

  state.tasks.push_back(std::move(rec));
  state.data.push_back(std::move(data));

  // (4) evaluation of every seen task
  std::vector<double> row;
  for (std::size_t i = 0; i < state.tasks.size(); ++i) {
    const auto& r = state.tasks[i];
    row.push_back(evaluate_dice(state.model, &state.bank.adapter(r.adapter), r.tokens, state.data[i].test));
  }
  std::vector<std::string> names;
  for (const auto& r : state.tasks) names.push_back(r.spec.name);
  ResultsMatrix updated(names);
  for (std::size_t s = 0; s < state.results.stages(); ++s) updated.record_stage(state.results.row(s));
  updated.record_stage(std::move(row));
  state.results = std::move(updated);
}

RunResult run_sequence(const BiModalSegmenter& pretrained, const std::vector<TaskSpec>& specs,
                       const TrainConfig& config, Mode mode, const TaskHook& after_task) {
  if (specs.size() < 2) throw PreconditionError("run_sequence needs at least two tasks");
  const auto start = std::chrono::steady_clock::now();
  RunResult run{make_state(pretrained, mode, config)};
  for (const auto& spec : specs) {
    train_task(run.state, generate(spec));
    if (after_task) after_task(run.state);
  }
  run.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return run;
}

nlohmann::json run_info(const RunResult& run, const std::string& suite) {
  const auto& s = run.state;
  nlohmann::json info;
  info["version"] = kReportSchemaVersion;
  info["mode"] = to_string(s.mode);
  info["seed"] = s.config.seed;
  info["suite"] = suite;
  info["config"] = to_json(s.config);
  nlohmann::json trainable = nlohmann::json::array();
  for (std::size_t i = 0; i < s.trainable.size(); ++i) {
    const auto& c = s.trainable[i];
    trainable.push_back({{"task", i},
                         {"adapter_elements", c.adapter_elements},
                         {"shared_elements", c.shared_elements},
                         {"trainable", c.trainable},
                         {"total", c.total},
                         {"fraction", c.fraction}});
  }
  info["trainable"] = trainable;
  nlohmann::json allocations = nlohmann::json::array();
  for (const auto& a : s.allocations) allocations.push_back(to_json(a));
  info["allocations"] = allocations;
  nlohmann::json fisher = nlohmann::json::array();
  for (const auto& m : s.memories) fisher.push_back(m.fisher_avg);
  info["fisher_avg"] = fisher;
  info["wall_clock_seconds"] = run.wall_clock_seconds;
  info["invariant_checks"] = s.monitor.checks;
  info["invariant_violations"] = s.monitor.violations.size();
  return info;
}

}  // namespace clforge
