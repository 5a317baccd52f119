#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"

#include "clforge/losses.hpp"
#include "clforge/trainer.hpp"

using namespace clforge;

namespace {

const BiModalSegmenter& base() {
  static const BiModalSegmenter m = BiModalSegmenter::initialize({}, 5);
  return m;
}

std::vector<TaskSpec> small_suite(std::size_t n_tasks = 2) {
  auto specs = default_suite("mixed", 43);
  specs.resize(n_tasks);
  for (auto& s : specs) {
    s.n_train = 20;
    s.n_val = 6;
    s.n_test = 6;
  }
  return specs;
}

TrainConfig small_config() {
  TrainConfig c;
  c.batch_size = 10;
  c.max_epochs = 3;
  c.early_stop_patience = 2;
  c.lr = 3e-3;
  return c;
}

double sigmoid_oracle(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Per-sample seg + dice from the raw image-order logits.
double sample_loss_oracle(const Tensor& logits, const Tensor& mask) {
  double bce = 0.0, pg = 0.0, ps = 0.0, gs = 0.0;
  const auto z = logits.data();
  const auto g = mask.data();
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double p = sigmoid_oracle(z[i]);
    bce += -(g[i] * std::log(p) + (1 - g[i]) * std::log(1 - p));
    pg += p * g[i];
    ps += p;
    gs += g[i];
  }
  return bce / static_cast<double>(z.size()) + 1.0 - (2 * pg + 1.0) / (ps + gs + 1.0);
}

TaskRecord record_for(const ContinualState& s, const TaskSpec& spec) {
  TaskRecord r;
  r.spec = spec;
  r.tokens = Vocabulary::standard().tokenize(spec.prompt);
  r.prompt = s.model.embed_text(spec.prompt);
  return r;
}

}  // namespace

TEST_CASE("replay count rounds to nearest") {
  CHECK(replay_count(10, 0.4, true) == 4);
  CHECK(replay_count(16, 0.4, true) == 6);
  CHECK(replay_count(16, 0.4, false) == 0);
  CHECK(replay_count(16, 0.0, true) == 0);
}

TEST_CASE("batch composition") {
  const auto data = generate(small_suite().front());
  std::vector<TaskMemory> mems(1);
  mems[0].task = 0;
  mems[0].replay_weight = 1.0;
  mems[0].entries.push_back({data.val[0].image, data.val[0].mask, 0, 0.4, 0});
  Rng rng(1);

  const auto mixed = make_batch(data.train, 1, mems, 10, 0.4, rng);
  CHECK(std::count_if(mixed.begin(), mixed.end(), [](const auto& b) { return !b.replay; }) == 6);
  CHECK(std::count_if(mixed.begin(), mixed.end(), [](const auto& b) { return b.replay && b.task == 0; }) == 4);
  for (std::size_t i = 0; i < 6; ++i) CHECK(mixed[i].image.same_values(data.train[i].image));

  const auto no_memory = make_batch(data.train, 1, {}, 10, 0.4, rng);
  CHECK(no_memory.size() == 10);
  CHECK(std::none_of(no_memory.begin(), no_memory.end(), [](const auto& b) { return b.replay; }));

  const auto no_replay = make_batch(data.train, 1, mems, 10, 0.0, rng);
  CHECK(std::none_of(no_replay.begin(), no_replay.end(), [](const auto& b) { return b.replay; }));

  CHECK_THROWS_AS(make_batch({}, 1, mems, 10, 0.4, rng), PreconditionError);
}

TEST_CASE("first-task loss is the batch mean of seg + dice with no EWC term") {
  auto state = make_state(base(), Mode::kFull, small_config());
  const auto spec = small_suite().front();
  const auto data = generate(spec);
  const TaskRecord rec = record_for(state, spec);
  Rng rng(2);
  const auto targets = state.model.lora_targets();
  LoraAdapter adapter(targets, 8, 16.0, rng);
  for (auto& [name, f] : adapter.factors()) {
    for (auto& v : const_cast<Tensor&>(f.b).mutable_data()) v = 0.05 * normal(rng);
  }
  const auto batch = make_batch(data.train, 0, {}, 10, 0.4, rng);
  const LossParts parts = total_loss(state, batch, rec, adapter, {}, true);
  double want = 0.0;
  for (const auto& item : batch) want += sample_loss_oracle(state.model.forward(item.image, rec.tokens, &adapter), item.mask);
  want /= static_cast<double>(batch.size());
  CHECK(parts.total.item() == doctest::Approx(want).epsilon(1e-10));
  CHECK(parts.seg + parts.dice == doctest::Approx(want).epsilon(1e-10));
  CHECK(parts.ewc == 0.0);
}

TEST_CASE("with one past task the loss adds lambda times the hand-computed penalty") {
  auto state = make_state(base(), Mode::kFull, small_config());
  const auto specs = small_suite();
  train_task(state, generate(specs[0]));
  REQUIRE(state.anchors.size() == 1);

  // Continue on task 0's adapter with the shared head nudged off its anchor.
  const TaskRecord rec = record_for(state, specs[1]);
  const AdapterId id = state.tasks[0].adapter;
  LoraAdapter& adapter = state.bank.adapter(id);
  NamedTensors active = adapter.parameters("adapter" + std::to_string(id) + ".");
  for (const auto& [name, p] : state.model.shared_parameters()) active.emplace(name, p);
  auto bias = state.model.parameters().at("decoder.bias").mutable_data();
  for (double& v : bias) v += 0.01;

  double penalty = 0.0;
  const auto& f = state.fishers[0].values.at("decoder.bias");
  for (std::size_t i = 0; i < f.numel(); ++i) penalty += f[i] * 0.01 * 0.01;

  const auto data = generate(specs[1]);
  Rng rng(3);
  const auto batch = make_batch(data.train, 1, state.memories, 10, 0.4, rng);
  const LossParts with = total_loss(state, batch, rec, adapter, active, true);
  const LossParts without = total_loss(state, batch, rec, adapter, active, false);
  CHECK(with.ewc == doctest::Approx(penalty).epsilon(1e-9));
  CHECK(with.total.item() == doctest::Approx(without.total.item() + 500.0 * penalty).epsilon(1e-10));
  CHECK(without.ewc == 0.0);
}

TEST_CASE("lambda = 0 reduces the loss to seg + dice") {
  auto cfg = small_config();
  cfg.lambda_ewc = 0.0;
  auto state = make_state(base(), Mode::kEwc, cfg);
  const auto specs = small_suite();
  train_task(state, generate(specs[0]));
  const TaskRecord rec = record_for(state, specs[1]);
  LoraAdapter& adapter = state.bank.adapter(state.tasks[0].adapter);
  NamedTensors active = state.model.shared_parameters();
  for (double& v : state.model.parameters().at("decoder.bias").mutable_data()) v += 0.1;
  const auto data = generate(specs[1]);
  Rng rng(4);
  const auto batch = make_batch(data.train, 1, {}, 10, 0.0, rng);
  const LossParts parts = total_loss(state, batch, rec, adapter, active, true);
  CHECK(parts.ewc == 0.0);
  CHECK(parts.total.item() == doctest::Approx(parts.seg + parts.dice).epsilon(1e-12));
}

TEST_CASE("training keeps the base frozen and books one entry per task") {
  const auto specs = small_suite(3);
  std::size_t seen = 0;
  const auto run = run_sequence(base(), specs, small_config(), Mode::kFull, [&](const ContinualState& s) {
    ++seen;
    CHECK(s.memories.size() == seen);
    CHECK(s.fishers.size() == seen);
    CHECK(s.anchors.size() == seen);
    CHECK(s.results.stages() == seen);
    CHECK(s.allocations.size() == seen);
  });
  const auto& s = run.state;
  for (const auto& [name, t] : base().base_parameters()) CHECK(s.model.parameter(name).same_values(t));
  CHECK(s.monitor.clean());
  CHECK(s.monitor.checks > 0);
  for (const auto& m : s.memories) CHECK(m.entries.size() == buffer_capacity(20, kDefaultMemoryRatio));
  for (const auto& a : s.allocations) CHECK((a.kind == "new" || a.kind == "reuse"));
}

TEST_CASE("sequential mode shares one adapter and keeps no buffers or Fisher") {
  const auto run = run_sequence(base(), small_suite(3), small_config(), Mode::kSequential);
  const auto& s = run.state;
  CHECK(s.bank.adapters().size() == 1);
  CHECK(s.fishers.empty());
  CHECK(s.anchors.empty());
  for (const auto& m : s.memories) CHECK(m.empty());
  CHECK(s.allocations[1].kind == "shared");
}

TEST_CASE("final task weights are the best-validation weights") {
  const auto run = run_sequence(base(), small_suite(), small_config(), Mode::kFull);
  const auto& s = run.state;
  // Later tasks keep training the shared head, so only the last task is pinned.
  const std::size_t t = s.tasks.size() - 1;
  double best = -1.0;
  for (const auto& e : s.epoch_log) {
    if (e.task == static_cast<TaskId>(t)) best = std::max(best, e.val_dice);
  }
  CHECK(evaluate_dice(s.model, &s.bank.adapter(s.tasks[t].adapter), s.tasks[t].tokens, s.data[t].val) == best);
}

TEST_CASE("identical seeds give identical results") {
  const auto a = run_sequence(base(), small_suite(), small_config(), Mode::kFull);
  const auto b = run_sequence(base(), small_suite(), small_config(), Mode::kFull);
  CHECK(a.state.results == b.state.results);
  CHECK(epoch_log_csv(a.state.epoch_log) == epoch_log_csv(b.state.epoch_log));
}

TEST_CASE("full mode collapses to sequential without replay, EWC or allocation") {
  auto cfg = small_config();
  cfg.r_replay = 0.0;
  cfg.lambda_ewc = 0.0;
  cfg.force_shared_adapter = true;
  const auto full = run_sequence(base(), small_suite(3), cfg, Mode::kFull);
  const auto seq = run_sequence(base(), small_suite(3), cfg, Mode::kSequential);
  CHECK(full.state.results == seq.state.results);
  CHECK(epoch_log_csv(full.state.epoch_log) == epoch_log_csv(seq.state.epoch_log));
}

TEST_CASE("a vanishing learning rate freezes every score") {
  auto cfg = small_config();
  cfg.lr = 1e-300;  // steps fall below the spacing of every nonzero weight
  const auto run = run_sequence(base(), small_suite(3), cfg, Mode::kSequential);
  const auto& m = run.state.results;
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t s = t + 1; s < 3; ++s) CHECK(m.at(s, t) == m.at(t, t));
  CHECK(forgetting_rate(m).average == 0.0);
}

TEST_CASE("run_sequence preconditions") {
  CHECK_THROWS_AS(run_sequence(base(), small_suite(1), small_config(), Mode::kFull), PreconditionError);
  CHECK_THROWS_AS(parse_mode("magic"), ConfigError);
  auto bad = small_config();
  bad.tau = 1.5;
  CHECK_THROWS_AS(run_sequence(base(), small_suite(), bad, Mode::kFull), ConfigError);
  auto unfrozen = make_state(base(), Mode::kFull, small_config());
  unfrozen.model.set_all_trainable();
  CHECK_THROWS_AS(train_task(unfrozen, generate(small_suite().front())), PreconditionError);
}

TEST_CASE("mode names round-trip and the ladder has five rungs") {
  for (Mode m : {Mode::kSequential, Mode::kEwc, Mode::kReplay, Mode::kFisher, Mode::kBidirectional, Mode::kFull}) {
    CHECK(parse_mode(to_string(m)) == m);
  }
  CHECK(ablation_ladder().size() == 5);
  CHECK(features(Mode::kSequential).replay == false);
  CHECK(features(Mode::kEwc).ewc);
  CHECK_FALSE(features(Mode::kEwc).replay);
  CHECK(features(Mode::kFisher).fisher_boost);
  CHECK_FALSE(features(Mode::kFisher).similarity_allocation);
  CHECK(features(Mode::kFull).fisher == FisherSource::kBufferDifficulty);
}

TEST_CASE("train config JSON names the bad field") {
  try {
    train_config_from_json({{"r_replay", 1.5}});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("r_replay") != std::string::npos);
  }
  CHECK_THROWS_AS(train_config_from_json({{"lr", "fast"}}), ConfigError);
  const auto c = train_config_from_json({{"lambda_ewc", 10.0}});
  CHECK(c.lambda_ewc == 10.0);
  CHECK(c.batch_size == TrainConfig{}.batch_size);
  CHECK(train_config_from_json(to_json(small_config())).batch_size == 10);
}
