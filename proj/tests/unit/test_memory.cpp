#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <vector>

#include "doctest.h"

#include "clforge/consolidation.hpp"
#include "clforge/losses.hpp"
#include "clforge/memory.hpp"
#include "clforge/model.hpp"
#include "clforge/rng.hpp"

using namespace clforge;

namespace {

Sample sample_with(Rng& rng) {
  std::vector<double> img(1024), mask(1024);
  for (std::size_t i = 0; i < 1024; ++i) {
    img[i] = uniform01(rng);
    mask[i] = uniform01(rng) < 0.3 ? 1.0 : 0.0;
  }
  return Sample{Tensor({32, 32}, img), Tensor({32, 32}, mask), "t", std::nullopt, {}};
}

TaskMemory memory_of(TaskId task, std::vector<double> difficulties) {
  TaskMemory m;
  m.task = task;
  for (std::size_t k = 0; k < difficulties.size(); ++k) {
    m.entries.push_back({Tensor::scalar(double(k)), Tensor::scalar(0.0), task, difficulties[k], k});
  }
  return m;
}

// Independent BCE in the plain textbook form, for moderate logits.
double bce_oracle(const std::vector<double>& z, const std::vector<double>& g) {
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-z[i]));
    s += -(g[i] * std::log(p) + (1 - g[i]) * std::log(1 - p));
  }
  return s / static_cast<double>(z.size());
}

}  // namespace

TEST_CASE("pixel cross-entropy closed forms") {
  const std::vector<double> zero(16, 0.0), ones(16, 1.0), halfmask{1, 0, 1, 0};
  CHECK(pixel_cross_entropy(zero, ones) == doctest::Approx(std::numbers::ln2).epsilon(1e-15));
  CHECK(pixel_cross_entropy(std::vector<double>{0, 0, 0, 0}, halfmask) ==
        doctest::Approx(std::numbers::ln2).epsilon(1e-15));
  // Confident and right: near zero. Confident and wrong: bounded by the log floor.
  CHECK(pixel_cross_entropy(std::vector<double>{40, -40}, std::vector<double>{1, 0}) < 1e-15);
  CHECK(pixel_cross_entropy(std::vector<double>{40}, std::vector<double>{0}) ==
        doctest::Approx(-std::log(kLogFloor)));
  CHECK_THROWS_AS(pixel_cross_entropy(std::vector<double>{0}, std::vector<double>{0, 1}), ShapeError);
}

TEST_CASE("difficulty equals the pixel BCE of the model output") {
  const auto model = BiModalSegmenter::initialize({}, 2);
  const auto prompt = Vocabulary::standard().tokenize("one round disc");
  Rng rng(3);
  std::vector<Sample> samples;
  for (int k = 0; k < 20; ++k) samples.push_back(sample_with(rng));
  const auto batched = score_difficulties(model, nullptr, prompt, samples);
  REQUIRE(batched.size() == 20);
  for (std::size_t k = 0; k < samples.size(); ++k) {
    const Tensor z = model.forward(samples[k].image, prompt);
    const std::vector<double> zv(z.data().begin(), z.data().end());
    const std::vector<double> gv(samples[k].mask.data().begin(), samples[k].mask.data().end());
    CHECK(score_difficulty(model, nullptr, prompt, samples[k]) == doctest::Approx(bce_oracle(zv, gv)).epsilon(1e-10));
    CHECK(batched[k] == doctest::Approx(bce_oracle(zv, gv)).epsilon(1e-10));
  }
}

TEST_CASE("buffer capacity") {
  CHECK(buffer_capacity(100, 0.15) == 15);
  CHECK(buffer_capacity(5, 0.15) == 1);
  CHECK(buffer_capacity(200, 0.15) == 30);
  CHECK(buffer_capacity(10, 1.0) == 10);
}

TEST_CASE("buffer keeps the hardest samples in descending order") {
  Rng rng(4);
  std::vector<Sample> data;
  std::vector<double> scores;
  for (int k = 0; k < 40; ++k) {
    data.push_back(sample_with(rng));
    scores.push_back(std::round(uniform(rng, 0, 10)));  // plenty of ties
  }
  const auto mem = build_buffer(3, data, scores, 0.15);
  REQUIRE(mem.entries.size() == 6);

  std::vector<std::size_t> order(40);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  for (std::size_t k = 0; k < 6; ++k) {
    CHECK(mem.entries[k].source_index == order[k]);
    CHECK(mem.entries[k].difficulty == scores[order[k]]);
    CHECK(mem.entries[k].task == 3);
    CHECK(mem.entries[k].image.same_values(data[order[k]].image));
  }
  CHECK_THROWS(build_buffer(0, data, std::vector<double>(3, 0.0)));
}

TEST_CASE("average Fisher is a flat mean over all elements") {
  FisherMap f;
  f.values.emplace("a", Tensor({3}, {1.0, 2.0, 3.0}));
  f.values.emplace("b", Tensor({1}, {4.0}));
  CHECK(average_fisher(f) == 2.5);
  FisherMap z;
  z.values.emplace("a", Tensor::zeros({4}));
  CHECK(average_fisher(z) == 0.0);
}

TEST_CASE("replay weight closed forms") {
  CHECK(replay_weight(1, 3, 1.0, 0.5) == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(replay_weight(2, 3, 0.0, 0.5) == 1.0);
  CHECK(replay_weight(0, 4, 2.0, 0.5) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(replay_weight(0, 1, 0.3, 0.0) == 1.0);
  CHECK_THROWS_AS(replay_weight(3, 3, 0.0, 0.5), PreconditionError);
}

TEST_CASE("replay probabilities") {
  std::vector<TaskMemory> ms{memory_of(0, {0.1}), memory_of(1, {0.2}), memory_of(2, {})};
  ms[0].replay_weight = 3.0;
  ms[1].replay_weight = 1.0;
  ms[2].replay_weight = 5.0;  // empty, so never drawn
  const auto p = replay_probabilities(ms);
  CHECK(p[0] == 0.75);
  CHECK(p[1] == 0.25);
  CHECK(p[2] == 0.0);
}

TEST_CASE("sampling from a single task draws only that task") {
  const std::vector<TaskMemory> ms{[] {
    auto m = memory_of(4, {0.5, 0.9});
    m.replay_weight = 1.0;
    return m;
  }()};
  Rng rng(5);
  for (const auto& e : sample_replay(ms, 200, rng)) CHECK(e.task == 4);
}

TEST_CASE("a zero-weight task is never drawn") {
  std::vector<TaskMemory> ms{memory_of(0, {0.5}), memory_of(1, {0.5})};
  ms[0].replay_weight = 0.0;
  ms[1].replay_weight = 2.0;
  Rng rng(6);
  for (const auto& e : sample_replay(ms, 5000, rng)) CHECK(e.task == 1);
}

TEST_CASE("within-task draws follow 1 + d / max d") {
  std::vector<TaskMemory> ms{memory_of(0, {1.0, 0.0})};
  ms[0].replay_weight = 1.0;
  Rng rng(7);
  constexpr std::size_t n = 100000;
  std::size_t hard = 0;
  for (const auto& e : sample_replay(ms, n, rng)) hard += e.source_index == 0 ? 1 : 0;
  // Weights 2 and 1.
  CHECK(double(hard) / n == doctest::Approx(2.0 / 3.0).epsilon(0.015));
  Rng rng2(7);
  hard = 0;
  for (const auto& e : sample_replay(ms, n, rng2, WithinTaskSampling::kUniform)) hard += e.source_index == 0 ? 1 : 0;
  CHECK(double(hard) / n == doctest::Approx(0.5).epsilon(0.02));
}

TEST_CASE("task draw frequencies match the normalised weights") {
  std::vector<TaskMemory> ms;
  const std::vector<double> fbar{0.8, 0.1, 0.4};
  for (std::size_t t = 0; t < 3; ++t) {
    ms.push_back(memory_of(TaskId(t), {0.1, 0.2}));
    ms[t].fisher_avg = fbar[t];
    ms[t].replay_weight = replay_weight(t, 3, fbar[t], 0.5);
  }
  const auto p = replay_probabilities(ms);
  Rng rng(43);
  constexpr std::size_t n = 100000;
  std::vector<std::size_t> counts(3, 0);
  for (const auto& e : sample_replay(ms, n, rng)) ++counts[std::size_t(e.task)];
  for (std::size_t t = 0; t < 3; ++t) CHECK(std::abs(double(counts[t]) / n - p[t]) <= 0.01);
}

TEST_CASE("property: replay probabilities sum to one") {
  Rng rng(8);
  for (int c = 0; c < 100; ++c) {
    const std::size_t tasks = 1 + uniform_index(rng, 6);
    std::vector<TaskMemory> ms;
    for (std::size_t t = 0; t < tasks; ++t) {
      ms.push_back(memory_of(TaskId(t), {0.3}));
      ms[t].fisher_avg = uniform(rng, 0, 5);
      ms[t].replay_weight = replay_weight(t, tasks, ms[t].fisher_avg, uniform(rng, 0, 2));
    }
    const auto p = replay_probabilities(ms);
    double s = 0.0;
    for (double v : p) {
      CHECK(v >= 0.0);
      s += v;
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("property: raising a task's Fisher average never lowers its probability") {
  Rng rng(9);
  for (int c = 0; c < 100; ++c) {
    const std::size_t tasks = 2 + uniform_index(rng, 5);
    const double alpha = uniform(rng, 0.01, 2.0);
    std::vector<TaskMemory> ms;
    for (std::size_t t = 0; t < tasks; ++t) {
      ms.push_back(memory_of(TaskId(t), {0.3}));
      ms[t].fisher_avg = uniform(rng, 0, 3);
      ms[t].replay_weight = replay_weight(t, tasks, ms[t].fisher_avg, alpha);
    }
    const std::size_t k = uniform_index(rng, tasks);
    const double before = replay_probabilities(ms)[k];
    ms[k].fisher_avg += uniform(rng, 0, 3);
    ms[k].replay_weight = replay_weight(k, tasks, ms[k].fisher_avg, alpha);
    CHECK(replay_probabilities(ms)[k] >= before);
  }
}

TEST_CASE("property: replay weight decays with task age") {
  Rng rng(10);
  for (int c = 0; c < 100; ++c) {
    const std::size_t now = 2 + uniform_index(rng, 8);
    const double f = uniform(rng, 0, 4);
    for (std::size_t t = 1; t < now; ++t) CHECK(replay_weight(t - 1, now, f) < replay_weight(t, now, f));
  }
}
