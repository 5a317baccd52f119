#include <benchmark/benchmark.h>

#include "clforge/consolidation.hpp"
#include "clforge/losses.hpp"
#include "clforge/model.hpp"
#include "clforge/rng.hpp"
#include "clforge/taskgen.hpp"

using namespace clforge;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = uniform(rng, -1.0, 1.0);
  return Tensor(std::move(shape), std::move(v), grad);
}

struct Fixture {
  BiModalSegmenter model = BiModalSegmenter::initialize({}, 3);
  TaskData data;
  std::vector<std::size_t> prompt;
  LoraAdapter adapter;
  NamedTensors active;

  Fixture() : adapter(make()) {
    auto spec = default_suite("mixed", 43).front();
    spec.n_train = 16;
    spec.n_val = 1;
    spec.n_test = 1;
    data = generate(spec);
    prompt = Vocabulary::standard().tokenize(spec.prompt);
    active = adapter.parameters("adapter0.");
    for (const auto& [name, p] : model.shared_parameters()) active.emplace(name, p);
  }

  LoraAdapter make() {
    Rng rng(1);
    const auto targets = model.lora_targets();
    return LoraAdapter(targets, kDefaultLoraRank, kDefaultLoraAlpha, rng);
  }
};

}  // namespace

static void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(7);
  const Tensor a = random_tensor({n, n}, rng), b = random_tensor({n, n}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
}
BENCHMARK(BM_Matmul)->RangeMultiplier(2)->Range(16, 128);

static void BM_MatmulBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(8);
  Tensor a = random_tensor({n, n}, rng, true), b = random_tensor({n, n}, rng, true);
  for (auto _ : state) {
    backward(sum(matmul(a, b)));
    a.zero_grad();
    b.zero_grad();
  }
}
BENCHMARK(BM_MatmulBackward)->RangeMultiplier(2)->Range(16, 128);

static void BM_ForwardBackward(benchmark::State& state) {
  Fixture f;
  const auto batch = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) {
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t i = 0; i < batch; ++i) {
      const auto& s = f.data.train[i];
      const Tensor z = f.model.forward(s.image, f.prompt, &f.adapter);
      total = add(total, add(seg_loss(z, s.mask), dice_loss(z, s.mask)));
    }
    backward(total);
    for (auto& [name, p] : f.active) p.zero_grad();
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ForwardBackward)->Arg(1)->Arg(16);

static void BM_Fisher(benchmark::State& state) {
  Fixture f;
  const std::span<const Sample> samples(f.data.train.data(), static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(compute_fisher(f.model, f.adapter, f.prompt, samples, 0, f.active));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Fisher)->Arg(4)->Arg(16);
BENCHMARK_MAIN();
