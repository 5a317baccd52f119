#include "clforge/selftest.hpp"

#include <cmath>
#include <sstream>

#include "clforge/adapters.hpp"
#include "clforge/consolidation.hpp"
#include "clforge/container.hpp"
#include "clforge/gradcheck.hpp"
#include "clforge/losses.hpp"
#include "clforge/memory.hpp"
#include "clforge/metrics.hpp"
#include "clforge/model.hpp"
#include "clforge/rng.hpp"
#include "clforge/taskgen.hpp"

namespace clforge {

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = scale * normal(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

// Collects |got - want| failures for the formula suite.
struct Expect {
  double worst = 0.0;
  std::string failed;

  void close(const char* what, double got, double want, double tol = 1e-12) {
    const double err = std::abs(got - want);
    worst = std::max(worst, err);
    if (!(err <= tol) && failed.empty()) failed = std::string(what) + " gave " + std::to_string(got);
  }
};

}  // namespace

SelfCheck check_mlp_gradients() {
  Rng rng = make_rng(101, Stream::kModelInit);
  NamedTensors params{{"w1", random_tensor({6, 8}, rng, 0.5)},
                      {"b1", random_tensor({8}, rng, 0.1)},
                      {"w2", random_tensor({8, 3}, rng, 0.5)},
                      {"b2", random_tensor({3}, rng, 0.1)}};
  const Tensor x = random_tensor({5, 6}, rng, 1.0);
  const Tensor y = random_tensor({5, 3}, rng, 1.0);
  auto loss = [&] {
    Tensor h = gelu(add(matmul(x, params.at("w1")), params.at("b1")));
    Tensor out = add(matmul(h, params.at("w2")), params.at("b2"));
    return mean(square(sub(out, y)));
  };
  const auto report = finite_diff_check(loss, params, 1e-5);
  return {"mlp-gradients", report.max_rel_error < 1e-4,
          "max rel err " + fmt_double(report.max_rel_error) + " over " + std::to_string(report.elements_checked) +
              " elements"};
}

SelfCheck check_fisher_oracle() {
  auto model = BiModalSegmenter::initialize({}, 21);
  model.freeze_base();
  Rng rng = make_rng(21, Stream::kAdapterInit);
  const auto targets = model.lora_targets();
  LoraAdapter adapter(targets, 4, 8.0, rng);
  // Non-zero B so the adapter factors receive gradient.
  for (auto& [name, f] : adapter.factors()) {
    for (auto& v : const_cast<Tensor&>(f.b).mutable_data()) v = 0.05 * normal(rng);
  }
  adapter.set_trainable(true);

  auto spec = default_suite("mixed", 21).front();
  spec.n_train = 5;
  spec.n_val = 1;
  spec.n_test = 1;
  const TaskData data = generate(spec);
  const auto prompt = Vocabulary::standard().tokenize(spec.prompt);

  TaskMemory memory;
  memory.task = 0;
  for (std::size_t k = 0; k < data.train.size(); ++k) {
    const double d = score_difficulty(model, &adapter, prompt, data.train[k]);
    memory.entries.push_back({data.train[k].image, data.train[k].mask, 0, d, k});
  }

  NamedTensors params = adapter.parameters("adapter.");
  for (const auto& [name, t] : model.shared_parameters()) params.emplace(name, t);

  const FisherMap fisher = compute_fisher(model, adapter, prompt, memory, params, FisherWeighting::kDifficulty);

  // Independent loop: one backward per sample, weights 1 + d / max d.
  double max_d = 0.0;
  for (const auto& e : memory.entries) max_d = std::max(max_d, e.difficulty);
  std::map<ParamId, std::vector<double>> want;
  for (const auto& [name, p] : params) want[name].assign(p.numel(), 0.0);
  double w_total = 0.0;
  const auto& cfg = model.config();
  for (const auto& e : memory.entries) {
    const double w = 1.0 + e.difficulty / max_d;
    for (auto& [name, p] : params) p.zero_grad();
    const Tensor z = model.forward_patches(to_patches(e.image, cfg), prompt, &adapter);
    const Tensor g = to_patches(e.mask, cfg);
    backward(add(seg_loss(z, g), dice_loss(z, g)));
    for (const auto& [name, p] : params) {
      if (!p.has_grad()) continue;
      const auto grad = p.grad();
      for (std::size_t i = 0; i < grad.size(); ++i) want[name][i] += w * grad[i] * grad[i];
    }
    w_total += w;
  }
  for (auto& [name, p] : params) p.zero_grad();

  double worst = 0.0;
  for (const auto& [name, values] : want) {
    const auto got = fisher.values.at(name).data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double ref = values[i] / w_total;
      const double err = std::abs(got[i] - ref);
      worst = std::max(worst, ref == 0.0 ? (err == 0.0 ? 0.0 : 1.0) : err / std::abs(ref));
    }
  }
  return {"fisher-oracle", worst < 1e-6, "max rel err " + fmt_double(worst)};
}

SelfCheck check_formulas() {
  Expect ex;

  // LoRA: the 1x1 hand case and the alpha / r factor.
  {
    std::map<ParamId, LoraFactors> f;
    f.emplace("w", LoraFactors{Tensor({1, 1}, {4.0}), Tensor({1, 1}, {3.0})});
    const LoraAdapter a(1, 1.0, std::move(f));
    ex.close("1x1 LoRA", a.effective("w", Tensor({1, 1}, {1.0})).item(), 13.0);
    const auto model = BiModalSegmenter::initialize({}, 3);
    Rng rng = make_rng(3, Stream::kAdapterInit);
    const auto targets = model.lora_targets();
    LoraAdapter lora(targets, 8, 16.0, rng);
    ex.close("alpha/r", lora.scaling(), 2.0);
    const auto prompt = Vocabulary::standard().tokenize("one round disc");
    const Tensor image = Tensor::full({32, 32}, 0.25);
    const bool same = model.forward(image, prompt, &lora).same_values(model.forward(image, prompt));
    ex.close("B=0 identity", same ? 0.0 : 1.0, 0.0);
  }

  ex.close("replay weight", replay_weight(1, 3, 1.0, 0.5), 0.75);
  ex.close("replay weight no boost", replay_weight(2, 3, 0.0, 0.5), 1.0);

  {
    FisherMap f;
    f.values.emplace("a", Tensor({3}, {1.0, 2.0, 3.0}));
    f.values.emplace("b", Tensor({1}, {4.0}));
    ex.close("flat-mean Fisher", average_fisher(f), 2.5);
  }

  {
    NamedTensors live{{"p", Tensor::scalar(1.1)}};
    Anchor same{{{"p", Tensor::scalar(1.1)}}, 0};
    Anchor a1{{{"p", Tensor::scalar(1.0)}}, 0};
    Anchor a2{{{"p", Tensor::scalar(1.3)}}, 1};
    FisherMap f;
    f.values.emplace("p", Tensor::scalar(1.0));
    const std::vector<FisherMap> one{f};
    const std::vector<FisherMap> two{f, f};
    ex.close("EWC at anchor", ewc_penalty(live, std::vector<Anchor>{same}, one).item(), 0.0);
    ex.close("EWC one task", ewc_penalty(live, std::vector<Anchor>{a1}, one).item(), 0.01);
    ex.close("EWC additivity", ewc_penalty(live, std::vector<Anchor>{a1, a2}, two).item(), 0.05);
  }

  {
    const std::vector<double> p{1, 1, 1, 1, 0, 0, 0, 0};
    const std::vector<double> g{0, 0, 1, 1, 1, 1, 0, 0};
    ex.close("Dice overlap", dice(p, g), 0.5);
  }

  {
    ResultsMatrix m({"a", "b"});
    m.record_stage({0.80});
    m.record_stage({0.72, 0.9});
    const auto fr = forgetting_rate(m);
    ex.close("forgetting rate", fr.per_task.at(0).value_or(-1.0), 10.0);
  }

  return {"formulas", ex.failed.empty(),
          ex.failed.empty() ? "max abs err " + fmt_double(ex.worst) : ex.failed};
}

SelfCheck check_replay_distribution() {
  std::vector<TaskMemory> memories(2);
  for (int t = 0; t < 2; ++t) {
    memories[t].task = t;
    memories[t].entries.push_back({Tensor::scalar(0.0), Tensor::scalar(0.0), t, 0.5, 0});
  }
  memories[0].replay_weight = 0.75;
  memories[1].replay_weight = 0.25;
  Rng rng = make_rng(43, Stream::kReplay);
  constexpr std::size_t kDraws = 100000;
  const auto draws = sample_replay(memories, kDraws, rng);
  std::size_t first = 0;
  for (const auto& e : draws) first += e.task == 0 ? 1 : 0;
  const double f0 = static_cast<double>(first) / kDraws;
  const double err = std::max(std::abs(f0 - 0.75), std::abs((1.0 - f0) - 0.25));
  return {"replay-distribution", err <= 0.01, "task 0 frequency " + fmt_double(f0)};
}

SelfCheck check_container_roundtrip() {
  Rng rng = make_rng(9, Stream::kModelInit);
  Container c;
  c.tensors.emplace("x", random_tensor({3, 4}, rng, 1.0));
  c.tensors.emplace("y", Tensor::scalar(-0.0));
  c.meta["note"] = "roundtrip";
  std::string bytes = encode_container(c);
  const Container back = decode_container(bytes);
  bool exact = back.meta == c.meta && back.tensors.size() == c.tensors.size();
  for (const auto& [name, t] : c.tensors) exact = exact && back.tensors.at(name).same_values(t);
  bool rejected = false;
  bytes.back() = static_cast<char>(bytes.back() ^ 0x01);
  try {
    decode_container(bytes);
  } catch (const FormatError&) {
    rejected = true;
  }
  return {"container-roundtrip", exact && rejected,
          std::string(exact ? "exact" : "mismatch") + ", corruption " + (rejected ? "rejected" : "accepted")};
}

std::vector<SelfCheck> run_selftest() {
  return {check_mlp_gradients(), check_fisher_oracle(), check_formulas(), check_replay_distribution(),
          check_container_roundtrip()};
}

}  // namespace clforge
