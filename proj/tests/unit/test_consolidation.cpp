#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"

#include "clforge/consolidation.hpp"
#include "clforge/gradcheck.hpp"
#include "clforge/rng.hpp"

using namespace clforge;

namespace {

std::vector<double> random_vec(Rng& rng, std::size_t n, double lo, double hi) {
  std::vector<double> v(n);
  for (auto& x : v) x = uniform(rng, lo, hi);
  return v;
}

// Linear per-sample losses L_k = sum_i c_k[i] * p[i], so dL_k/dp = c_k exactly.
struct LinearProblem {
  NamedTensors params;
  std::vector<std::vector<double>> coeffs;

  Tensor loss(std::size_t k) const {
    const Tensor& p = params.at("p");
    return sum(mul(p, Tensor(p.shape(), coeffs[k])));
  }
};

}  // namespace

TEST_CASE("difficulty weight") {
  CHECK(difficulty_weight(2.0, 2.0) == 2.0);
  CHECK(difficulty_weight(0.0, 2.0) == 1.0);
  CHECK(difficulty_weight(1.0, 2.0) == 1.5);
  CHECK(difficulty_weight(0.0, 0.0) == 1.0);
  CHECK_THROWS_AS(difficulty_weight(3.0, 2.0), PreconditionError);
  CHECK_THROWS_AS(difficulty_weight(-0.1, 2.0), PreconditionError);
}

TEST_CASE("a single sample gives the squared gradient") {
  LinearProblem lp{{{"p", Tensor({3}, {0.1, 0.2, 0.3}, true)}}, {{2.0, -3.0, 0.0}}};
  const std::vector<double> d{0.7};
  const auto f = compute_fisher([&](std::size_t k) { return lp.loss(k); }, 1, d, lp.params,
                                FisherWeighting::kDifficulty, 4);
  CHECK(f.values.at("p").same_values(Tensor({3}, {4.0, 9.0, 0.0})));
  CHECK(f.source_task == 4);
  CHECK(f.sample_count == 1);
}

TEST_CASE("a parameter the loss ignores gets zero Fisher") {
  LinearProblem lp{{{"p", Tensor({2}, {1.0, 1.0}, true)}, {"unused", Tensor({2, 2}, {1, 2, 3, 4}, true)}},
                   {{1.0, 2.0}, {3.0, 4.0}}};
  const std::vector<double> d{0.2, 0.4};
  const auto f = compute_fisher([&](std::size_t k) { return lp.loss(k); }, 2, d, lp.params,
                                FisherWeighting::kDifficulty, 0);
  for (double v : f.values.at("unused").data()) CHECK(v == 0.0);
  // Weights 1.5 and 2: (1.5 * 1 + 2 * 9) / 3.5 and (1.5 * 4 + 2 * 16) / 3.5.
  CHECK(f.values.at("p")[0] == doctest::Approx(19.5 / 3.5).epsilon(1e-14));
  CHECK(f.values.at("p")[1] == doctest::Approx(38.0 / 3.5).epsilon(1e-14));
}

TEST_CASE("uniform weighting is the plain mean of squared gradients") {
  LinearProblem lp{{{"p", Tensor({2}, {0.0, 0.0}, true)}}, {{1.0, 2.0}, {3.0, 4.0}}};
  const auto f = compute_fisher([&](std::size_t k) { return lp.loss(k); }, 2, {}, lp.params,
                                FisherWeighting::kUniform, 0);
  CHECK(f.values.at("p").same_values(Tensor({2}, {5.0, 10.0})));
}

TEST_CASE("compute_fisher preconditions") {
  LinearProblem lp{{{"p", Tensor({1}, {0.0}, true)}}, {{1.0}}};
  auto loss = [&](std::size_t k) { return lp.loss(k); };
  CHECK_THROWS_AS(compute_fisher(loss, 0, {}, lp.params, FisherWeighting::kUniform, 0), PreconditionError);
  const std::vector<double> two{0.1, 0.2};
  CHECK_THROWS_AS(compute_fisher(loss, 1, two, lp.params, FisherWeighting::kDifficulty, 0), ShapeError);
}

TEST_CASE("property: weighted Fisher matches an explicit loop") {
  Rng rng(31);
  for (int c = 0; c < 100; ++c) {
    const std::size_t n = 1 + uniform_index(rng, 6), dim = 1 + uniform_index(rng, 5);
    LinearProblem lp;
    lp.params.emplace("p", Tensor({dim}, random_vec(rng, dim, -1, 1), true));
    for (std::size_t k = 0; k < n; ++k) lp.coeffs.push_back(random_vec(rng, dim, -3, 3));
    const auto d = random_vec(rng, n, 0.0, 2.0);
    const auto f = compute_fisher([&](std::size_t k) { return lp.loss(k); }, n, d, lp.params,
                                  FisherWeighting::kDifficulty, 0);
    const double dmax = *std::max_element(d.begin(), d.end());
    for (std::size_t i = 0; i < dim; ++i) {
      double num = 0.0, den = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double w = 1.0 + d[k] / dmax;
        num += w * lp.coeffs[k][i] * lp.coeffs[k][i];
        den += w;
      }
      CHECK(f.values.at("p")[i] == doctest::Approx(num / den).epsilon(1e-12));
      CHECK(f.values.at("p")[i] >= 0.0);
    }
  }
}

TEST_CASE("property: scaling every difficulty by a constant leaves the Fisher unchanged") {
  Rng rng(32);
  for (int c = 0; c < 100; ++c) {
    const std::size_t n = 2 + uniform_index(rng, 5);
    LinearProblem lp;
    lp.params.emplace("p", Tensor({3}, random_vec(rng, 3, -1, 1), true));
    for (std::size_t k = 0; k < n; ++k) lp.coeffs.push_back(random_vec(rng, 3, -2, 2));
    auto d = random_vec(rng, n, 0.01, 1.0);
    auto loss = [&](std::size_t k) { return lp.loss(k); };
    const auto f1 = compute_fisher(loss, n, d, lp.params, FisherWeighting::kDifficulty, 0);
    const double s = uniform(rng, 0.1, 10.0);
    for (auto& v : d) v *= s;
    const auto f2 = compute_fisher(loss, n, d, lp.params, FisherWeighting::kDifficulty, 0);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(f2.values.at("p")[i] == doctest::Approx(f1.values.at("p")[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("EWC penalty closed forms") {
  NamedTensors live{{"p", Tensor::scalar(1.1)}};
  FisherMap f;
  f.values.emplace("p", Tensor::scalar(1.0));
  const std::vector<FisherMap> one{f}, two{f, f};
  CHECK(ewc_penalty(live, std::vector<Anchor>{{{{"p", Tensor::scalar(1.1)}}, 0}}, one).item() == 0.0);
  CHECK(ewc_penalty(live, std::vector<Anchor>{{{{"p", Tensor::scalar(1.0)}}, 0}}, one).item() ==
        doctest::Approx(0.01).epsilon(1e-12));
  CHECK(ewc_penalty(live, std::vector<Anchor>{{{{"p", Tensor::scalar(1.0)}}, 0}, {{{"p", Tensor::scalar(1.3)}}, 1}},
                    two)
            .item() == doctest::Approx(0.05).epsilon(1e-12));
  CHECK(ewc_penalty(live, {}, {}).item() == 0.0);
}

TEST_CASE("EWC penalty skips parameters that are not live") {
  NamedTensors live{{"p", Tensor::scalar(2.0)}};
  FisherMap f;
  f.values.emplace("p", Tensor::scalar(3.0));
  f.values.emplace("gone", Tensor::scalar(100.0));
  const std::vector<Anchor> a{{{{"p", Tensor::scalar(1.0)}, {"gone", Tensor::scalar(-5.0)}}, 0}};
  CHECK(ewc_penalty(live, a, std::vector<FisherMap>{f}).item() == 3.0);
  CHECK_THROWS_AS(ewc_penalty(live, a, {}), PreconditionError);
}

TEST_CASE("EWC gradient matches central differences") {
  Rng rng(33);
  NamedTensors live{{"a", Tensor({4}, random_vec(rng, 4, -1, 1), true)},
                    {"b", Tensor({2, 3}, random_vec(rng, 6, -1, 1), true)}};
  std::vector<Anchor> anchors;
  std::vector<FisherMap> fishers;
  for (int t = 0; t < 2; ++t) {
    Anchor an;
    FisherMap f;
    for (const auto& [name, p] : live) {
      an.values.emplace(name, Tensor(p.shape(), random_vec(rng, p.numel(), -1, 1)));
      f.values.emplace(name, Tensor(p.shape(), random_vec(rng, p.numel(), 0, 2)));
    }
    anchors.push_back(an);
    fishers.push_back(f);
  }
  const auto r = finite_diff_check([&] { return ewc_penalty(live, anchors, fishers); }, live, 1e-5);
  CHECK(r.max_rel_error < 1e-7);
}

TEST_CASE("anchors are deep copies") {
  NamedTensors live{{"p", Tensor({2}, {1.0, 2.0}, true)}};
  const Anchor a = snapshot_anchor(live, 7);
  live.at("p").mutable_data()[0] = 50.0;
  CHECK(a.values.at("p").same_values(Tensor({2}, {1.0, 2.0})));
  CHECK(a.task == 7);
  CHECK_FALSE(a.values.at("p").requires_grad());
}
