#include <cmath>
#include <vector>

#include "doctest.h"

#include "clforge/gradcheck.hpp"
#include "clforge/losses.hpp"
#include "clforge/rng.hpp"

using namespace clforge;

namespace {

struct Scalar {
  double seg = 0.0, dice = 0.0;
};

// Textbook per-sample formulas in plain loops.
std::vector<Scalar> oracle(const std::vector<double>& z, const std::vector<double>& g, std::size_t samples) {
  const std::size_t per = z.size() / samples;
  std::vector<Scalar> out(samples);
  for (std::size_t s = 0; s < samples; ++s) {
    double bce = 0.0, pg = 0.0, ps = 0.0, gs = 0.0;
    for (std::size_t i = s * per; i < (s + 1) * per; ++i) {
      const double p = 1.0 / (1.0 + std::exp(-z[i]));
      bce -= g[i] * std::log(p) + (1.0 - g[i]) * std::log(1.0 - p);
      pg += p * g[i];
      ps += p;
      gs += g[i];
    }
    out[s].seg = bce / static_cast<double>(per);
    out[s].dice = 1.0 - (2.0 * pg + 1.0) / (ps + gs + 1.0);
  }
  return out;
}

}  // namespace

TEST_CASE("saturated correct logits give near-zero losses") {
  const Tensor g({2, 2}, {1, 0, 1, 1});
  const Tensor z({2, 2}, {40, -40, 40, 40});
  CHECK(seg_loss(z, g).item() < 1e-15);
  CHECK(dice_loss(z, g).item() < 1e-12);
}

TEST_CASE("all-ones prediction on an all-ones mask has zero Dice loss") {
  // sigmoid(40) rounds to exactly 1.0 in double precision.
  const Tensor g = Tensor::full({4, 4}, 1.0);
  const Tensor z = Tensor::full({4, 4}, 40.0);
  CHECK(dice_loss(z, g).item() == 0.0);
}

TEST_CASE("zero logits give ln 2 pixel loss") {
  const Tensor g({4}, {1, 0, 0, 1});
  CHECK(seg_loss(Tensor::zeros({4}), g).item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("losses match a scalar loop on random fixtures") {
  Rng rng(41);
  for (int c = 0; c < 100; ++c) {
    const std::size_t samples = 1 + uniform_index(rng, 4), per = 4 + uniform_index(rng, 30);
    std::vector<double> z(samples * per), g(samples * per);
    for (auto& v : z) v = uniform(rng, -6, 6);
    for (auto& v : g) v = uniform01(rng) < 0.4 ? 1.0 : 0.0;
    const Tensor tz({samples, per}, z), tg({samples, per}, g);
    const auto want = oracle(z, g, samples);
    const Tensor seg = seg_loss_per_sample(tz, tg, samples);
    const Tensor dl = dice_loss_per_sample(tz, tg, samples);
    double seg_mean = 0.0, dice_mean = 0.0;
    for (std::size_t s = 0; s < samples; ++s) {
      CHECK(seg[s] == doctest::Approx(want[s].seg).epsilon(1e-10));
      CHECK(dl[s] == doctest::Approx(want[s].dice).epsilon(1e-10));
      seg_mean += want[s].seg / double(samples);
      dice_mean += want[s].dice / double(samples);
    }
    CHECK(seg_loss(tz, tg, samples).item() == doctest::Approx(seg_mean).epsilon(1e-10));
    CHECK(dice_loss(tz, tg, samples).item() == doctest::Approx(dice_mean).epsilon(1e-10));
    CHECK(pixel_cross_entropy(std::span<const double>(z).first(per), std::span<const double>(g).first(per)) ==
          doctest::Approx(want[0].seg).epsilon(1e-10));
  }
}

TEST_CASE("loss gradients match central differences") {
  Rng rng(42);
  for (int c = 0; c < 100; ++c) {
    std::vector<double> z(24), g(24);
    for (auto& v : z) v = uniform(rng, -4, 4);
    for (auto& v : g) v = uniform01(rng) < 0.5 ? 1.0 : 0.0;
    NamedTensors p{{"z", Tensor({3, 8}, z, true)}};
    const Tensor tg({3, 8}, g);
    const auto r = finite_diff_check([&] { return add(seg_loss(p.at("z"), tg, 3), dice_loss(p.at("z"), tg, 3)); },
                                     p, 1e-5);
    CHECK(r.max_rel_error < 1e-5);
  }
}

TEST_CASE("loss shape errors") {
  CHECK_THROWS_AS(seg_loss(Tensor::zeros({4}), Tensor::zeros({5})), ShapeError);
  CHECK_THROWS_AS(dice_loss(Tensor::zeros({5}), Tensor::zeros({5}), 2), ShapeError);
}
