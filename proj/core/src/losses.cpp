#include "clforge/losses.hpp"

#include <algorithm>
#include <cmath>

namespace clforge {

namespace {

void check_pair(const Tensor& logits, const Tensor& masks, std::size_t samples) {
  if (logits.numel() != masks.numel()) {
    throw ShapeError("loss: logits " + shape_str(logits.shape()) + " vs masks " + shape_str(masks.shape()));
  }
  if (samples == 0 || logits.numel() % samples != 0) throw ShapeError("loss: sample count does not divide input");
}

double sigmoid_value(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

Tensor seg_loss_per_sample(const Tensor& logits, const Tensor& masks, std::size_t samples) {
  check_pair(logits, masks, samples);
  const std::size_t width = logits.numel() / samples;
  Tensor z = reshape(logits, {samples, width});
  Tensor g = reshape(masks, {samples, width});
  Tensor p = sigmoid(z);
  Tensor one_minus_p = add_scalar(neg(p), 1.0);
  Tensor one_minus_g = add_scalar(neg(g), 1.0);
  Tensor ll = add(mul(g, log(p)), mul(one_minus_g, log(one_minus_p)));
  return scale(sum_last(ll), -1.0 / static_cast<double>(width));
}

Tensor dice_loss_per_sample(const Tensor& logits, const Tensor& masks, std::size_t samples) {
  check_pair(logits, masks, samples);
  const std::size_t width = logits.numel() / samples;
  Tensor p = sigmoid(reshape(logits, {samples, width}));
  Tensor g = reshape(masks, {samples, width});
  Tensor numerator = add_scalar(scale(sum_last(mul(p, g)), 2.0), kDiceSmoothing);
  Tensor denominator = add_scalar(add(sum_last(p), sum_last(g)), kDiceSmoothing);
  return add_scalar(neg(div(numerator, denominator)), 1.0);
}

Tensor seg_loss(const Tensor& logits, const Tensor& masks, std::size_t samples) {
  return mean(seg_loss_per_sample(logits, masks, samples));
}

Tensor dice_loss(const Tensor& logits, const Tensor& masks, std::size_t samples) {
  return mean(dice_loss_per_sample(logits, masks, samples));
}

double pixel_cross_entropy(std::span<const double> logits, std::span<const double> mask) {
  if (logits.size() != mask.size() || logits.empty()) throw ShapeError("pixel_cross_entropy: size mismatch");
  long double acc = 0.0L;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double p = sigmoid_value(logits[i]);
    const double lp = std::log(std::max(p, kLogFloor));
    const double lq = std::log(std::max(1.0 - p, kLogFloor));
    acc -= mask[i] * lp + (1.0 - mask[i]) * lq;
  }
  return static_cast<double>(acc / static_cast<long double>(logits.size()));
}

}  // namespace clforge
