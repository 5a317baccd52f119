#pragma once

#include <span>

#include "clforge/tensor.hpp"

namespace clforge {

inline constexpr double kDiceSmoothing = 1.0;

// Both tensors hold `samples` equally sized samples back to back (any shape
// whose element count divides evenly). Pixel order within a sample does not
// matter. Returns one value per sample, shape [samples].
Tensor seg_loss_per_sample(const Tensor& logits, const Tensor& masks, std::size_t samples);
Tensor dice_loss_per_sample(const Tensor& logits, const Tensor& masks, std::size_t samples);

// Mean pixel binary cross-entropy of sigmoid(logits), averaged over samples.
Tensor seg_loss(const Tensor& logits, const Tensor& masks, std::size_t samples = 1);
// 1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps), eps = 1, averaged over samples.
Tensor dice_loss(const Tensor& logits, const Tensor& masks, std::size_t samples = 1);

// Graph-free mean pixel BCE of one sample, same guarded formula as seg_loss.
double pixel_cross_entropy(std::span<const double> logits, std::span<const double> mask);

}  // namespace clforge
