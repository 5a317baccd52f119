#pragma once

#include <cstdint>

#include "clforge/model.hpp"

namespace clforge {

inline constexpr std::size_t kDefaultPretrainSteps = 2000;
inline constexpr std::uint64_t kDefaultPretrainSeed = 7;
inline constexpr double kPretextDiceGate = 0.6;

struct PretrainConfig {
  std::size_t steps = kDefaultPretrainSteps;
  std::size_t batch_size = 16;
  double lr = 3e-3;
  std::size_t train_samples = 1200;
  std::size_t val_samples = 200;
  std::uint64_t seed = kDefaultPretrainSeed;
  ModelConfig model;
};

struct PretrainResult {
  BiModalSegmenter model;
  double pretext_dice = 0.0;
  bool gate_passed = false;
};

// Trains every weight on the pretext task (segment any shape, prompt
// "object"), then freezes the base. Deterministic in config.seed.
PretrainResult pretrain_base(const PretrainConfig& config);

// pretrain_base with a per-process cache keyed by (steps, seed); throws
// PreconditionError with the measured Dice when the gate fails.
const BiModalSegmenter& pretrained_base(std::size_t steps = kDefaultPretrainSteps,
                                        std::uint64_t seed = kDefaultPretrainSeed);

}  // namespace clforge
