#pragma once

// Fast oracle checks behind `clforge selftest`. Each check recomputes a
// quantity independently of the library path it guards and reports the
// largest discrepancy it saw.

#include <string>
#include <vector>

namespace clforge {

struct SelfCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

// Random 2-layer MLP: autodiff vs central differences (h = 1e-5), rel. err < 1e-4.
SelfCheck check_mlp_gradients();
// compute_fisher on a 5-entry buffer vs a per-sample backward loop, rel. err < 1e-6.
SelfCheck check_fisher_oracle();
// Closed-form cases of LoRA, replay weights, flat-mean Fisher, EWC, Dice and FR, to 1e-12.
SelfCheck check_formulas();
// 100k replay draws from task weights {0.75, 0.25}, each frequency within 1% absolute.
SelfCheck check_replay_distribution();
// Container encode/decode is exact and a flipped payload byte is rejected.
SelfCheck check_container_roundtrip();

std::vector<SelfCheck> run_selftest();

}  // namespace clforge
