#pragma once

#include <functional>

#include "clforge/tensor.hpp"

namespace clforge {

struct GradCheckReport {
  double max_rel_error = 0.0;
  ParamId worst_param;
  std::size_t worst_index = 0;
  double worst_autodiff = 0.0;
  double worst_numeric = 0.0;
  std::size_t elements_checked = 0;
};

// Compares reverse-mode gradients of loss_fn against central differences
// (f(θ+h) − f(θ−h)) / 2h over every element of every tensor in `params`.
// The relative error of one element is |ad − fd| / (|ad| + 1e-8).
//
// loss_fn must be deterministic; two identical evaluations that differ
// bitwise raise PreconditionError, as does h <= 0. The parameter tensors are
// perturbed in place and restored before returning.
GradCheckReport finite_diff_check(const std::function<Tensor()>& loss_fn, NamedTensors& params, double h);

}  // namespace clforge
