#pragma once

#include <map>
#include <vector>

#include "clforge/tensor.hpp"

namespace clforge {

// Adam moments with decoupled weight decay. Only the tensors handed to the
// constructor are ever updated.
class AdamW {
 public:
  struct Options {
    double lr = 8e-4;
    double weight_decay = 8e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  AdamW(NamedTensors params, Options options);

  // Applies one update from the accumulated .grad() of each parameter, then
  // clears the gradients. Parameters without a gradient are left untouched.
  void step();
  void zero_grad();
  std::size_t steps() const { return t_; }
  const NamedTensors& parameters() const { return params_; }

 private:
  NamedTensors params_;
  Options opt_;
  std::map<ParamId, std::vector<double>> m_;
  std::map<ParamId, std::vector<double>> v_;
  std::size_t t_ = 0;
};

}  // namespace clforge
