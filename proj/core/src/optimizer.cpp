#include "clforge/optimizer.hpp"

#include <cmath>

namespace clforge {

AdamW::AdamW(NamedTensors params, Options options) : params_(std::move(params)), opt_(options) {
  if (!(opt_.lr > 0.0)) throw PreconditionError("learning rate must be positive");
  for (const auto& [name, p] : params_) {
    m_[name].assign(p.numel(), 0.0);
    v_[name].assign(p.numel(), 0.0);
  }
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (auto& [name, p] : params_) {
    if (!p.has_grad()) continue;
    auto values = p.mutable_data();
    const auto g = p.grad();
    auto& m = m_[name];
    auto& v = v_[name];
    for (std::size_t i = 0; i < values.size(); ++i) {
      m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g[i];
      v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g[i] * g[i];
      const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + opt_.eps);
      values[i] -= opt_.lr * (update + opt_.weight_decay * values[i]);
    }
    if (!std::isfinite(values[0])) throw NumericError("optimizer produced a non-finite parameter in " + name);
    p.zero_grad();
  }
}

void AdamW::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

}  // namespace clforge
