#include "clforge/gradcheck.hpp"

#include <cmath>

namespace clforge {

GradCheckReport finite_diff_check(const std::function<Tensor()>& loss_fn, NamedTensors& params, double h) {
  if (!(h > 0.0)) throw PreconditionError("finite_diff_check: step h must be positive");

  double reference = 0.0;
  {
    NoGradGuard no_grad;
    reference = loss_fn().item();
    const double again = loss_fn().item();
    if (reference != again) throw PreconditionError("finite_diff_check: loss function is not deterministic");
  }

  const GradientMap analytic = backward(loss_fn(), params);

  GradCheckReport report;
  NoGradGuard no_grad;
  for (auto& [name, param] : params) {
    auto values = param.mutable_data();
    const auto grad = analytic.at(name).data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double plus = loss_fn().item();
      values[i] = saved - h;
      const double minus = loss_fn().item();
      values[i] = saved;

      const double numeric = (plus - minus) / (2.0 * h);
      const double rel = std::abs(grad[i] - numeric) / (std::abs(grad[i]) + 1e-8);
      ++report.elements_checked;
      if (rel > report.max_rel_error || report.worst_param.empty()) {
        report.max_rel_error = rel;
        report.worst_param = name;
        report.worst_index = i;
        report.worst_autodiff = grad[i];
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace clforge
