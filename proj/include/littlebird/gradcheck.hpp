#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "littlebird/param_store.hpp"
#include "littlebird/tensor.hpp"

namespace littlebird {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  Index worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares the analytic gradient of `f` (a deterministic scalar-valued
/// computation over the store's parameters) against central finite
/// differences, elementwise, and reports the worst relative error.
/// Relative error uses max(|analytic|, |numeric|, 1) as the denominator so
/// near-zero gradients do not inflate the score.
template <class S>
GradCheckReport grad_check(ParamStoreT<S>& params, const std::function<TensorT<S>()>& f, S eps) {
  params.zero_grad();
  TensorT<S> loss = f();
  if (!std::isfinite(static_cast<double>(loss.item())))
    throw NumericError("grad_check: loss is not finite");
  backward(loss);

  // Snapshot analytic grads before the probing loop perturbs anything.
  std::vector<ArrayX<S>> analytic;
  analytic.reserve(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    params.tensor(i).ensure_grad();
    analytic.push_back(params.tensor(i).grad());
  }

  GradCheckReport report;
  NoGradGuard ng;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    TensorT<S>& t = params.tensor(pi);
    for (Index j = 0; j < t.size(); ++j) {
      const S saved = t.array()[j];
      t.array()[j] = saved + eps;
      const double f_plus = static_cast<double>(f().item());
      t.array()[j] = saved - eps;
      const double f_minus = static_cast<double>(f().item());
      t.array()[j] = saved;
      if (!std::isfinite(f_plus) || !std::isfinite(f_minus))
        throw NumericError("grad_check: perturbed loss is not finite at " + params.name(pi));

      const double numeric = (f_plus - f_minus) / (2.0 * static_cast<double>(eps));
      const double a = static_cast<double>(analytic[pi][j]);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1.0});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = params.name(pi);
        report.worst_index = j;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace littlebird
