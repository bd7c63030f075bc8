#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "normfill/tensor.hpp"

namespace normfill {

template <typename S>
struct GradCheckReport {
  S max_rel_err = S(0);
  int64_t elements = 0;
};

/// Central-difference check of reverse-mode gradients. `forward` must build a
/// scalar loss from the given leaf tensors and be deterministic. The actual
/// perturbation (x+h) - (x-h) is measured after rounding so the step error of
/// the scalar type does not pollute the quotient. Relative error uses
/// |analytic - numeric| / max(|analytic|, |numeric|, floor). The floor sits a
/// safety margin above the loss-readout roundoff eps*|f|/(2h), scaled by
/// 1/rel_tol: gradient components below what central differences can resolve
/// at this precision are compared absolutely at the noise scale instead of
/// failing on roundoff. Larger components are still checked fully relatively.
template <typename S>
GradCheckReport<S> finite_diff_check(const std::function<Tensor<S>()>& forward,
                                     std::vector<Tensor<S>> inputs, S h,
                                     S rel_tol = S(1e-3)) {
  for (auto& t : inputs)
    if (!t.defined() || !t.is_leaf() || !t.requires_grad())
      throw std::invalid_argument("finite_diff_check: inputs must be leaf tensors with gradients");

  Tensor<S> loss = forward();
  const S f0 = std::abs(loss.value());
  loss.backward();
  std::vector<std::vector<S>> analytic(inputs.size());
  for (size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].grad_available()) {
      const S* g = inputs[i].grad_data();
      analytic[i].assign(g, g + inputs[i].numel());
    } else {
      analytic[i].assign(size_t(inputs[i].numel()), S(0));
    }
    inputs[i].clear_grad();
  }

  const S eps = std::numeric_limits<S>::epsilon();
  const S noise = eps * std::max(f0, S(1)) / (S(2) * h);
  const S floor = std::max(S(1e-8), S(8) * noise / rel_tol);

  GradCheckReport<S> report;
  for (size_t i = 0; i < inputs.size(); ++i) {
    S* x = inputs[i].mutable_data();
    for (int64_t j = 0; j < inputs[i].numel(); ++j) {
      const S orig = x[j];
      const S xp = orig + h;
      const S xm = orig - h;
      x[j] = xp;
      const S fp = forward().value();
      x[j] = xm;
      const S fm = forward().value();
      x[j] = orig;
      const S numeric = (fp - fm) / (xp - xm);
      const S a = analytic[i][j];
      const S denom = std::max({std::abs(a), std::abs(numeric), floor});
      const S rel = std::abs(a - numeric) / denom;
      report.max_rel_err = std::max(report.max_rel_err, rel);
      ++report.elements;
    }
  }
  return report;
}

}  // namespace normfill
