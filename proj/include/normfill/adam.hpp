#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "normfill/tensor.hpp"

namespace normfill {

/// Adam with bias correction, epsilon added outside the square root:
///   p -= lr * m_hat / (sqrt(v_hat) + eps)
template <typename S>
struct AdamState {
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps = S(1e-8);
  int64_t t = 0;
  std::vector<std::vector<S>> m, v;

  void init(const std::vector<Tensor<S>>& params) {
    m.assign(params.size(), {});
    v.assign(params.size(), {});
    for (size_t i = 0; i < params.size(); ++i) {
      m[i].assign(size_t(params[i].numel()), S(0));
      v[i].assign(size_t(params[i].numel()), S(0));
    }
    t = 0;
  }
};

/// One update over all parameters. Parameters without a populated gradient
/// (unreachable from the loss) are left untouched. Gradients must be finite.
template <typename S>
void adam_step(std::vector<Tensor<S>>& params, AdamState<S>& state, S lr) {
  if (state.m.size() != params.size())
    throw std::invalid_argument("adam_step: state not initialized for this parameter list");
  ++state.t;
  const S bc1 = S(1) - std::pow(state.beta1, S(state.t));
  const S bc2 = S(1) - std::pow(state.beta2, S(state.t));
  for (size_t i = 0; i < params.size(); ++i) {
    if (!params[i].grad_available()) continue;
    const int64_t n = params[i].numel();
    const S* g = params[i].grad_data();
    detail::check_all_finite(g, n, "adam_step gradient");
    S* p = params[i].mutable_data();
    S* mi = state.m[i].data();
    S* vi = state.v[i].data();
    for (int64_t j = 0; j < n; ++j) {
      mi[j] = state.beta1 * mi[j] + (S(1) - state.beta1) * g[j];
      vi[j] = state.beta2 * vi[j] + (S(1) - state.beta2) * g[j] * g[j];
      const S mhat = mi[j] / bc1;
      const S vhat = vi[j] / bc2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace normfill
