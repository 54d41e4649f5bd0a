#include "headprune/adam.hpp"

#include <cmath>
#include <string>

namespace headprune {

void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
               const AdamConfig& config) {
  if (params.size() != grads.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(grads.size()) + " gradients");
  }
  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: state size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape() || state.m[i].shape() != grads[i].shape()) {
      throw ShapeError("adam_step: shape mismatch for parameter " + std::to_string(i) + ": " +
                       shape_string(params[i]->shape()) + " vs grad " +
                       shape_string(grads[i].shape()));
    }
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(config.beta1, t);
  const double correction2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = grads[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g[j];
      v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g[j] * g[j];
      if (m[j] == 0.0) continue;
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      p[j] -= config.lr * m_hat / (std::sqrt(v_hat) + config.eps);
    }
  }
}

}  // namespace headprune
