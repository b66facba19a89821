#include "slf/optim.hpp"

#include <cmath>

namespace slf {

void adam_step(std::span<double> params, std::span<const double> grads,
               AdamState& state, double lr) {
  adam_step(params, grads, state, lr, {});
}

void adam_step(std::span<double> params, std::span<const double> grads,
               AdamState& state, double lr,
               std::span<const double> lr_scale) {
  if (params.size() != grads.size())
    throw ShapeError("adam_step: parameter/gradient size mismatch");
  if (state.m.size() != params.size())
    throw ShapeError("adam_step: state size mismatch");
  if (!lr_scale.empty() && lr_scale.size() != params.size())
    throw ShapeError("adam_step: lr scale size mismatch");
  state.step += 1;
  const double b1 = state.beta1, b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
    state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    const double step_lr = lr_scale.empty() ? lr : lr * lr_scale[i];
    params[i] -= step_lr * mhat / (std::sqrt(vhat) + state.eps);
  }
}

}  // namespace slf
