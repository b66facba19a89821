#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "slf/common.hpp"

namespace slf {

// Adam state over a flat parameter vector. beta1 = 0.9, beta2 = 0.999,
// eps = 1e-8, with bias correction.
struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

void adam_step(std::span<double> params, std::span<const double> grads,
               AdamState& state, double lr);

// Variant with per-coordinate learning-rate multipliers (parameter groups).
void adam_step(std::span<double> params, std::span<const double> grads,
               AdamState& state, double lr,
               std::span<const double> lr_scale);

}  // namespace slf
