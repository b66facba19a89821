#pragma once

#include <cstdint>
#include <span>

#include "slf/data.hpp"

namespace slf {

// Synthetic longitudinal-image cohort settings. Visit times are laid on a
// fixed grid (every visit_months up to horizon_months) and standardized by
// the horizon, so the study window is [0,1]. The baseline log-hazard is per
// month.
struct SimConfig {
  std::size_t cohort = 700;
  std::size_t image_side = 64;
  double visit_months = 6.0;
  double horizon_months = 120.0;
  double baseline_log_hazard = -5.0;
  double noise_variance = 0.001;
  double censor_fraction = 0.05;
  std::uint64_t seed = 1;

  void validate() const;
  double visit_step() const { return visit_months / horizon_months; }
};

// Block-diagonal coefficient image: zero except eight square diagonal
// blocks, block g filled with g/70 (g = 0..7, top-left to bottom-right).
Tensor coefficient_matrix(std::size_t side = 64);

// Ground-truth drift: each visit image is base + (0.05 t + 0.05 t^2) * ones.
std::vector<Image> ground_truth_sequence(const Image& base,
                                         std::span<const double> times);

// Frobenius inner product of the coefficient image with each of the first
// four ground-truth images, summed.
double true_risk(std::span<const Image> first_four, const Tensor& beta);

// Inverse-sampled event time under a constant baseline hazard
// exp(baseline_log_hazard) in the same time unit as tau:
//   U = -ln(u) * exp(-baseline_log_hazard - r),  T = min(U, tau),
//   event = (U <= tau).
struct EventSample {
  double time = 0.0;
  int event = 0;
  double latent = 0.0;  // untruncated U
};
EventSample sample_event_time(double risk, double u,
                              double baseline_log_hazard = -5.0,
                              double tau = 1.0);

// Full cohort protocol: uniform base images, quadratic drift, noise
// N(0, noise_variance) per pixel per visit, inverse-sampled events with an
// extra uniformly-censored fraction, visits observed only up to T.
// Deterministic in config.seed via per-patient substreams.
Dataset generate_cohort(const SimConfig& config);

}  // namespace slf
