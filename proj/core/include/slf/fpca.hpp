#pragma once

#include <span>
#include <vector>

#include "slf/cox.hpp"
#include "slf/data.hpp"

namespace slf {

// Empirical Karhunen-Loeve decomposition of flattened averaged-image
// signals: mean, orthonormal eigenfunctions (rows) and nonincreasing
// eigenvalues, with components kept up to a proportion-of-variance target.
struct FpcaModel {
  std::vector<double> mean;      // length N_p
  Tensor eigenfunctions;         // N_k x N_p, orthonormal rows
  std::vector<double> eigenvalues;  // length N_k, nonincreasing
  double total_variance = 0.0;
  double pve_target = 0.95;
  std::size_t components() const { return eigenvalues.size(); }
};

// Pixel-wise mean over the first landmark_visits images, flattened
// row-major into a 1-D signal.
std::vector<double> average_image_signal(const ImageSequence& seq,
                                         std::size_t landmark_visits);

// FPCA via the n x n Gram trick (N_p >> n): eigenvectors of the centered
// Gram matrix lift to covariance eigenfunctions. Components are kept until
// the cumulative eigenvalue share reaches pve_target.
FpcaModel fit_fpca(const std::vector<std::vector<double>>& signals,
                   double pve_target = 0.95);

// Scores xi_k = <signal - mean, phi_k> with unit pixel measure.
std::vector<double> project_scores(const FpcaModel& model,
                                   std::span<const double> signal);

// Newton-Raphson fit of a linear Cox model under the Breslow-tie partial
// likelihood, with analytic gradient/Hessian, step halving and a 1e-8
// ridge jitter. Separation is flagged when the coefficient norm passes 50.
struct LinearCoxFit {
  std::vector<double> beta;
  bool converged = false;
  bool separation_flag = false;
  int iterations = 0;
  std::vector<double> loglik_trace;
};
LinearCoxFit fit_linear_cox(const std::vector<std::vector<double>>& covariates,
                            std::span<const SurvivalRecord> records,
                            int max_iterations = 50,
                            double gradient_tolerance = 1e-8);

// Complete FPCA-Cox comparator: averaged landmark signals -> FPCA ->
// standardized scores -> linear Cox. Risk scores feed the shared Breslow /
// survival machinery exactly like the deep model's do.
struct FpcaCoxModel {
  FpcaModel fpca;
  std::vector<double> score_mean;
  std::vector<double> score_sd;
  LinearCoxFit cox;
  BaselineHazardTable baseline;

  double risk(const ImageSequence& seq, std::size_t landmark_visits) const;
};
FpcaCoxModel fit_fpca_cox(std::span<const Patient* const> train,
                          std::span<const std::size_t> landmark_visits,
                          double pve_target = 0.95);

}  // namespace slf
