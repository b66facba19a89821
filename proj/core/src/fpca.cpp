#include "slf/fpca.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace slf {

std::vector<double> average_image_signal(const ImageSequence& seq,
                                         std::size_t landmark_visits) {
  if (landmark_visits == 0 || landmark_visits > seq.images.size())
    throw InputError("average_image_signal: bad landmark visit count");
  const std::size_t np = seq.images[0].size();
  std::vector<double> signal(np, 0.0);
  for (std::size_t j = 0; j < landmark_visits; ++j) {
    const Image& img = seq.images[j];
    if (img.size() != np)
      throw ShapeError("average_image_signal: image size mismatch");
    for (std::size_t k = 0; k < np; ++k) signal[k] += img[k];
  }
  const double inv = 1.0 / static_cast<double>(landmark_visits);
  for (double& v : signal) v *= inv;
  return signal;
}

FpcaModel fit_fpca(const std::vector<std::vector<double>>& signals,
                   double pve_target) {
  const std::size_t n = signals.size();
  if (n < 2) throw InsufficientDataError("fit_fpca: need at least 2 signals");
  if (!(pve_target > 0.0 && pve_target <= 1.0))
    throw InputError("fit_fpca: pve target must be in (0,1]");
  const std::size_t np = signals[0].size();
  for (const auto& s : signals)
    if (s.size() != np) throw ShapeError("fit_fpca: signal length mismatch");

  FpcaModel model;
  model.pve_target = pve_target;
  model.mean.assign(np, 0.0);
  for (const auto& s : signals)
    for (std::size_t k = 0; k < np; ++k) model.mean[k] += s[k];
  for (double& v : model.mean) v /= static_cast<double>(n);

  // Centered data matrix A (n x N_p); covariance C = A^T A / (n-1) shares
  // its nonzero spectrum with the Gram matrix M = A A^T / (n-1), and
  // phi_k = A^T u_k / ||A^T u_k||.
  Eigen::MatrixXd centered(n, np);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < np; ++k)
      centered(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) =
          signals[i][k] - model.mean[k];

  Eigen::MatrixXd gram =
      centered * centered.transpose() / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(gram);
  if (solver.info() != Eigen::Success)
    throw NumericError("fit_fpca: eigendecomposition failed");

  // Eigen returns ascending order; walk from the largest down.
  std::vector<std::pair<double, Eigen::Index>> spectrum;
  double total = 0.0;
  for (Eigen::Index i = 0; i < solver.eigenvalues().size(); ++i) {
    const double ev = std::max(solver.eigenvalues()(i), 0.0);
    total += ev;
    spectrum.emplace_back(ev, i);
  }
  std::sort(spectrum.begin(), spectrum.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });
  model.total_variance = total;
  if (total <= 1e-14)
    throw InsufficientDataError("fit_fpca: signals are rank-0 (all equal)");

  std::vector<Eigen::VectorXd> funcs;
  double captured = 0.0;
  for (const auto& [ev, col] : spectrum) {
    if (ev <= 1e-14 * total) break;
    Eigen::VectorXd phi = centered.transpose() * solver.eigenvectors().col(col);
    const double norm = phi.norm();
    if (norm <= 0.0) break;
    phi /= norm;
    model.eigenvalues.push_back(ev);
    funcs.push_back(std::move(phi));
    captured += ev;
    if (captured / total >= pve_target) break;
  }

  const std::size_t nk = funcs.size();
  model.eigenfunctions = Tensor({nk, np});
  for (std::size_t k = 0; k < nk; ++k)
    for (std::size_t p = 0; p < np; ++p)
      model.eigenfunctions(k, p) = funcs[k](static_cast<Eigen::Index>(p));
  return model;
}

std::vector<double> project_scores(const FpcaModel& model,
                                   std::span<const double> signal) {
  const std::size_t np = model.mean.size();
  if (signal.size() != np)
    throw InputError("project_scores: signal length mismatch");
  const std::size_t nk = model.components();
  std::vector<double> scores(nk, 0.0);
  for (std::size_t k = 0; k < nk; ++k) {
    double dot = 0.0;
    for (std::size_t p = 0; p < np; ++p)
      dot += (signal[p] - model.mean[p]) * model.eigenfunctions(k, p);
    scores[k] = dot;
  }
  return scores;
}

namespace {

// Log partial likelihood (unnormalized sum form), gradient and Hessian of a
// linear risk x.beta under the Breslow tie convention. Time-sorted suffix
// accumulations, shifted by the max linear predictor for stability.
struct CoxDerivatives {
  double loglik = 0.0;
  Eigen::VectorXd gradient;
  Eigen::MatrixXd hessian;  // of the NEGATIVE log likelihood (PSD)
};

CoxDerivatives cox_derivatives(const Eigen::MatrixXd& x,
                               std::span<const SurvivalRecord> records,
                               const Eigen::VectorXd& beta, bool with_hessian) {
  const Eigen::Index n = x.rows(), p = x.cols();
  Eigen::VectorXd eta = x * beta;
  const double shift = eta.maxCoeff();

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) {
                     return records[static_cast<std::size_t>(a)].time_at_risk <
                            records[static_cast<std::size_t>(b)].time_at_risk;
                   });

  CoxDerivatives out;
  out.gradient = Eigen::VectorXd::Zero(p);
  if (with_hessian) out.hessian = Eigen::MatrixXd::Zero(p, p);

  // Walk times descending, maintaining suffix aggregates.
  double s0 = 0.0;
  Eigen::VectorXd s1 = Eigen::VectorXd::Zero(p);
  Eigen::MatrixXd s2;
  if (with_hessian) s2 = Eigen::MatrixXd::Zero(p, p);

  std::size_t pos = static_cast<std::size_t>(n);
  while (pos > 0) {
    // Absorb the whole tie group into the suffix.
    std::size_t group_end = pos;
    const double t =
        records[static_cast<std::size_t>(order[pos - 1])].time_at_risk;
    while (pos > 0 &&
           records[static_cast<std::size_t>(order[pos - 1])].time_at_risk == t)
      --pos;
    for (std::size_t q = pos; q < group_end; ++q) {
      const Eigen::Index i = order[q];
      const double w = std::exp(eta(i) - shift);
      s0 += w;
      s1 += w * x.row(i).transpose();
      if (with_hessian)
        s2 += w * x.row(i).transpose() * x.row(i);
    }
    // Event terms for this group share the full suffix risk set.
    for (std::size_t q = pos; q < group_end; ++q) {
      const Eigen::Index i = order[q];
      if (!records[static_cast<std::size_t>(i)].event) continue;
      out.loglik += eta(i) - (std::log(s0) + shift);
      const Eigen::VectorXd xbar = s1 / s0;
      out.gradient += x.row(i).transpose() - xbar;
      if (with_hessian)
        out.hessian += s2 / s0 - xbar * xbar.transpose();
    }
  }
  return out;
}

}  // namespace

LinearCoxFit fit_linear_cox(const std::vector<std::vector<double>>& covariates,
                            std::span<const SurvivalRecord> records,
                            int max_iterations, double gradient_tolerance) {
  const std::size_t n = covariates.size();
  if (n != records.size())
    throw ShapeError("fit_linear_cox: covariates/records mismatch");
  if (n == 0) throw InsufficientDataError("fit_linear_cox: empty cohort");
  const std::size_t p = covariates[0].size();
  if (p == 0) throw InputError("fit_linear_cox: needs at least one covariate");
  std::size_t events = 0;
  for (const SurvivalRecord& r : records)
    events += static_cast<std::size_t>(r.event);
  if (events == 0)
    throw InsufficientDataError("fit_linear_cox: no events in cohort");

  Eigen::MatrixXd x(n, p);
  for (std::size_t i = 0; i < n; ++i) {
    if (covariates[i].size() != p)
      throw ShapeError("fit_linear_cox: ragged covariate rows");
    for (std::size_t j = 0; j < p; ++j)
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          covariates[i][j];
  }

  LinearCoxFit fit;
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  CoxDerivatives cur = cox_derivatives(x, records, beta, true);
  fit.loglik_trace.push_back(cur.loglik);

  for (int it = 0; it < max_iterations; ++it) {
    fit.iterations = it + 1;
    if (cur.gradient.lpNorm<Eigen::Infinity>() < gradient_tolerance) {
      fit.converged = true;
      break;
    }
    Eigen::MatrixXd h = cur.hessian;
    h.diagonal().array() += 1e-8;  // ridge jitter
    Eigen::VectorXd step = h.ldlt().solve(cur.gradient);
    if (!step.allFinite()) {
      fit.separation_flag = true;
      break;
    }

    // Step halving keeps the log partial likelihood nondecreasing.
    double scale = 1.0;
    Eigen::VectorXd candidate;
    CoxDerivatives next;
    bool improved = false;
    for (int half = 0; half < 30; ++half) {
      candidate = beta + scale * step;
      next = cox_derivatives(x, records, candidate, true);
      if (std::isfinite(next.loglik) && next.loglik >= cur.loglik - 1e-12) {
        improved = true;
        break;
      }
      scale *= 0.5;
    }
    if (!improved) break;
    beta = candidate;
    cur = next;
    fit.loglik_trace.push_back(cur.loglik);
    if (beta.norm() > 50.0) {
      fit.separation_flag = true;
      break;
    }
  }
  if (!fit.converged &&
      cur.gradient.lpNorm<Eigen::Infinity>() < gradient_tolerance)
    fit.converged = true;

  fit.beta.assign(beta.data(), beta.data() + p);
  return fit;
}

double FpcaCoxModel::risk(const ImageSequence& seq,
                          std::size_t landmark_visits) const {
  const std::vector<double> signal =
      average_image_signal(seq, landmark_visits);
  std::vector<double> scores = project_scores(fpca, signal);
  double r = 0.0;
  for (std::size_t k = 0; k < scores.size(); ++k) {
    const double standardized =
        score_sd[k] > 0.0 ? (scores[k] - score_mean[k]) / score_sd[k] : 0.0;
    r += cox.beta[k] * standardized;
  }
  return r;
}

FpcaCoxModel fit_fpca_cox(std::span<const Patient* const> train,
                          std::span<const std::size_t> landmark_visits,
                          double pve_target) {
  if (train.size() != landmark_visits.size())
    throw ShapeError("fit_fpca_cox: patients/visits mismatch");
  const std::size_t n = train.size();
  std::vector<std::vector<double>> signals;
  signals.reserve(n);
  std::vector<SurvivalRecord> records;
  records.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    signals.push_back(
        average_image_signal(train[i]->seq, landmark_visits[i]));
    records.push_back(train[i]->rec);
  }

  FpcaCoxModel model;
  model.fpca = fit_fpca(signals, pve_target);
  const std::size_t nk = model.fpca.components();

  std::vector<std::vector<double>> scores(n);
  for (std::size_t i = 0; i < n; ++i)
    scores[i] = project_scores(model.fpca, signals[i]);

  // Standardize scores (training statistics) for Newton conditioning.
  model.score_mean.assign(nk, 0.0);
  model.score_sd.assign(nk, 0.0);
  for (std::size_t k = 0; k < nk; ++k) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += scores[i][k];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = scores[i][k] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n > 1 ? n - 1 : 1);
    model.score_mean[k] = mean;
    model.score_sd[k] = std::sqrt(var);
  }
  std::vector<std::vector<double>> standardized(n,
                                                std::vector<double>(nk, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < nk; ++k)
      standardized[i][k] = model.score_sd[k] > 0.0
                               ? (scores[i][k] - model.score_mean[k]) /
                                     model.score_sd[k]
                               : 0.0;

  model.cox = fit_linear_cox(standardized, records);

  std::vector<double> risks(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < nk; ++k)
      risks[i] += model.cox.beta[k] * standardized[i][k];
  model.baseline = breslow_baseline(risks, records);
  return model;
}

}  // namespace slf
