#include "slf/simgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace slf {

void SimConfig::validate() const {
  if (cohort < 10) throw InputError("SimConfig: cohort must be >= 10");
  if (image_side % 8 != 0 || image_side == 0)
    throw InputError("SimConfig: image side must be divisible by 8");
  if (!(visit_months > 0.0) || !(horizon_months > 0.0))
    throw InputError("SimConfig: visit/horizon months must be > 0");
  if (horizon_months < 3.0 * visit_months)
    throw InputError("SimConfig: need at least four visit slots");
  if (!(noise_variance >= 0.0))
    throw InputError("SimConfig: noise variance must be >= 0");
  if (censor_fraction < 0.0 || censor_fraction >= 1.0)
    throw InputError("SimConfig: censor fraction must be in [0,1)");
}

Tensor coefficient_matrix(std::size_t side) {
  if (side % 8 != 0 || side == 0)
    throw InputError("coefficient_matrix: side must be divisible by 8");
  const std::size_t block = side / 8;
  Tensor beta({side, side});
  for (std::size_t g = 0; g < 8; ++g) {
    const double value = static_cast<double>(g) / 70.0;
    for (std::size_t i = 0; i < block; ++i)
      for (std::size_t j = 0; j < block; ++j)
        beta(g * block + i, g * block + j) = value;
  }
  return beta;
}

std::vector<Image> ground_truth_sequence(const Image& base,
                                         std::span<const double> times) {
  std::vector<Image> out;
  out.reserve(times.size());
  for (double t : times) {
    if (t < 0.0 || t > 1.0)
      throw InputError("ground_truth_sequence: times must lie in [0,1]");
    const double drift = 0.05 * t + 0.05 * t * t;
    Image img = base;
    for (std::size_t k = 0; k < img.size(); ++k) img[k] += drift;
    out.push_back(std::move(img));
  }
  return out;
}

double true_risk(std::span<const Image> first_four, const Tensor& beta) {
  if (first_four.size() < 4)
    throw InputError("true_risk: needs the first four ground-truth images");
  double r = 0.0;
  for (std::size_t j = 0; j < 4; ++j) {
    const Image& img = first_four[j];
    if (!img.same_matrix_shape(beta))
      throw ShapeError("true_risk: image/coefficient shape mismatch");
    for (std::size_t k = 0; k < img.size(); ++k) r += beta[k] * img[k];
  }
  return r;
}

EventSample sample_event_time(double risk, double u,
                              double baseline_log_hazard, double tau) {
  if (!(u > 0.0 && u < 1.0))
    throw InputError("sample_event_time: u must lie in (0,1)");
  EventSample s;
  s.latent = -std::log(u) * std::exp(-baseline_log_hazard - risk);
  s.event = s.latent <= tau ? 1 : 0;
  s.time = std::min(s.latent, tau);
  return s;
}

Dataset generate_cohort(const SimConfig& cfg) {
  cfg.validate();
  const std::size_t n = cfg.cohort;
  const double step = cfg.visit_step();
  std::vector<double> grid;
  for (std::size_t j = 0;; ++j) {
    const double t = static_cast<double>(j) * step;
    if (t > 1.0 + 1e-9) break;
    grid.push_back(std::min(t, 1.0));
  }

  const Tensor beta = coefficient_matrix(cfg.image_side);
  // Event sampling runs on the standardized clock, so the per-month
  // baseline hazard is scaled by the horizon.
  const double std_log_hazard =
      cfg.baseline_log_hazard + std::log(cfg.horizon_months);

  Dataset ds;
  ds.patients.resize(n);
  std::vector<Image> bases(n);

  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(mix_seed(cfg.seed, 0xBA5EULL, i));
    Image base({cfg.image_side, cfg.image_side});
    for (std::size_t k = 0; k < base.size(); ++k)
      base[k] = rng.uniform(-0.5, 0.5);

    const std::vector<Image> gt4 =
        ground_truth_sequence(base, std::span<const double>(grid).first(4));
    const double r = true_risk(gt4, beta);
    const EventSample ev =
        sample_event_time(r, rng.unit_open(), std_log_hazard, 1.0);

    Patient& p = ds.patients[i];
    char id[32];
    std::snprintf(id, sizeof id, "p%05zu", i);
    p.seq.id = id;
    p.rec.id = id;
    p.rec.time_at_risk = ev.time;
    p.rec.event = ev.event;
    p.true_risk = r;
    p.latent_event_time = ev.latent;
    bases[i] = std::move(base);
  }

  // Extra censoring: ceil(fraction * n) patients drawn without replacement,
  // each re-censored at C ~ Unif(0, T_i).
  const std::size_t n_censor = static_cast<std::size_t>(
      std::ceil(cfg.censor_fraction * static_cast<double>(n)));
  if (n_censor > 0) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng pick(mix_seed(cfg.seed, 0xCE45ULL));
    for (std::size_t i = 0; i < n_censor; ++i) {
      const std::size_t j = i + pick.below(n - i);
      std::swap(idx[i], idx[j]);
    }
    for (std::size_t i = 0; i < n_censor; ++i) {
      Patient& p = ds.patients[idx[i]];
      Rng crng(mix_seed(cfg.seed, 0xC0C0ULL, idx[i]));
      p.rec.time_at_risk = crng.unit_open() * p.rec.time_at_risk;
      p.rec.event = 0;
    }
  }

  // Observed visits (grid times <= T) with per-pixel noise.
  for (std::size_t i = 0; i < n; ++i) {
    Patient& p = ds.patients[i];
    std::vector<double> observed;
    for (double t : grid)
      if (t <= p.rec.time_at_risk) observed.push_back(t);
    p.seq.times = observed;
    p.seq.images = ground_truth_sequence(bases[i], observed);
    if (cfg.noise_variance > 0.0) {
      Rng nrng(mix_seed(cfg.seed, 0x2015ULL, i));
      const double sd = std::sqrt(cfg.noise_variance);
      for (Image& img : p.seq.images)
        for (std::size_t k = 0; k < img.size(); ++k)
          img[k] += nrng.normal(0.0, sd);
    }
  }

  ds.meta["cohort"] = std::to_string(n);
  ds.meta["image-side"] = std::to_string(cfg.image_side);
  {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", cfg.visit_months);
    ds.meta["visit-months"] = buf;
    std::snprintf(buf, sizeof buf, "%.17g", cfg.horizon_months);
    ds.meta["horizon-months"] = buf;
    std::snprintf(buf, sizeof buf, "%.17g", cfg.baseline_log_hazard);
    ds.meta["baseline-log-hazard"] = buf;
    std::snprintf(buf, sizeof buf, "%.17g", cfg.noise_variance);
    ds.meta["noise-variance"] = buf;
    std::snprintf(buf, sizeof buf, "%.17g", cfg.censor_fraction);
    ds.meta["censor-fraction"] = buf;
  }
  ds.meta["seed"] = std::to_string(cfg.seed);
  return ds;
}

}  // namespace slf
