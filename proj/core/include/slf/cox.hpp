#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "slf/data.hpp"
#include "slf/model.hpp"

namespace slf {

// Breslow step estimate of the cumulative baseline hazard: at each distinct
// event time t_(k), increment d_(k) / sum_{T_j >= t_(k)} exp(r_j).
struct BaselineHazardTable {
  std::vector<double> times;         // distinct event times, ascending
  std::vector<double> event_counts;  // d_(k)
  std::vector<double> increments;    // h0(t_(k))
  std::vector<double> cumulative;    // H0 at t_(k)

  // Right-continuous step evaluation of H0(t); 0 before the first event.
  double cumulative_at(double t) const;
  // S0(t) = exp(-H0(t)).
  double baseline_survival(double t) const;
};

// Mean over events of [ log sum_{k in R_i} exp(r_k) - r_i ] with
// R_i = {k : T_k >= T_i} (Breslow tie convention) and a stable
// log-sum-exp. Throws InsufficientDataError when no events are present.
double neg_log_partial_likelihood(std::span<const double> risks,
                                  std::span<const SurvivalRecord> records);

// d(neg_log_partial_likelihood)/d(r_i) for every patient.
std::vector<double> partial_likelihood_risk_gradient(
    std::span<const double> risks, std::span<const SurvivalRecord> records);

// lambda * (alpha * sum|w| + (1-alpha) * sum w^2) over penalized
// parameters: all projection/FFN/survival weight matrices. Biases, CLS
// tokens, positional embeddings and layer-norm parameters are exempt.
bool is_penalized_parameter(const std::string& name);
double elastic_net_penalty(const ParameterStore& params, double lambda,
                           double alpha);
// Adds the penalty subgradient (0 at w = 0) into a flat gradient buffer
// laid out like ParameterStore::flatten().
void add_elastic_net_gradient(const ParameterStore& params, double lambda,
                              double alpha, std::span<double> grad);

BaselineHazardTable breslow_baseline(std::span<const double> risks,
                                     std::span<const SurvivalRecord> records);

// Eq.-style survival probability exp(-H0(t) * exp(r)).
double survival_probability(double risk, double t,
                            const BaselineHazardTable& table);

// Conditional survival P(U > t* + dt | U > t*) =
// {S0(t*+dt)/S0(t*)}^{exp(r)}. Exactly 1 at dt = 0.
double dynamic_survival(double risk, double t_star, double dt,
                        const BaselineHazardTable& table);

// What the early-stopping monitor watches on the held-out split. The
// partial likelihood is scale-sensitive: late in training the risk spread
// grows and inflates the val loss even while the ranking keeps improving,
// so concordance is the better selector for long schedules.
enum class SelectionMetric { kValLoss, kValConcordance };

struct TrainConfig {
  double lambda = 1e-4;       // elastic-net strength
  double alpha = 0.5;         // L1/L2 mixing
  double learning_rate = 1e-3;
  // Learning-rate multiplier for the positional-embedding group. Those
  // parameters are shared across patients (they cannot memorize anyone)
  // yet must travel the furthest, so they tolerate much larger steps.
  double pos_embed_lr_scale = 1.0;
  // Multiplier for the content-capacity group (patch projection, attention
  // projections, FFN weights). Values below 1 slow the pathways that can
  // memorize individual patients.
  double content_lr_scale = 1.0;
  int epochs = 200;
  int patience = 20;          // early-stop patience on the validation split
  double landmark = 0.1;      // t* in standardized time
  double val_fraction = 0.1;  // held-out share of the landmark cohort
  SelectionMetric selection = SelectionMetric::kValLoss;
  int threads = 1;
  std::uint64_t seed = 1;

  void validate() const;
};

struct TraceRow {
  int epoch = 0;
  double train_loss = 0.0;  // unregularized partial likelihood
  double val_loss = 0.0;
  double penalty = 0.0;
};

struct TrainResult {
  ParameterStore params;
  BaselineHazardTable baseline;
  std::vector<TraceRow> trace;
  int best_epoch = -1;
  double best_val_loss = 0.0;
  std::size_t cohort_size = 0;
  std::size_t event_count = 0;
};

// Landmark view: patients with T >= t_star and at least one image observed
// at or before t_star, each with its J*.
struct LandmarkCohort {
  std::vector<const Patient*> patients;
  std::vector<std::size_t> landmark_visits;
};
LandmarkCohort landmark_filter(std::span<const Patient> patients,
                               double t_star);
LandmarkCohort landmark_filter(std::span<const Patient* const> patients,
                               double t_star);

// Full-batch Adam on neg_log_partial_likelihood + elastic_net_penalty.
// Per-patient forward passes feed one shared loss, so risk sets are exact.
// Keeps the best-monitored parameters; the Breslow table is computed from
// the returned parameters' risks over the whole landmark cohort.
// A warm-start parameter store (shape-checked against the config) replaces
// the seeded initialization when given. The observer, when set, sees the
// evaluated parameters once per epoch (before that epoch's update).
using EpochObserver = std::function<void(int, const ParameterStore&)>;
TrainResult train(std::span<const Patient> patients, const ModelConfig& mc,
                  const TrainConfig& tc,
                  const ParameterStore* warm_start = nullptr,
                  const EpochObserver& observer = nullptr);

void write_trace_csv(const std::string& path,
                     std::span<const TraceRow> trace);
void write_breslow_csv(const std::string& path,
                       const BaselineHazardTable& table);
BaselineHazardTable read_breslow_csv(const std::string& path);

}  // namespace slf
