#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "slf/cox.hpp"
#include "slf/data.hpp"

namespace slf {

// Kaplan-Meier estimate of the censoring survivor function G(t) (event and
// censoring roles swapped); right-continuous step function.
struct CensorSurvivor {
  std::vector<double> drop_times;  // ascending
  std::vector<double> values;      // G just after each drop time

  double at(double t) const;       // G(t)
  double at_left(double t) const;  // G(t-)
};
CensorSurvivor km_censoring_survivor(std::span<const SurvivalRecord> records);

// Cumulative/dynamic IPCW time-dependent AUC over the window (t*, t*+dt]:
// cases are events inside the window, controls survive past t*+dt, pairs
// weighted by inverse censoring probabilities, risk ties count 1/2.
// nullopt when the scenario has no cases or no controls.
std::optional<double> time_dependent_auc(
    std::span<const double> risks, std::span<const SurvivalRecord> records,
    double t_star, double dt);

// Concordance over usable pairs (i, j): i has an observed event inside the
// window and T_i < T_j, both at risk at t*; risk ties count 1/2.
std::optional<double> time_dependent_cindex(
    std::span<const double> risks, std::span<const SurvivalRecord> records,
    double t_star, double dt);

// IPCW Brier score of conditional survival predictions at t*+dt given
// survival to t*. Weights: 1/G(T-) for window events, 1/G(t*+dt) for
// survivors, 0 for patients censored inside the window; G is renormalized
// by G(t*) for the at-risk conditioning.
std::optional<double> brier_score(std::span<const double> predictions,
                                  std::span<const SurvivalRecord> records,
                                  double t_star, double dt);

struct Scenario {
  double t_star_months = 12.0;
  double dt_months = 12.0;
};

struct ScenarioResult {
  bool valid = false;
  double auc = 0.0;
  double cindex = 0.0;
  double brier = 0.0;
  std::size_t n_at_risk = 0;
  std::size_t n_cases = 0;
  std::size_t n_controls = 0;
};

struct EvaluationReport {
  std::string method;
  int folds = 0;
  std::uint64_t seed = 0;

  struct FoldRow {
    int fold = 0;
    Scenario scenario;
    ScenarioResult result;
  };
  std::vector<FoldRow> rows;

  struct Aggregate {
    Scenario scenario;
    int valid_folds = 0;
    double auc = 0.0, cindex = 0.0, brier = 0.0;
    double auc_sd = 0.0, cindex_sd = 0.0, brier_sd = 0.0;
  };
  // Fold means per scenario, skipping folds where the scenario was
  // undefined.
  std::vector<Aggregate> aggregates() const;
};

// A fitted landmark model: per-patient risk plus the Breslow baseline that
// anchors Eq.-style survival curves.
struct LandmarkPredictor {
  std::function<double(const Patient&, std::size_t landmark_visits)> risk;
  BaselineHazardTable baseline;
};

// Builds a LandmarkPredictor from the training patients at a standardized
// landmark time.
using Trainer = std::function<LandmarkPredictor(
    const std::vector<const Patient*>& train, double t_star_std,
    std::uint64_t seed)>;

// Patient-level k-fold cross-validation over a scenario grid. Fold
// assignment is a seeded shuffle; each fold is scored on its held-out
// patients at risk at t*. Scenarios without cases or controls in a fold
// are recorded as invalid and skipped by the aggregation.
EvaluationReport cross_validate(const Dataset& dataset, int folds,
                                std::span<const Scenario> scenarios,
                                const Trainer& trainer, std::uint64_t seed,
                                const std::string& method_name);

void write_report_folds_csv(const std::string& path,
                            std::span<const EvaluationReport> reports);
// Table-style aggregate: one row per (scenario, method) with the oracle
// method's AUC echoed as true_auc on every row when present.
void write_report_aggregate_csv(const std::string& path,
                                std::span<const EvaluationReport> reports,
                                const std::string& oracle_method = "oracle");

}  // namespace slf
