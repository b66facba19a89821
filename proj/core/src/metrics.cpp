#include "slf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>

namespace slf {

CensorSurvivor km_censoring_survivor(std::span<const SurvivalRecord> records) {
  if (records.empty())
    throw InsufficientDataError("km_censoring_survivor: empty cohort");
  // Distinct observed times with at least one censoring, ascending.
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return records[a].time_at_risk < records[b].time_at_risk;
  });

  CensorSurvivor g;
  double value = 1.0;
  std::size_t at_risk = records.size();
  std::size_t p = 0;
  while (p < order.size()) {
    const double t = records[order[p]].time_at_risk;
    std::size_t censored_here = 0, here = 0;
    while (p < order.size() && records[order[p]].time_at_risk == t) {
      censored_here += records[order[p]].event ? 0u : 1u;
      ++here;
      ++p;
    }
    if (censored_here > 0) {
      value *= 1.0 - static_cast<double>(censored_here) /
                         static_cast<double>(at_risk);
      g.drop_times.push_back(t);
      g.values.push_back(value);
    }
    at_risk -= here;
  }
  return g;
}

double CensorSurvivor::at(double t) const {
  auto it = std::upper_bound(drop_times.begin(), drop_times.end(), t);
  if (it == drop_times.begin()) return 1.0;
  return values[static_cast<std::size_t>(it - drop_times.begin()) - 1];
}

double CensorSurvivor::at_left(double t) const {
  auto it = std::lower_bound(drop_times.begin(), drop_times.end(), t);
  if (it == drop_times.begin()) return 1.0;
  return values[static_cast<std::size_t>(it - drop_times.begin()) - 1];
}

namespace {

struct AtRiskView {
  std::vector<double> risks;
  std::vector<SurvivalRecord> records;
};

AtRiskView at_risk_subset(std::span<const double> risks,
                          std::span<const SurvivalRecord> records,
                          double t_star) {
  if (risks.size() != records.size())
    throw ShapeError("metrics: risks/records length mismatch");
  AtRiskView v;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].time_at_risk > t_star) {
      v.risks.push_back(risks[i]);
      v.records.push_back(records[i]);
    }
  }
  return v;
}

double checked_inverse(double g, const char* what) {
  if (g <= 0.0)
    throw NumericError(std::string("metrics: censoring survivor is zero "
                                   "where a positive weight is needed (") +
                       what + ")");
  return 1.0 / g;
}

}  // namespace

std::optional<double> time_dependent_auc(
    std::span<const double> risks, std::span<const SurvivalRecord> records,
    double t_star, double dt) {
  if (dt < 0.0) throw InputError("time_dependent_auc: dt must be >= 0");
  const AtRiskView v = at_risk_subset(risks, records, t_star);
  if (v.records.empty()) return std::nullopt;
  const double horizon = t_star + dt;
  const CensorSurvivor g = km_censoring_survivor(v.records);

  std::vector<std::size_t> cases, controls;
  for (std::size_t i = 0; i < v.records.size(); ++i) {
    const SurvivalRecord& r = v.records[i];
    if (r.event && r.time_at_risk <= horizon)
      cases.push_back(i);
    else if (r.time_at_risk > horizon)
      controls.push_back(i);
    // Censored inside the window: excluded from both sets.
  }
  if (cases.empty() || controls.empty()) return std::nullopt;

  const double control_weight =
      checked_inverse(g.at(horizon), "controls at t*+dt");
  double numerator = 0.0, denominator = 0.0;
  for (std::size_t i : cases) {
    const double wi =
        checked_inverse(g.at_left(v.records[i].time_at_risk), "case weight");
    for (std::size_t j : controls) {
      const double w = wi * control_weight;
      denominator += w;
      if (v.risks[i] > v.risks[j])
        numerator += w;
      else if (v.risks[i] == v.risks[j])
        numerator += 0.5 * w;
    }
  }
  return numerator / denominator;
}

std::optional<double> time_dependent_cindex(
    std::span<const double> risks, std::span<const SurvivalRecord> records,
    double t_star, double dt) {
  if (dt < 0.0) throw InputError("time_dependent_cindex: dt must be >= 0");
  const AtRiskView v = at_risk_subset(risks, records, t_star);
  const double horizon = t_star + dt;

  double concordant = 0.0;
  std::size_t usable = 0;
  for (std::size_t i = 0; i < v.records.size(); ++i) {
    const SurvivalRecord& ri = v.records[i];
    if (!ri.event || ri.time_at_risk > horizon) continue;
    for (std::size_t j = 0; j < v.records.size(); ++j) {
      if (v.records[j].time_at_risk <= ri.time_at_risk) continue;
      ++usable;
      if (v.risks[i] > v.risks[j])
        concordant += 1.0;
      else if (v.risks[i] == v.risks[j])
        concordant += 0.5;
    }
  }
  if (usable == 0) return std::nullopt;
  return concordant / static_cast<double>(usable);
}

std::optional<double> brier_score(std::span<const double> predictions,
                                  std::span<const SurvivalRecord> records,
                                  double t_star, double dt) {
  if (dt < 0.0) throw InputError("brier_score: dt must be >= 0");
  for (double p : predictions)
    if (!(p >= 0.0 && p <= 1.0))
      throw InputError("brier_score: predictions must lie in [0,1]");
  const AtRiskView v = at_risk_subset(predictions, records, t_star);
  if (v.records.empty()) return std::nullopt;
  const double horizon = t_star + dt;
  const CensorSurvivor g = km_censoring_survivor(v.records);
  // Conditioning on being at risk at t*: within the at-risk subset no
  // censoring can occur at or before t*, so G(t*) = 1 and the normalization
  // below is exact rather than approximate.
  const double g_star = g.at(t_star);

  double total = 0.0;
  for (std::size_t i = 0; i < v.records.size(); ++i) {
    const SurvivalRecord& r = v.records[i];
    const double s_hat = v.risks[i];
    if (r.time_at_risk > horizon) {
      const double w = g_star * checked_inverse(g.at(horizon), "survivors");
      total += w * (1.0 - s_hat) * (1.0 - s_hat);
    } else if (r.event) {
      const double w =
          g_star * checked_inverse(g.at_left(r.time_at_risk), "events");
      total += w * s_hat * s_hat;
    }
    // Censored inside the window: weight 0.
  }
  return total / static_cast<double>(v.records.size());
}

std::vector<EvaluationReport::Aggregate> EvaluationReport::aggregates() const {
  std::vector<Aggregate> out;
  std::vector<std::pair<double, double>> seen;
  for (const FoldRow& row : rows) {
    const std::pair<double, double> key{row.scenario.t_star_months,
                                        row.scenario.dt_months};
    if (std::find(seen.begin(), seen.end(), key) != seen.end()) continue;
    seen.push_back(key);
    Aggregate agg;
    agg.scenario = row.scenario;
    std::vector<double> aucs, cis, bss;
    for (const FoldRow& r : rows) {
      if (r.scenario.t_star_months != key.first ||
          r.scenario.dt_months != key.second || !r.result.valid)
        continue;
      aucs.push_back(r.result.auc);
      cis.push_back(r.result.cindex);
      bss.push_back(r.result.brier);
    }
    agg.valid_folds = static_cast<int>(aucs.size());
    auto mean_sd = [](const std::vector<double>& xs, double& mean,
                      double& sd) {
      mean = 0.0;
      sd = 0.0;
      if (xs.empty()) return;
      for (double x : xs) mean += x;
      mean /= static_cast<double>(xs.size());
      if (xs.size() > 1) {
        for (double x : xs) sd += (x - mean) * (x - mean);
        sd = std::sqrt(sd / static_cast<double>(xs.size() - 1));
      }
    };
    mean_sd(aucs, agg.auc, agg.auc_sd);
    mean_sd(cis, agg.cindex, agg.cindex_sd);
    mean_sd(bss, agg.brier, agg.brier_sd);
    out.push_back(agg);
  }
  return out;
}

EvaluationReport cross_validate(const Dataset& dataset, int folds,
                                std::span<const Scenario> scenarios,
                                const Trainer& trainer, std::uint64_t seed,
                                const std::string& method_name) {
  if (folds < 2) throw InputError("cross_validate: folds must be >= 2");
  if (scenarios.empty())
    throw InputError("cross_validate: scenario list is empty");
  const std::size_t n = dataset.patients.size();
  if (n < static_cast<std::size_t>(folds))
    throw InsufficientDataError("cross_validate: fewer patients than folds");
  const double horizon_months = dataset.horizon_months();

  // Seeded patient shuffle, contiguous fold blocks.
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(mix_seed(seed, 0xF01DULL));
  for (std::size_t i = n; i > 1; --i)
    std::swap(perm[i - 1], perm[rng.below(i)]);
  std::vector<int> fold_of(n);
  for (std::size_t k = 0; k < n; ++k)
    fold_of[perm[k]] = static_cast<int>(
        k * static_cast<std::size_t>(folds) / n);

  // Scenario grid grouped by landmark time, preserving input order.
  std::vector<double> t_stars;
  for (const Scenario& s : scenarios)
    if (std::find(t_stars.begin(), t_stars.end(), s.t_star_months) ==
        t_stars.end())
      t_stars.push_back(s.t_star_months);

  EvaluationReport report;
  report.method = method_name;
  report.folds = folds;
  report.seed = seed;

  for (int f = 0; f < folds; ++f) {
    std::vector<const Patient*> train;
    std::vector<const Patient*> heldout;
    for (std::size_t i = 0; i < n; ++i) {
      (fold_of[i] == f ? heldout : train).push_back(&dataset.patients[i]);
    }

    for (std::size_t ti = 0; ti < t_stars.size(); ++ti) {
      const double t_star_months = t_stars[ti];
      const double t_std = t_star_months / horizon_months;
      const LandmarkPredictor predictor =
          trainer(train, t_std, mix_seed(seed, static_cast<std::uint64_t>(f),
                                         ti));

      // Held-out patients at risk at t* with at least one usable image.
      std::vector<const Patient*> scored;
      std::vector<double> risks;
      std::vector<SurvivalRecord> recs;
      for (const Patient* p : heldout) {
        if (p->rec.time_at_risk <= t_std) continue;
        const std::size_t jstar = p->seq.visits_at_or_before(t_std);
        if (jstar == 0) continue;
        scored.push_back(p);
        risks.push_back(predictor.risk(*p, jstar));
        recs.push_back(p->rec);
      }

      for (const Scenario& sc : scenarios) {
        if (sc.t_star_months != t_star_months) continue;
        EvaluationReport::FoldRow row;
        row.fold = f;
        row.scenario = sc;
        const double dt_std = sc.dt_months / horizon_months;
        const double horizon_std = t_std + dt_std;

        ScenarioResult& res = row.result;
        res.n_at_risk = scored.size();
        for (std::size_t i = 0; i < recs.size(); ++i) {
          if (recs[i].event && recs[i].time_at_risk <= horizon_std)
            ++res.n_cases;
          else if (recs[i].time_at_risk > horizon_std)
            ++res.n_controls;
        }

        const auto auc = time_dependent_auc(risks, recs, t_std, dt_std);
        const auto ci = time_dependent_cindex(risks, recs, t_std, dt_std);
        std::optional<double> bs;
        if (auc && ci) {
          std::vector<double> preds(risks.size());
          for (std::size_t i = 0; i < risks.size(); ++i)
            preds[i] = dynamic_survival(risks[i], t_std, dt_std,
                                        predictor.baseline);
          bs = brier_score(preds, recs, t_std, dt_std);
        }
        if (auc && ci && bs) {
          res.valid = true;
          res.auc = *auc;
          res.cindex = *ci;
          res.brier = *bs;
        }
        report.rows.push_back(row);
      }
    }
  }
  return report;
}

namespace {

std::string fmt_metric(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

void write_report_folds_csv(const std::string& path,
                            std::span<const EvaluationReport> reports) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write report: " + path);
  out << "t_star_months,dt_months,method,fold,auc,cindex,brier\n";
  for (const EvaluationReport& rep : reports) {
    for (const auto& row : rep.rows) {
      out << fmt_metric(row.scenario.t_star_months) << ','
          << fmt_metric(row.scenario.dt_months) << ',' << rep.method << ','
          << row.fold << ',';
      if (row.result.valid) {
        out << fmt_metric(row.result.auc) << ','
            << fmt_metric(row.result.cindex) << ','
            << fmt_metric(row.result.brier) << '\n';
      } else {
        out << "NA,NA,NA\n";
      }
    }
  }
}

void write_report_aggregate_csv(const std::string& path,
                                std::span<const EvaluationReport> reports,
                                const std::string& oracle_method) {
  // true_auc per scenario comes from the oracle report when present.
  std::map<std::pair<double, double>, double> true_auc;
  for (const EvaluationReport& rep : reports) {
    if (rep.method != oracle_method) continue;
    for (const auto& agg : rep.aggregates())
      if (agg.valid_folds > 0)
        true_auc[{agg.scenario.t_star_months, agg.scenario.dt_months}] =
            agg.auc;
  }

  std::ofstream out(path);
  if (!out) throw InputError("cannot write report: " + path);
  out << "t_star_months,dt_months,method,true_auc,auc,cindex,brier\n";
  for (const EvaluationReport& rep : reports) {
    for (const auto& agg : rep.aggregates()) {
      out << fmt_metric(agg.scenario.t_star_months) << ','
          << fmt_metric(agg.scenario.dt_months) << ',' << rep.method << ',';
      auto it = true_auc.find(
          {agg.scenario.t_star_months, agg.scenario.dt_months});
      if (it != true_auc.end())
        out << fmt_metric(it->second);
      else
        out << "NA";
      if (agg.valid_folds > 0) {
        out << ',' << fmt_metric(agg.auc) << ',' << fmt_metric(agg.cindex)
            << ',' << fmt_metric(agg.brier) << '\n';
      } else {
        out << ",NA,NA,NA\n";
      }
    }
  }
}

}  // namespace slf
