#include "slf/trainers.hpp"

#include <memory>

namespace slf {

Trainer make_surlonformer_trainer(ModelConfig model_config,
                                  TrainConfig train_config) {
  return [model_config, train_config](
             const std::vector<const Patient*>& train_patients,
             double t_star_std, std::uint64_t seed) {
    std::vector<Patient> cohort;
    cohort.reserve(train_patients.size());
    for (const Patient* p : train_patients) cohort.push_back(*p);

    TrainConfig tc = train_config;
    tc.landmark = t_star_std;
    tc.seed = seed;
    ModelConfig mc = model_config;
    mc.seed = mix_seed(seed, 0x11ULL);

    TrainResult fitted = train(cohort, mc, tc);
    auto params = std::make_shared<ParameterStore>(std::move(fitted.params));
    LandmarkPredictor predictor;
    predictor.baseline = std::move(fitted.baseline);
    predictor.risk = [params, mc](const Patient& p, std::size_t jstar) {
      return risk_score(p.seq, jstar, *params, mc);
    };
    return predictor;
  };
}

Trainer make_fpca_cox_trainer(double pve_target) {
  return [pve_target](const std::vector<const Patient*>& train_patients,
                      double t_star_std, std::uint64_t) {
    const LandmarkCohort cohort = landmark_filter(
        std::span<const Patient* const>(train_patients), t_star_std);
    if (cohort.patients.size() < 2)
      throw InsufficientDataError("fpca trainer: landmark cohort too small");
    auto model = std::make_shared<FpcaCoxModel>(
        fit_fpca_cox(cohort.patients, cohort.landmark_visits, pve_target));
    LandmarkPredictor predictor;
    predictor.baseline = model->baseline;
    predictor.risk = [model](const Patient& p, std::size_t jstar) {
      return model->risk(p.seq, jstar);
    };
    return predictor;
  };
}

Trainer make_oracle_trainer() {
  return [](const std::vector<const Patient*>& train_patients,
            double t_star_std, std::uint64_t) {
    const LandmarkCohort cohort = landmark_filter(
        std::span<const Patient* const>(train_patients), t_star_std);
    std::vector<double> risks;
    std::vector<SurvivalRecord> recs;
    for (const Patient* p : cohort.patients) {
      if (!p->has_true_risk())
        throw InputError("oracle trainer: dataset has no true risks");
      risks.push_back(p->true_risk);
      recs.push_back(p->rec);
    }
    if (recs.empty())
      throw InsufficientDataError("oracle trainer: empty landmark cohort");
    LandmarkPredictor predictor;
    predictor.baseline = breslow_baseline(risks, recs);
    predictor.risk = [](const Patient& p, std::size_t) {
      if (!p.has_true_risk())
        throw InputError("oracle trainer: patient has no true risk");
      return p.true_risk;
    };
    return predictor;
  };
}

}  // namespace slf
