#pragma once

#include "slf/fpca.hpp"
#include "slf/metrics.hpp"

namespace slf {

// SurLonFormer trainer: fits the full transformer survival model on the
// landmark-filtered training patients.
Trainer make_surlonformer_trainer(ModelConfig model_config,
                                  TrainConfig train_config);

// FPCA-Cox comparator trainer.
Trainer make_fpca_cox_trainer(double pve_target = 0.95);

// Oracle trainer for simulated cohorts: risk scores come straight from the
// generator; the baseline hazard is still estimated from training risks so
// Brier scores are well defined.
Trainer make_oracle_trainer();

}  // namespace slf
