#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "slf/tensor.hpp"

namespace slf {

// Grayscale image = rank-2 tensor of pixel values.
using Image = Tensor;

// One patient's longitudinal imaging record. Visit times are standardized
// (months / horizon, so the study window is [0,1]).
struct ImageSequence {
  std::string id;
  std::vector<double> times;
  std::vector<Image> images;
  std::vector<double> covariates;

  // Number of images observed at or before the landmark time t (J*).
  std::size_t visits_at_or_before(double t) const;
  void validate() const;
};

// Observed time at risk T = min(U, C) in standardized units and the event
// indicator (1 = event, 0 = censored).
struct SurvivalRecord {
  std::string id;
  double time_at_risk = 0.0;
  int event = 0;
};

struct Patient {
  ImageSequence seq;
  SurvivalRecord rec;
  // Simulated cohorts carry the generator's risk score and latent event
  // time; both are NaN for real data.
  double true_risk = std::numeric_limits<double>::quiet_NaN();
  double latent_event_time = std::numeric_limits<double>::quiet_NaN();

  bool has_true_risk() const { return std::isfinite(true_risk); }
};

struct Dataset {
  std::vector<Patient> patients;
  // Free-form provenance / geometry keys (visit-months, horizon-months,
  // image-side, seed, config-hash, ...).
  std::map<std::string, std::string> meta;

  double horizon_months() const;
  double visit_months() const;
  std::size_t size() const { return patients.size(); }
};

// --- dataset directory layout -------------------------------------------
//
//   <dir>/manifest.csv    one patient per row:
//                         id,time_at_risk,event,num_visits,covariates,images
//                         (covariates and images are ';'-joined lists)
//   <dir>/images/*.img    raw image grids (see header below)
//   <dir>/truth.csv       id,true_risk — written for simulated cohorts only
//   <dir>/provenance.txt  key=value lines: seed, config hash, config echo
//
// Image file: 16-byte header (magic "IMG1", u32 rows, u32 cols, u32
// reserved), then rows*cols little-endian f64 pixels, row-major.

void write_image_file(const std::string& path, const Image& img);
Image read_image_file(const std::string& path);

void write_dataset(const std::string& dir, const Dataset& ds);
Dataset read_dataset(const std::string& dir);

}  // namespace slf
