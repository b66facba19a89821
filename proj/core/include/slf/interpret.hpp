#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "slf/cox.hpp"
#include "slf/model.hpp"

namespace slf {

// Per-visit occlusion sensitivities on the non-overlapping region grid
// (image side / region side per axis). Values are |risk change| unless the
// signed variant was requested.
struct SensitivityMap {
  std::size_t visit = 0;
  std::size_t region_side = 8;
  double fill = 0.0;
  Tensor values;  // grid_rows x grid_cols
};

struct OcclusionResult {
  double baseline_risk = 0.0;
  std::vector<SensitivityMap> maps;  // one per visit
  std::size_t probe_count = 0;       // forward passes, baseline included
};

// Replaces one region of one visit's image with the fill value, re-scores,
// and records the risk change; every other pixel stays untouched during a
// probe. Probe count is exactly J* * (side/region_side)^2 + 1.
OcclusionResult occlusion_sensitivity(const ParameterStore& store,
                                      const ModelConfig& config,
                                      const ImageSequence& seq,
                                      std::size_t landmark_visits,
                                      std::size_t region_side = 8,
                                      double fill = 0.0,
                                      bool signed_values = false);

struct CurvePoint {
  double dt = 0.0;  // standardized time increment
  double probability = 1.0;
};

// Conditional survival curve over an ascending dt grid (standardized
// units); starts at probability 1 for dt = 0.
std::vector<CurvePoint> dynamic_survival_curve(
    double risk, const BaselineHazardTable& table, double t_star,
    std::span<const double> dt_grid);

// Self-contained SVG: grayscale underlay with a semi-transparent blue->red
// sensitivity overlay. Values are min-max normalized inside the given
// bounds (or the map's own range); a degenerate range maps to mid-ramp.
// Deterministic bytes for identical inputs.
std::string render_heatmap(
    const SensitivityMap& map, const Image& underlay,
    std::optional<std::pair<double, double>> bounds = std::nullopt);

std::string render_curve_svg(std::span<const CurvePoint> points,
                             const std::string& x_label = "months since t*");

void write_sensitivity_csv(const std::string& path,
                           std::span<const SensitivityMap> maps);

}  // namespace slf
