#include "slf/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>

namespace slf {

OcclusionResult occlusion_sensitivity(const ParameterStore& store,
                                      const ModelConfig& config,
                                      const ImageSequence& seq,
                                      std::size_t landmark_visits,
                                      std::size_t region_side, double fill,
                                      bool signed_values) {
  if (landmark_visits == 0 || landmark_visits > seq.images.size())
    throw InputError("occlusion_sensitivity: bad landmark visit count");
  const std::size_t rows = seq.images[0].rows();
  const std::size_t cols = seq.images[0].cols();
  if (region_side == 0 || rows % region_side != 0 || cols % region_side != 0)
    throw InputError(
        "occlusion_sensitivity: region side must divide the image side");

  OcclusionResult result;
  result.baseline_risk = risk_score(seq, landmark_visits, store, config);
  result.probe_count = 1;

  const std::size_t grid_rows = rows / region_side;
  const std::size_t grid_cols = cols / region_side;
  ImageSequence probe = seq;  // one mutable copy reused across probes

  for (std::size_t j = 0; j < landmark_visits; ++j) {
    SensitivityMap map;
    map.visit = j;
    map.region_side = region_side;
    map.fill = fill;
    map.values = Tensor({grid_rows, grid_cols});
    for (std::size_t gr = 0; gr < grid_rows; ++gr) {
      for (std::size_t gc = 0; gc < grid_cols; ++gc) {
        // Occlude one region in this visit's image only.
        for (std::size_t a = 0; a < region_side; ++a)
          for (std::size_t b = 0; b < region_side; ++b)
            probe.images[j](gr * region_side + a, gc * region_side + b) = fill;
        const double occluded =
            risk_score(probe, landmark_visits, store, config);
        ++result.probe_count;
        const double delta = occluded - result.baseline_risk;
        map.values(gr, gc) = signed_values ? delta : std::abs(delta);
        // Restore the pixels before the next probe.
        for (std::size_t a = 0; a < region_side; ++a)
          for (std::size_t b = 0; b < region_side; ++b)
            probe.images[j](gr * region_side + a, gc * region_side + b) =
                seq.images[j](gr * region_side + a, gc * region_side + b);
      }
    }
    result.maps.push_back(std::move(map));
  }
  return result;
}

std::vector<CurvePoint> dynamic_survival_curve(
    double risk, const BaselineHazardTable& table, double t_star,
    std::span<const double> dt_grid) {
  std::vector<CurvePoint> curve;
  double prev = -1.0;
  for (double dt : dt_grid) {
    if (dt < prev)
      throw InputError("dynamic_survival_curve: grid must be ascending");
    prev = dt;
    curve.push_back({dt, dynamic_survival(risk, t_star, dt, table)});
  }
  return curve;
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

// Blue -> red ramp used for the sensitivity overlay.
void ramp_color(double v, int& r, int& g, int& b) {
  v = std::clamp(v, 0.0, 1.0);
  r = static_cast<int>(std::lround(255.0 * v));
  g = 0;
  b = static_cast<int>(std::lround(255.0 * (1.0 - v)));
}

}  // namespace

std::string render_heatmap(const SensitivityMap& map, const Image& underlay,
                           std::optional<std::pair<double, double>> bounds) {
  const std::size_t rows = underlay.rows(), cols = underlay.cols();
  if (map.values.rows() * map.region_side != rows ||
      map.values.cols() * map.region_side != cols)
    throw InputError("render_heatmap: map and underlay dims incompatible");

  double lo, hi;
  if (bounds) {
    lo = bounds->first;
    hi = bounds->second;
  } else {
    lo = hi = map.values[0];
    for (std::size_t k = 0; k < map.values.size(); ++k) {
      lo = std::min(lo, map.values[k]);
      hi = std::max(hi, map.values[k]);
    }
  }

  double ulo = underlay[0], uhi = underlay[0];
  for (std::size_t k = 0; k < underlay.size(); ++k) {
    ulo = std::min(ulo, underlay[k]);
    uhi = std::max(uhi, underlay[k]);
  }

  std::string svg;
  svg.reserve(64 * rows * cols);
  svg += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
         std::to_string(cols * 8) + "\" height=\"" + std::to_string(rows * 8) +
         "\" viewBox=\"0 0 " + std::to_string(cols) + " " +
         std::to_string(rows) + "\" shape-rendering=\"crispEdges\">\n";

  // Grayscale underlay, one rect per pixel.
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      const double norm =
          uhi > ulo ? (underlay(i, j) - ulo) / (uhi - ulo) : 0.5;
      const int gray = static_cast<int>(std::lround(255.0 * norm));
      char buf[160];
      std::snprintf(buf, sizeof buf,
                    "<rect x=\"%zu\" y=\"%zu\" width=\"1\" height=\"1\" "
                    "fill=\"rgb(%d,%d,%d)\"/>\n",
                    j, i, gray, gray, gray);
      svg += buf;
    }
  }

  // Semi-transparent sensitivity overlay per region; a degenerate range
  // maps everything to mid-ramp.
  for (std::size_t gr = 0; gr < map.values.rows(); ++gr) {
    for (std::size_t gc = 0; gc < map.values.cols(); ++gc) {
      const double norm =
          hi > lo ? (map.values(gr, gc) - lo) / (hi - lo) : 0.5;
      int r, g, b;
      ramp_color(norm, r, g, b);
      char buf[200];
      std::snprintf(buf, sizeof buf,
                    "<rect x=\"%zu\" y=\"%zu\" width=\"%zu\" height=\"%zu\" "
                    "fill=\"rgb(%d,%d,%d)\" fill-opacity=\"0.45\"/>\n",
                    gc * map.region_side, gr * map.region_side,
                    map.region_side, map.region_side, r, g, b);
      svg += buf;
    }
  }
  svg += "</svg>\n";
  return svg;
}

std::string render_curve_svg(std::span<const CurvePoint> points,
                             const std::string& x_label) {
  const double width = 480, height = 320, margin = 48;
  std::string svg;
  svg += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(width) +
         "\" height=\"" + fmt(height) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";

  double xmax = 1.0;
  for (const CurvePoint& p : points) xmax = std::max(xmax, p.dt);
  auto px = [&](double dt) {
    return margin + (width - 2 * margin) * (xmax > 0 ? dt / xmax : 0.0);
  };
  auto py = [&](double s) { return height - margin - (height - 2 * margin) * s; };

  // Axes.
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "<line x1=\"%s\" y1=\"%s\" x2=\"%s\" y2=\"%s\" "
                "stroke=\"black\"/>\n",
                fmt(margin).c_str(), fmt(py(0)).c_str(),
                fmt(width - margin).c_str(), fmt(py(0)).c_str());
  svg += buf;
  std::snprintf(buf, sizeof buf,
                "<line x1=\"%s\" y1=\"%s\" x2=\"%s\" y2=\"%s\" "
                "stroke=\"black\"/>\n",
                fmt(margin).c_str(), fmt(py(0)).c_str(), fmt(margin).c_str(),
                fmt(py(1)).c_str());
  svg += buf;

  if (!points.empty()) {
    svg += "<polyline fill=\"none\" stroke=\"rgb(178,34,34)\" "
           "stroke-width=\"2\" points=\"";
    for (const CurvePoint& p : points) {
      svg += fmt(px(p.dt)) + "," + fmt(py(p.probability)) + " ";
    }
    svg += "\"/>\n";
  }
  svg += "<text x=\"" + fmt(width / 2) + "\" y=\"" + fmt(height - 12) +
         "\" text-anchor=\"middle\" font-size=\"13\">" + x_label +
         "</text>\n";
  svg += "<text x=\"16\" y=\"" + fmt(height / 2) +
         "\" text-anchor=\"middle\" font-size=\"13\" "
         "transform=\"rotate(-90 16 " +
         fmt(height / 2) + ")\">conditional survival</text>\n";
  svg += "</svg>\n";
  return svg;
}

void write_sensitivity_csv(const std::string& path,
                           std::span<const SensitivityMap> maps) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write sensitivity csv: " + path);
  out << "visit,region_row,region_col,sensitivity\n";
  for (const SensitivityMap& map : maps) {
    for (std::size_t gr = 0; gr < map.values.rows(); ++gr)
      for (std::size_t gc = 0; gc < map.values.cols(); ++gc) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", map.values(gr, gc));
        out << map.visit << ',' << gr << ',' << gc << ',' << buf << '\n';
      }
  }
}

}  // namespace slf
