#pragma once

#include <string>
#include <utility>
#include <vector>

namespace residual_lens::cli {

struct LineChart {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<std::pair<double, double>> points;  // (x, y), drawn in order
  bool log_y = false;                             // non-positive y values are skipped
  int width = 480;
  int height = 320;
};

// Static SVG line chart with axes, five ticks per axis and point markers.
std::string render_svg(const LineChart& chart);

}  // namespace residual_lens::cli
