#include "svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace residual_lens::cli {

namespace {

std::string fmt(double v, const char* spec = "%.4g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string render_svg(const LineChart& chart) {
  constexpr double kLeft = 64, kRight = 16, kTop = 32, kBottom = 48;
  const double w = chart.width, h = chart.height;
  const double plot_w = w - kLeft - kRight, plot_h = h - kTop - kBottom;

  std::vector<std::pair<double, double>> pts;
  for (auto [x, y] : chart.points) {
    if (!std::isfinite(x) || !std::isfinite(y)) continue;
    if (chart.log_y) {
      if (y <= 0.0) continue;
      y = std::log10(y);
    }
    pts.emplace_back(x, y);
  }

  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (!pts.empty()) {
    x0 = x1 = pts.front().first;
    y0 = y1 = pts.front().second;
    for (auto [x, y] : pts) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) {
    y0 -= 0.5;
    y1 += 0.5;
  }
  const auto sx = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * plot_w; };
  const auto sy = [&](double y) { return kTop + (1.0 - (y - y0) / (y1 - y0)) * plot_h; };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << chart.width << "\" height=\"" << chart.height
    << "\" viewBox=\"0 0 " << chart.width << ' ' << chart.height << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << fmt(w / 2) << "\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">"
    << escape(chart.title) << "</text>\n";
  s << "<line x1=\"" << kLeft << "\" y1=\"" << fmt(kTop + plot_h) << "\" x2=\"" << fmt(kLeft + plot_w) << "\" y2=\""
    << fmt(kTop + plot_h) << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << fmt(kTop + plot_h)
    << "\" stroke=\"black\"/>\n";

  for (int k = 0; k <= 4; ++k) {
    const double xv = x0 + (x1 - x0) * k / 4.0;
    const double yv = y0 + (y1 - y0) * k / 4.0;
    const double px = sx(xv), py = sy(yv);
    s << "<line x1=\"" << fmt(px) << "\" y1=\"" << fmt(kTop + plot_h) << "\" x2=\"" << fmt(px) << "\" y2=\""
      << fmt(kTop + plot_h + 4) << "\" stroke=\"black\"/>\n";
    s << "<text x=\"" << fmt(px) << "\" y=\"" << fmt(kTop + plot_h + 16)
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">" << fmt(xv, "%.3g") << "</text>\n";
    s << "<line x1=\"" << fmt(kLeft - 4) << "\" y1=\"" << fmt(py) << "\" x2=\"" << kLeft << "\" y2=\"" << fmt(py)
      << "\" stroke=\"black\"/>\n";
    const std::string label = chart.log_y ? "1e" + fmt(yv, "%.2g") : fmt(yv, "%.3g");
    s << "<text x=\"" << fmt(kLeft - 6) << "\" y=\"" << fmt(py + 3)
      << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" << label << "</text>\n";
  }
  s << "<text x=\"" << fmt(kLeft + plot_w / 2) << "\" y=\"" << fmt(h - 10)
    << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << escape(chart.x_label)
    << "</text>\n";
  s << "<text x=\"14\" y=\"" << fmt(kTop + plot_h / 2) << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
    << "font-size=\"12\" transform=\"rotate(-90 14 " << fmt(kTop + plot_h / 2) << ")\">" << escape(chart.y_label)
    << "</text>\n";

  if (!pts.empty()) {
    s << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < pts.size(); ++i) {
      s << (i ? " " : "") << fmt(sx(pts[i].first)) << ',' << fmt(sy(pts[i].second));
    }
    s << "\"/>\n";
    for (auto [x, y] : pts) {
      s << "<circle cx=\"" << fmt(sx(x)) << "\" cy=\"" << fmt(sy(y)) << "\" r=\"2.5\" fill=\"#1f77b4\"/>\n";
    }
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace residual_lens::cli
