#pragma once

// Minimal SVG line plots. CSV stays the source of truth; these files are for
// eyeballing R-D curves and training traces.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "stvc/common.hpp"

namespace stvc {

struct PlotSeries {
  std::string label;
  std::vector<std::pair<double, double>> pts;
};

namespace detail {

inline std::string fmt_g(double v) {
  char b[32];
  std::snprintf(b, sizeof b, "%.4g", v);
  return b;
}

}  // namespace detail

inline void write_svg_plot(const std::string& path, const std::string& title,
                           const std::string& xlabel, const std::string& ylabel,
                           const std::vector<PlotSeries>& series) {
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                  "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  const double W = 720, H = 480, L = 70, R = 180, Tm = 44, B = 56;
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  for (const auto& s : series)
    for (auto [x, y] : s.pts) {
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  contract(std::isfinite(xmin) && std::isfinite(ymin), "plot: no finite points");
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  double xpad = 0.05 * (xmax - xmin), ypad = 0.05 * (ymax - ymin);
  xmin -= xpad, xmax += xpad, ymin -= ypad, ymax += ypad;
  auto sx = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
  auto sy = [&](double y) { return H - B - (y - ymin) / (ymax - ymin) * (H - Tm - B); };

  std::ofstream f(path, std::ios::trunc);
  contract(f.good(), "plot: cannot open " + path);
  f << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H
    << "' viewBox='0 0 " << W << " " << H << "'>\n"
    << "<rect width='100%' height='100%' fill='white'/>\n"
    << "<text x='" << W / 2 << "' y='24' text-anchor='middle' font-size='16' "
    << "font-family='sans-serif'>" << title << "</text>\n";

  for (int i = 0; i <= 5; ++i) {
    double fx = xmin + (xmax - xmin) * i / 5.0, fy = ymin + (ymax - ymin) * i / 5.0;
    f << "<line x1='" << sx(fx) << "' y1='" << Tm << "' x2='" << sx(fx) << "' y2='" << H - B
      << "' stroke='#ddd'/>\n"
      << "<line x1='" << L << "' y1='" << sy(fy) << "' x2='" << W - R << "' y2='" << sy(fy)
      << "' stroke='#ddd'/>\n"
      << "<text x='" << sx(fx) << "' y='" << H - B + 18
      << "' text-anchor='middle' font-size='11' font-family='sans-serif'>" << detail::fmt_g(fx)
      << "</text>\n"
      << "<text x='" << L - 6 << "' y='" << sy(fy) + 4
      << "' text-anchor='end' font-size='11' font-family='sans-serif'>" << detail::fmt_g(fy)
      << "</text>\n";
  }
  f << "<text x='" << (L + W - R) / 2 << "' y='" << H - 14
    << "' text-anchor='middle' font-size='13' font-family='sans-serif'>" << xlabel << "</text>\n"
    << "<text x='18' y='" << (Tm + H - B) / 2
    << "' text-anchor='middle' font-size='13' font-family='sans-serif' transform='rotate(-90 18 "
    << (Tm + H - B) / 2 << ")'>" << ylabel << "</text>\n"
    << "<rect x='" << L << "' y='" << Tm << "' width='" << W - L - R << "' height='"
    << H - Tm - B << "' fill='none' stroke='#333'/>\n";

  for (size_t si = 0; si < series.size(); ++si) {
    const char* col = kColors[si % 8];
    std::vector<std::pair<double, double>> pts = series[si].pts;
    std::sort(pts.begin(), pts.end());
    f << "<polyline fill='none' stroke='" << col << "' stroke-width='1.8' points='";
    for (auto [x, y] : pts) f << sx(x) << "," << sy(y) << " ";
    f << "'/>\n";
    for (auto [x, y] : pts)
      f << "<circle cx='" << sx(x) << "' cy='" << sy(y) << "' r='3' fill='" << col << "'/>\n";
    double ly = Tm + 16 + 18 * (double)si;
    f << "<line x1='" << W - R + 12 << "' y1='" << ly - 4 << "' x2='" << W - R + 34 << "' y2='"
      << ly - 4 << "' stroke='" << col << "' stroke-width='2'/>\n"
      << "<text x='" << W - R + 40 << "' y='" << ly
      << "' font-size='12' font-family='sans-serif'>" << series[si].label << "</text>\n";
  }
  f << "</svg>\n";
  contract(f.good(), "plot: short write to " + path);
}

}  // namespace stvc
