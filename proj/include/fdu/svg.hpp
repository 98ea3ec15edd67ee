#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace fdu {

// Minimal SVG chart emitter for the report stage. Charts are written as
// self-contained .svg files; values print with fixed precision so repeated
// runs of the same pipeline produce byte-identical images.

namespace svg_detail {

inline const char* series_color(std::size_t i) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                  "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  return palette[i % 8];
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << v;
  return os.str();
}

}  // namespace svg_detail

struct ChartSeries {
  std::string label;
  std::vector<double> values;
};

/// Line chart over categorical x labels (e.g. layer names), one polyline per
/// series, y fixed to [0, 1] unless the data exceeds it.
inline void write_line_chart_svg(const std::filesystem::path& path, const std::string& title,
                                 const std::vector<std::string>& x_labels,
                                 const std::vector<ChartSeries>& series) {
  const double width = 640, height = 400;
  const double ml = 60, mr = 160, mt = 40, mb = 60;
  const double pw = width - ml - mr, ph = height - mt - mb;
  double ymax = 1.0;
  for (const auto& s : series) {
    for (const double v : s.values) ymax = std::max(ymax, v);
  }
  std::ofstream os(path, std::ios::trunc);
  os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height
     << "' font-family='sans-serif' font-size='12'>\n";
  os << "<text x='" << width / 2 << "' y='20' text-anchor='middle' font-size='14'>" << title
     << "</text>\n";
  os << "<rect x='" << ml << "' y='" << mt << "' width='" << pw << "' height='" << ph
     << "' fill='none' stroke='#333'/>\n";
  for (int g = 0; g <= 4; ++g) {
    const double yv = ymax * g / 4.0;
    const double y = mt + ph - ph * (yv / ymax);
    os << "<line x1='" << ml << "' y1='" << y << "' x2='" << ml + pw << "' y2='" << y
       << "' stroke='#ddd'/>\n";
    os << "<text x='" << ml - 8 << "' y='" << y + 4 << "' text-anchor='end'>"
       << svg_detail::fmt(yv) << "</text>\n";
  }
  const std::size_t n = x_labels.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = ml + (n == 1 ? pw / 2 : pw * static_cast<double>(i) / static_cast<double>(n - 1));
    os << "<text x='" << x << "' y='" << mt + ph + 18 << "' text-anchor='middle'>" << x_labels[i]
       << "</text>\n";
  }
  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    os << "<polyline fill='none' stroke='" << svg_detail::series_color(si)
       << "' stroke-width='2' points='";
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      const double x =
          ml + (n == 1 ? pw / 2 : pw * static_cast<double>(i) / static_cast<double>(n - 1));
      const double y = mt + ph - ph * (s.values[i] / ymax);
      os << svg_detail::fmt(x) << "," << svg_detail::fmt(y) << " ";
    }
    os << "'/>\n";
    const double ly = mt + 16 * static_cast<double>(si);
    os << "<rect x='" << ml + pw + 10 << "' y='" << ly << "' width='12' height='12' fill='"
       << svg_detail::series_color(si) << "'/>\n";
    os << "<text x='" << ml + pw + 26 << "' y='" << ly + 10 << "'>" << s.label << "</text>\n";
  }
  os << "</svg>\n";
}

/// Grouped bar chart: one group per x label, one bar per series.
inline void write_bar_chart_svg(const std::filesystem::path& path, const std::string& title,
                                const std::vector<std::string>& x_labels,
                                const std::vector<ChartSeries>& series) {
  const double width = 720, height = 400;
  const double ml = 60, mr = 160, mt = 40, mb = 70;
  const double pw = width - ml - mr, ph = height - mt - mb;
  double ymax = 1.0;
  for (const auto& s : series) {
    for (const double v : s.values) ymax = std::max(ymax, v);
  }
  std::ofstream os(path, std::ios::trunc);
  os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height
     << "' font-family='sans-serif' font-size='12'>\n";
  os << "<text x='" << width / 2 << "' y='20' text-anchor='middle' font-size='14'>" << title
     << "</text>\n";
  os << "<rect x='" << ml << "' y='" << mt << "' width='" << pw << "' height='" << ph
     << "' fill='none' stroke='#333'/>\n";
  for (int g = 0; g <= 4; ++g) {
    const double yv = ymax * g / 4.0;
    const double y = mt + ph - ph * (yv / ymax);
    os << "<line x1='" << ml << "' y1='" << y << "' x2='" << ml + pw << "' y2='" << y
       << "' stroke='#ddd'/>\n";
    os << "<text x='" << ml - 8 << "' y='" << y + 4 << "' text-anchor='end'>"
       << svg_detail::fmt(yv) << "</text>\n";
  }
  const std::size_t groups = x_labels.size();
  const std::size_t bars = std::max<std::size_t>(series.size(), 1);
  const double group_w = pw / static_cast<double>(groups);
  const double bar_w = group_w * 0.8 / static_cast<double>(bars);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const double gx = ml + group_w * static_cast<double>(gi);
    os << "<text x='" << gx + group_w / 2 << "' y='" << mt + ph + 18
       << "' text-anchor='middle' font-size='10'>" << x_labels[gi] << "</text>\n";
    for (std::size_t si = 0; si < series.size(); ++si) {
      if (gi >= series[si].values.size()) continue;
      const double v = series[si].values[gi];
      const double h = ph * (v / ymax);
      const double x = gx + group_w * 0.1 + bar_w * static_cast<double>(si);
      os << "<rect x='" << svg_detail::fmt(x) << "' y='" << svg_detail::fmt(mt + ph - h)
         << "' width='" << svg_detail::fmt(bar_w) << "' height='" << svg_detail::fmt(h)
         << "' fill='" << svg_detail::series_color(si) << "'/>\n";
    }
  }
  for (std::size_t si = 0; si < series.size(); ++si) {
    const double ly = mt + 16 * static_cast<double>(si);
    os << "<rect x='" << ml + pw + 10 << "' y='" << ly << "' width='12' height='12' fill='"
       << svg_detail::series_color(si) << "'/>\n";
    os << "<text x='" << ml + pw + 26 << "' y='" << ly + 10 << "'>" << series[si].label
       << "</text>\n";
  }
  os << "</svg>\n";
}

}  // namespace fdu
