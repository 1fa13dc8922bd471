#include "repdib/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace repdib {

namespace {

constexpr int kWidth = 640, kHeight = 400;
constexpr int kMarginLeft = 64, kMarginRight = 16;
constexpr int kMarginTop = 32, kMarginBottom = 44;

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c",
                          "#9467bd", "#ff7f0e", "#8c564b"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

}  // namespace

std::string svg_line_chart(const std::vector<Series>& series,
                           const std::string& title, const std::string& x_label,
                           const std::string& y_label) {
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  if (!(xmin < xmax)) xmax = xmin + 1;
  if (!(ymin < ymax)) ymax = ymin + 1;

  const double px = kWidth - kMarginLeft - kMarginRight;
  const double py = kHeight - kMarginTop - kMarginBottom;
  auto sx = [&](double x) {
    return kMarginLeft + (x - xmin) / (xmax - xmin) * px;
  };
  auto sy = [&](double y) {
    return kHeight - kMarginBottom - (y - ymin) / (ymax - ymin) * py;
  };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth
     << "\" height=\"" << kHeight << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kWidth / 2 << "\" y=\"20\" text-anchor=\"middle\" "
        "font-family=\"sans-serif\" font-size=\"14\">" << title << "</text>\n";

  // axes
  os << "<line x1=\"" << kMarginLeft << "\" y1=\"" << kMarginTop << "\" x2=\""
     << kMarginLeft << "\" y2=\"" << kHeight - kMarginBottom
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << kMarginLeft << "\" y1=\"" << kHeight - kMarginBottom
     << "\" x2=\"" << kWidth - kMarginRight << "\" y2=\""
     << kHeight - kMarginBottom << "\" stroke=\"black\"/>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const double xv = xmin + (xmax - xmin) * tick / 4.0;
    const double yv = ymin + (ymax - ymin) * tick / 4.0;
    os << "<text x=\"" << sx(xv) << "\" y=\"" << kHeight - kMarginBottom + 16
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
          "font-size=\"10\">" << num(xv) << "</text>\n";
    os << "<text x=\"" << kMarginLeft - 6 << "\" y=\"" << sy(yv) + 3
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
          "font-size=\"10\">" << num(yv) << "</text>\n";
  }
  os << "<text x=\"" << kWidth / 2 << "\" y=\"" << kHeight - 8
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
        "font-size=\"11\">" << x_label << "</text>\n";
  os << "<text x=\"14\" y=\"" << kHeight / 2
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\" "
        "transform=\"rotate(-90 14 " << kHeight / 2 << ")\">" << y_label
     << "</text>\n";

  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    os << "<polyline fill=\"none\" stroke=\"" << kPalette[si % 6]
       << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      os << num(sx(s.x[i])) << "," << num(sy(s.y[i])) << " ";
    os << "\"/>\n";
    os << "<text x=\"" << kWidth - kMarginRight - 4 << "\" y=\""
       << kMarginTop + 14 * (si + 1)
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\" "
          "fill=\"" << kPalette[si % 6] << "\">" << s.label << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string svg_heatmap(const Tensor<double>& values, const std::string& title) {
  double vmin = std::numeric_limits<double>::infinity(), vmax = -vmin;
  for (double v : values.v) {
    vmin = std::min(vmin, v);
    vmax = std::max(vmax, v);
  }
  if (!(vmin < vmax)) vmax = vmin + 1;

  const int cell = 48, pad = 40;
  const int w = values.cols * cell + 2 * pad;
  const int h = values.rows * cell + 2 * pad;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w
     << "\" height=\"" << h << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << w / 2 << "\" y=\"24\" text-anchor=\"middle\" "
        "font-family=\"sans-serif\" font-size=\"14\">" << title << "</text>\n";
  for (int r = 0; r < values.rows; ++r)
    for (int c = 0; c < values.cols; ++c) {
      const double t = (values.at(r, c) - vmin) / (vmax - vmin);
      const int shade = static_cast<int>(std::lround(255 * (1.0 - t)));
      os << "<rect x=\"" << pad + c * cell << "\" y=\"" << pad + r * cell
         << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\"rgb("
         << shade << "," << shade << ",255)\" stroke=\"#444\"/>\n";
      os << "<text x=\"" << pad + c * cell + cell / 2 << "\" y=\""
         << pad + r * cell + cell / 2 + 4
         << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
            "font-size=\"10\">" << num(values.at(r, c)) << "</text>\n";
    }
  os << "</svg>\n";
  return os.str();
}

}  // namespace repdib
