#include "stemfold/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "stemfold/errors.hpp"

namespace stemfold {

namespace {

constexpr double kWidth = 640, kHeight = 420, kLeft = 70, kRight = 150, kTop = 40, kBottom = 50;
const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

void header(std::ostringstream& os, double w, double h, const std::string& title) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
     << "\" viewBox=\"0 0 " << w << ' ' << h << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << w / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
     << escape(title) << "</text>\n";
}

}  // namespace

std::string line_chart_svg(const std::vector<Series>& series, const std::string& title,
                           const std::string& x_label, const std::string& y_label) {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw InvalidArgument("series '" + s.name + "' has mismatched x/y");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  y0 = std::min(y0, 0.0);
  const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
  auto px = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return kTop + ph - (y - y0) / (y1 - y0) * ph; };

  std::ostringstream os;
  header(os, kWidth, kHeight, title);
  os << "<g stroke=\"black\"><line x1=\"" << kLeft << "\" y1=\"" << kTop + ph << "\" x2=\""
     << kLeft + pw << "\" y2=\"" << kTop + ph << "\"/><line x1=\"" << kLeft << "\" y1=\"" << kTop
     << "\" x2=\"" << kLeft << "\" y2=\"" << kTop + ph << "\"/></g>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = x0 + (x1 - x0) * k / 4.0, yv = y0 + (y1 - y0) * k / 4.0;
    os << "<text x=\"" << num(px(xv)) << "\" y=\"" << kTop + ph + 16
       << "\" text-anchor=\"middle\">" << tick(xv) << "</text>\n";
    os << "<text x=\"" << kLeft - 6 << "\" y=\"" << num(py(yv) + 4)
       << "\" text-anchor=\"end\">" << tick(yv) << "</text>\n";
  }
  os << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kHeight - 10
     << "\" text-anchor=\"middle\">" << escape(x_label) << "</text>\n";
  os << "<text x=\"16\" y=\"" << kTop + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
     << kTop + ph / 2 << ")\">" << escape(y_label) << "</text>\n";

  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = kPalette[s % std::size(kPalette)];
    const auto& ser = series[s];
    os << "<g class=\"series\" data-name=\"" << escape(ser.name) << "\">\n<polyline fill=\"none\" stroke=\""
       << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < ser.x.size(); ++i) {
      os << (i ? " " : "") << num(px(ser.x[i])) << ',' << num(py(ser.y[i]));
    }
    os << "\"/>\n";
    for (std::size_t i = 0; i < ser.x.size(); ++i) {
      os << "<circle class=\"point\" cx=\"" << num(px(ser.x[i])) << "\" cy=\"" << num(py(ser.y[i]))
         << "\" r=\"2.5\" fill=\"" << color << "\"/>\n";
    }
    os << "</g>\n";
    const double ly = kTop + 14 + 18.0 * static_cast<double>(s);
    os << "<rect x=\"" << kLeft + pw + 14 << "\" y=\"" << ly - 9 << "\" width=\"12\" height=\"12\" fill=\""
       << color << "\"/><text x=\"" << kLeft + pw + 32 << "\" y=\"" << ly + 1 << "\">"
       << escape(ser.name) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string heatmap_svg(const Tensor& matrix, const std::string& title, const std::string& x_label,
                        const std::string& y_label, double lo, double hi) {
  if (matrix.rank() != 2) throw InvalidArgument("heatmap needs a matrix");
  if (!(hi > lo)) throw InvalidArgument("heatmap range must be increasing");
  const std::size_t rows = matrix.rows(), cols = matrix.cols();
  const double cell = std::clamp(520.0 / static_cast<double>(std::max(rows, cols)), 6.0, 24.0);
  const double w = kLeft + cell * static_cast<double>(cols) + 40;
  const double h = kTop + cell * static_cast<double>(rows) + kBottom;
  std::ostringstream os;
  header(os, w, h, title);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = std::clamp((matrix.at(r, c) - lo) / (hi - lo), 0.0, 1.0);
      // White to dark blue.
      const int red = static_cast<int>(std::lround(255 * (1 - 0.9 * v)));
      const int green = static_cast<int>(std::lround(255 * (1 - 0.7 * v)));
      const int blue = static_cast<int>(std::lround(255 * (1 - 0.3 * v)));
      os << "<rect x=\"" << num(kLeft + cell * static_cast<double>(c)) << "\" y=\""
         << num(kTop + cell * static_cast<double>(r)) << "\" width=\"" << num(cell) << "\" height=\""
         << num(cell) << "\" fill=\"rgb(" << red << ',' << green << ',' << blue << ")\"><title>"
         << r << ',' << c << ": " << tick(matrix.at(r, c)) << "</title></rect>\n";
    }
    os << "<text x=\"" << kLeft - 6 << "\" y=\"" << num(kTop + cell * (static_cast<double>(r) + 0.7))
       << "\" text-anchor=\"end\">" << r << "</text>\n";
  }
  os << "<text x=\"" << kLeft + cell * static_cast<double>(cols) / 2 << "\" y=\"" << h - 12
     << "\" text-anchor=\"middle\">" << escape(x_label) << "</text>\n";
  os << "<text x=\"16\" y=\"" << kTop + cell * static_cast<double>(rows) / 2
     << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << kTop + cell * static_cast<double>(rows) / 2
     << ")\">" << escape(y_label) << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

}  // namespace stemfold
