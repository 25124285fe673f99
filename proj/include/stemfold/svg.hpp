#pragma once

// Minimal SVG figures: line charts and heatmaps.

#include <string>
#include <vector>

#include "stemfold/tensor.hpp"

namespace stemfold {

struct Series {
  std::string name;
  std::vector<double> x, y;
};

std::string line_chart_svg(const std::vector<Series>& series, const std::string& title,
                           const std::string& x_label, const std::string& y_label);

// Rows top to bottom, columns left to right; values are clamped to [lo, hi].
std::string heatmap_svg(const Tensor& matrix, const std::string& title, const std::string& x_label,
                        const std::string& y_label, double lo = 0.0, double hi = 1.0);

}  // namespace stemfold
