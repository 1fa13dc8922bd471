#pragma once

#include <string>
#include <utility>
#include <vector>

#include "repdib/tensor.hpp"

namespace repdib {

// Minimal static SVG emitters for run artifacts; no interactive machinery.

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

std::string svg_line_chart(const std::vector<Series>& series,
                           const std::string& title, const std::string& x_label,
                           const std::string& y_label);

std::string svg_heatmap(const Tensor<double>& values, const std::string& title);

}  // namespace repdib
