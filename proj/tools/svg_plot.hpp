#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace trajlab::plot {

struct Series {
  std::string name;
  /// Missing y values break the line.
  std::vector<std::pair<double, std::optional<double>>> points;
};

struct Axes {
  std::string title;
  std::string x_label;
  std::string y_label;
  /// Force integer ticks on x (layers).
  bool integer_x = false;
};

std::string line_plot(const Axes& axes, const std::vector<Series>& series);
std::string scatter_plot(const Axes& axes, const std::vector<Series>& series);

}  // namespace trajlab::plot
