#pragma once

#include "crisp/common.hpp"

#include <string>
#include <vector>

namespace crisp {

// Minimal self-contained SVG scatter/line plotting, deterministic output
// (no timestamps, fixed float formatting).
struct SvgScatter {
  struct Point {
    double x, y;
    std::string group;
    double value;  // drives color intensity
  };
  struct Line {
    std::vector<std::pair<double, double>> pts;
    std::string color = "#333333";
    std::string label;
  };
  struct Marker {
    double x, y;
    std::string color = "#cc0000";
    std::string label;
  };

  std::string x_label, y_label, title;
  bool diagonal = false;
  std::vector<Point> points;
  std::vector<Line> lines;
  std::vector<Marker> markers;

  void add_point(double x, double y, const std::string& group, double value = 0.0) {
    points.push_back({x, y, group, value});
  }
  void add_line(std::vector<std::pair<double, double>> pts, const std::string& color,
                const std::string& label) {
    lines.push_back({std::move(pts), color, label});
  }
  void add_marker(double x, double y, const std::string& color, const std::string& label) {
    markers.push_back({x, y, color, label});
  }

  void write(const std::string& path) const;
};

}  // namespace crisp
