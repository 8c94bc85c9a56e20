#include "crisp/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

namespace crisp {

namespace {

constexpr double kW = 640, kH = 480;
constexpr double kMargin = 56;

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.3f", v);
  return buf;
}

const std::map<std::string, std::string> kGroupColors = {
    {"target", "#d62728"}, {"benign", "#1f77b4"},  {"shared", "#9467bd"},
    {"inactive", "#bbbbbb"}, {"crisp", "#d62728"}, {"rmu", "#1f77b4"}};

std::string group_color(const std::string& g) {
  auto it = kGroupColors.find(g);
  return it == kGroupColors.end() ? std::string("#7f7f7f") : it->second;
}

}  // namespace

void SvgScatter::write(const std::string& path) const {
  double xmin = 0, xmax = 1e-9, ymin = 0, ymax = 1e-9;
  auto expand = [&](double x, double y) {
    xmin = std::min(xmin, x);
    xmax = std::max(xmax, x);
    ymin = std::min(ymin, y);
    ymax = std::max(ymax, y);
  };
  for (const auto& p : points) expand(p.x, p.y);
  for (const auto& l : lines)
    for (const auto& [x, y] : l.pts) expand(x, y);
  for (const auto& m : markers) expand(m.x, m.y);
  xmax *= 1.05;
  ymax *= 1.05;

  auto sx = [&](double x) { return kMargin + (x - xmin) / (xmax - xmin) * (kW - 2 * kMargin); };
  auto sy = [&](double y) { return kH - kMargin - (y - ymin) / (ymax - ymin) * (kH - 2 * kMargin); };

  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open for write: " + path);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
     << "\" viewBox=\"0 0 " << kW << " " << kH << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<rect x=\"" << kMargin << "\" y=\"" << kMargin << "\" width=\"" << kW - 2 * kMargin
     << "\" height=\"" << kH - 2 * kMargin
     << "\" fill=\"none\" stroke=\"#444444\" stroke-width=\"1\"/>\n";
  if (!title.empty())
    os << "<text x=\"" << kW / 2 << "\" y=\"" << kMargin / 2
       << "\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  os << "<text x=\"" << kW / 2 << "\" y=\"" << kH - 12
     << "\" text-anchor=\"middle\" font-size=\"12\">" << x_label << "</text>\n";
  os << "<text x=\"14\" y=\"" << kH / 2 << "\" text-anchor=\"middle\" font-size=\"12\" "
     << "transform=\"rotate(-90 14 " << kH / 2 << ")\">" << y_label << "</text>\n";
  // axis extents
  os << "<text x=\"" << kMargin << "\" y=\"" << kH - kMargin + 16
     << "\" font-size=\"10\">" << fmt(xmin) << "</text>\n";
  os << "<text x=\"" << kW - kMargin << "\" y=\"" << kH - kMargin + 16
     << "\" text-anchor=\"end\" font-size=\"10\">" << fmt(xmax) << "</text>\n";
  os << "<text x=\"" << kMargin - 4 << "\" y=\"" << kH - kMargin
     << "\" text-anchor=\"end\" font-size=\"10\">" << fmt(ymin) << "</text>\n";
  os << "<text x=\"" << kMargin - 4 << "\" y=\"" << kMargin + 4
     << "\" text-anchor=\"end\" font-size=\"10\">" << fmt(ymax) << "</text>\n";

  if (diagonal) {
    const double lo = std::max(xmin, ymin), hi = std::min(xmax, ymax);
    if (hi > lo)
      os << "<line x1=\"" << fmt(sx(lo)) << "\" y1=\"" << fmt(sy(lo)) << "\" x2=\""
         << fmt(sx(hi)) << "\" y2=\"" << fmt(sy(hi))
         << "\" stroke=\"#999999\" stroke-dasharray=\"4 3\"/>\n";
  }

  for (const auto& p : points) {
    const double opacity = std::clamp(0.35 + 0.1 * std::abs(p.value), 0.35, 0.95);
    os << "<circle cx=\"" << fmt(sx(p.x)) << "\" cy=\"" << fmt(sy(p.y))
       << "\" r=\"3\" fill=\"" << group_color(p.group) << "\" fill-opacity=\"" << fmt(opacity)
       << "\"/>\n";
  }
  for (const auto& l : lines) {
    if (l.pts.empty()) continue;
    os << "<polyline fill=\"none\" stroke=\"" << l.color << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : l.pts) os << fmt(sx(x)) << "," << fmt(sy(y)) << " ";
    os << "\"/>\n";
  }
  for (const auto& m : markers) {
    const double x = sx(m.x), y = sy(m.y);
    // star marker
    os << "<path d=\"M" << fmt(x) << " " << fmt(y - 7) << " L" << fmt(x + 2) << " " << fmt(y - 2)
       << " L" << fmt(x + 7) << " " << fmt(y - 2) << " L" << fmt(x + 3) << " " << fmt(y + 2)
       << " L" << fmt(x + 5) << " " << fmt(y + 7) << " L" << fmt(x) << " " << fmt(y + 4) << " L"
       << fmt(x - 5) << " " << fmt(y + 7) << " L" << fmt(x - 3) << " " << fmt(y + 2) << " L"
       << fmt(x - 7) << " " << fmt(y - 2) << " L" << fmt(x - 2) << " " << fmt(y - 2)
       << " Z\" fill=\"" << m.color << "\"/>\n";
    if (!m.label.empty())
      os << "<text x=\"" << fmt(x + 9) << "\" y=\"" << fmt(y + 4) << "\" font-size=\"10\">"
         << m.label << "</text>\n";
  }
  os << "</svg>\n";
}

}  // namespace crisp
