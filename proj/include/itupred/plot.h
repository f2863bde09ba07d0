#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace itupred {

// Self-contained SVG charts. Output is a pure function of the inputs.

struct BarItem {
  std::string label;
  double value = 0.0;
};

/// Horizontal bars in the given order. Positive bars are drawn in one color
/// and negative bars in another, around a zero axis.
std::string bar_chart_svg(std::string_view title, std::string_view axis_label,
                          const std::vector<BarItem>& bars);

struct CurveSeries {
  std::string name;
  std::string color;
  std::vector<std::pair<double, double>> points;  // (mean predicted, observed)
};

/// Reliability diagram over [0,1]^2 with a dashed reference diagonal.
std::string calibration_svg(std::string_view title, const std::vector<CurveSeries>& series);

struct BeeswarmRow {
  std::string feature;
  std::vector<double> phi;
  std::vector<double> value;  // colors points from low (blue) to high (red)
};

/// One row per feature, top to bottom in the given order.
std::string beeswarm_svg(std::string_view title, const std::vector<BeeswarmRow>& rows);

/// Writes `svg` preceded by an XML comment carrying `lineage`.
void write_svg(const std::filesystem::path& path, const std::string& svg,
               std::string_view lineage);

std::string xml_escape(std::string_view s);

}  // namespace itupred
