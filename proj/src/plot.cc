#include "itupred/plot.h"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

#include "itupred/io.h"

namespace itupred {

namespace {

constexpr double kWidth = 720.0;
constexpr const char* kFont = "font-family=\"Helvetica,Arial,sans-serif\"";

std::string open_svg(double width, double height, std::string_view title) {
  return fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0:.0f}\" height=\"{1:.0f}\" "
      "viewBox=\"0 0 {0:.0f} {1:.0f}\">\n"
      "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      "<text x=\"{2:.1f}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\" {3}>{4}</text>\n",
      width, height, width / 2.0, kFont, xml_escape(title));
}

std::string no_data(double width, double height) {
  return fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"middle\" font-size=\"14\" "
                     "fill=\"#666\" {}>no data</text>\n",
                     width / 2.0, height / 2.0, kFont);
}

// Round tick positions (1, 2 or 5 times a power of ten) covering [lo, hi].
std::vector<double> nice_ticks(double lo, double hi) {
  const double raw = (hi - lo) / 4.0;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = 10.0 * mag;
  for (double m : {1.0, 2.0, 5.0})
    if (raw <= m * mag) {
      step = m * mag;
      break;
    }
  std::vector<double> out;
  for (double v = std::ceil(lo / step - 1e-9) * step; v <= hi + step * 1e-9; v += step)
    out.push_back(std::abs(v) < step * 1e-9 ? 0.0 : v);
  return out;
}

std::string tick_label(double v) { return fmt::format("{:.4g}", v); }

// Blue (low) to red (high).
std::string value_color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const int r = static_cast<int>(std::lround(30 + t * (220 - 30)));
  const int g = static_cast<int>(std::lround(136 - t * (136 - 40)));
  const int b = static_cast<int>(std::lround(229 - t * (229 - 80)));
  return fmt::format("#{:02x}{:02x}{:02x}", r, g, b);
}

}  // namespace

std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string bar_chart_svg(std::string_view title, std::string_view axis_label,
                          const std::vector<BarItem>& bars) {
  const double row = 22.0, top = 48.0, left = 300.0, right = 40.0;
  const double height = top + std::max<double>(1.0, static_cast<double>(bars.size())) * row + 60.0;
  std::string svg = open_svg(kWidth, height, title);
  if (bars.empty()) return svg + no_data(kWidth, height) + "</svg>\n";

  double lo = 0.0, hi = 0.0;
  for (const auto& b : bars) {
    lo = std::min(lo, b.value);
    hi = std::max(hi, b.value);
  }
  if (hi - lo <= 0.0) hi = lo + 1.0;
  const double plot_w = kWidth - left - right;
  auto sx = [&](double v) { return left + (v - lo) / (hi - lo) * plot_w; };
  const double axis_y = top + static_cast<double>(bars.size()) * row;

  for (std::size_t i = 0; i < bars.size(); ++i) {
    const double y = top + static_cast<double>(i) * row;
    const double x0 = sx(std::min(0.0, bars[i].value)), x1 = sx(std::max(0.0, bars[i].value));
    svg += fmt::format(
        "<rect x=\"{:.2f}\" y=\"{:.2f}\" width=\"{:.2f}\" height=\"{:.2f}\" fill=\"{}\"/>\n", x0,
        y + 3.0, std::max(0.0, x1 - x0), row - 6.0, bars[i].value >= 0 ? "#d9534f" : "#2a7ab9");
    svg += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"end\" font-size=\"12\" "
                       "{}>{}</text>\n",
                       left - 6.0, y + row / 2.0 + 4.0, kFont, xml_escape(bars[i].label));
  }
  svg += fmt::format("<line x1=\"{0:.2f}\" y1=\"{1:.2f}\" x2=\"{0:.2f}\" y2=\"{2:.2f}\" "
                     "stroke=\"#333\" stroke-width=\"1\"/>\n",
                     sx(0.0), top, axis_y);
  svg += fmt::format("<line x1=\"{:.2f}\" y1=\"{:.2f}\" x2=\"{:.2f}\" y2=\"{:.2f}\" "
                     "stroke=\"#333\" stroke-width=\"1\"/>\n",
                     left, axis_y, left + plot_w, axis_y);
  for (double v : nice_ticks(lo, hi)) {
    svg += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"middle\" font-size=\"11\" "
                       "{}>{}</text>\n",
                       sx(v), axis_y + 16.0, kFont, tick_label(v));
  }
  svg += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"middle\" font-size=\"12\" "
                     "{}>{}</text>\n",
                     left + plot_w / 2.0, axis_y + 40.0, kFont, xml_escape(axis_label));
  return svg + "</svg>\n";
}

std::string calibration_svg(std::string_view title, const std::vector<CurveSeries>& series) {
  const double size = 440.0, left = 70.0, top = 48.0, height = top + size + 70.0;
  const double width = left + size + 180.0;
  std::string svg = open_svg(width, height, title);
  auto sx = [&](double v) { return left + v * size; };
  auto sy = [&](double v) { return top + (1.0 - v) * size; };
  svg += fmt::format("<rect x=\"{:.2f}\" y=\"{:.2f}\" width=\"{:.2f}\" height=\"{:.2f}\" "
                     "fill=\"none\" stroke=\"#333\"/>\n",
                     left, top, size, size);
  svg += fmt::format("<line x1=\"{:.2f}\" y1=\"{:.2f}\" x2=\"{:.2f}\" y2=\"{:.2f}\" "
                     "stroke=\"#d62728\" stroke-dasharray=\"6,4\"/>\n",
                     sx(0), sy(0), sx(1), sy(1));
  for (int t = 0; t <= 5; ++t) {
    const double v = t / 5.0;
    svg += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"middle\" font-size=\"11\" "
                       "{}>{:.1f}</text>\n",
                       sx(v), top + size + 16.0, kFont, v);
    svg += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"end\" font-size=\"11\" "
                       "{}>{:.1f}</text>\n",
                       left - 6.0, sy(v) + 4.0, kFont, v);
  }
  svg += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"middle\" font-size=\"12\" "
                     "{}>Mean predicted probability</text>\n",
                     left + size / 2.0, top + size + 40.0, kFont);
  svg += fmt::format("<text x=\"18\" y=\"{:.2f}\" text-anchor=\"middle\" font-size=\"12\" "
                     "transform=\"rotate(-90 18 {:.2f})\" {}>Observed ITU rate</text>\n",
                     top + size / 2.0, top + size / 2.0, kFont);

  bool any = false;
  for (std::size_t s = 0; s < series.size(); ++s) {
    const auto& cs = series[s];
    const double ly = top + 16.0 + static_cast<double>(s) * 20.0;
    svg += fmt::format("<line x1=\"{:.2f}\" y1=\"{:.2f}\" x2=\"{:.2f}\" y2=\"{:.2f}\" "
                       "stroke=\"{}\" stroke-width=\"2\"/>\n",
                       left + size + 16.0, ly, left + size + 40.0, ly, cs.color);
    svg += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" font-size=\"12\" {}>{}</text>\n",
                       left + size + 46.0, ly + 4.0, kFont, xml_escape(cs.name));
    if (cs.points.empty()) continue;
    any = true;
    std::string pts;
    for (const auto& [x, y] : cs.points) pts += fmt::format("{:.2f},{:.2f} ", sx(x), sy(y));
    pts.pop_back();
    svg += fmt::format("<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"/>\n",
                       pts, cs.color);
    for (const auto& [x, y] : cs.points)
      svg += fmt::format("<circle cx=\"{:.2f}\" cy=\"{:.2f}\" r=\"3\" fill=\"{}\"/>\n", sx(x),
                         sy(y), cs.color);
  }
  if (!any) svg += no_data(width, height);
  return svg + "</svg>\n";
}

std::string beeswarm_svg(std::string_view title, const std::vector<BeeswarmRow>& rows) {
  const double row = 28.0, top = 48.0, left = 300.0, right = 60.0;
  const double height = top + std::max<double>(1.0, static_cast<double>(rows.size())) * row + 60.0;
  std::string svg = open_svg(kWidth, height, title);
  double lo = 0.0, hi = 0.0;
  bool any = false;
  for (const auto& r : rows)
    for (double p : r.phi) {
      lo = std::min(lo, p);
      hi = std::max(hi, p);
      any = true;
    }
  if (!any) return svg + no_data(kWidth, height) + "</svg>\n";
  if (hi - lo <= 0.0) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double plot_w = kWidth - left - right;
  auto sx = [&](double v) { return left + (v - lo) / (hi - lo) * plot_w; };
  const double axis_y = top + static_cast<double>(rows.size()) * row;
  svg += fmt::format("<line x1=\"{0:.2f}\" y1=\"{1:.2f}\" x2=\"{0:.2f}\" y2=\"{2:.2f}\" "
                     "stroke=\"#999\"/>\n",
                     sx(0.0), top, axis_y);

  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const double cy = top + (static_cast<double>(i) + 0.5) * row;
    svg += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"end\" font-size=\"12\" "
                       "{}>{}</text>\n",
                       left - 6.0, cy + 4.0, kFont, xml_escape(r.feature));
    double vmin = 0.0, vmax = 0.0;
    if (!r.value.empty()) {
      vmin = *std::min_element(r.value.begin(), r.value.end());
      vmax = *std::max_element(r.value.begin(), r.value.end());
    }
    // Stack points falling into the same pixel column alternately above and
    // below the row centre.
    std::vector<std::size_t> order(r.phi.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return r.phi[a] < r.phi[b]; });
    std::vector<int> occupancy(static_cast<std::size_t>(plot_w / 3.0) + 2, 0);
    for (std::size_t k : order) {
      const double x = sx(r.phi[k]);
      const auto slot = static_cast<std::size_t>(std::max(0.0, (x - left) / 3.0));
      const int n = occupancy[std::min(slot, occupancy.size() - 1)]++;
      const double offset = (n % 2 == 0 ? 1.0 : -1.0) * std::ceil(n / 2.0) * 2.0;
      const double y = cy + std::clamp(offset, -row / 2.0 + 2.0, row / 2.0 - 2.0);
      const double v = k < r.value.size() ? r.value[k] : 0.0;
      const double t = vmax > vmin ? (v - vmin) / (vmax - vmin) : 0.5;
      svg += fmt::format("<circle cx=\"{:.2f}\" cy=\"{:.2f}\" r=\"2\" fill=\"{}\"/>\n", x, y,
                         value_color(t));
    }
  }
  svg += fmt::format("<line x1=\"{:.2f}\" y1=\"{:.2f}\" x2=\"{:.2f}\" y2=\"{:.2f}\" "
                     "stroke=\"#333\"/>\n",
                     left, axis_y, left + plot_w, axis_y);
  for (double v : nice_ticks(lo, hi)) {
    svg += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"middle\" font-size=\"11\" "
                       "{}>{}</text>\n",
                       sx(v), axis_y + 16.0, kFont, tick_label(v));
  }
  svg += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"middle\" font-size=\"12\" "
                     "{}>Shapley value (impact on ITU probability)</text>\n",
                     left + plot_w / 2.0, axis_y + 40.0, kFont);
  svg += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" font-size=\"11\" fill=\"{}\" {}>high</text>\n",
                     kWidth - right + 6.0, top + 10.0, value_color(1.0), kFont);
  svg += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" font-size=\"11\" fill=\"{}\" {}>low</text>\n",
                     kWidth - right + 6.0, top + 26.0, value_color(0.0), kFont);
  return svg + "</svg>\n";
}

void write_svg(const std::filesystem::path& path, const std::string& svg,
               std::string_view lineage) {
  auto out = io::open_output(path);
  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  std::string text(lineage);
  // "--" is not allowed inside XML comments.
  for (std::size_t p; (p = text.find("--")) != std::string::npos;) text.replace(p, 2, "- -");
  out << "<!-- " << text << " -->\n" << svg;
}

}  // namespace itupred
