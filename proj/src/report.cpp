// SPDX-License-Identifier: Apache-2.0
#include "congater/report.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace congater {

using nlohmann::json;

namespace {

constexpr double kWidth = 640, kHeight = 400, kLeft = 60, kRight = 160, kTop = 40, kBottom = 50;

struct Series {
  std::string label;
  std::string color;
  std::vector<std::pair<double, double>> points;
};

std::string escape(const std::string& s) {
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

}  // namespace

std::string render_sweep_svg(const json& report, const std::string& title) {
  if (!report.contains("rows") || !report["rows"].is_array() || report["rows"].empty()) {
    throw std::invalid_argument("sweep report has no rows");
  }
  const auto attrs = report.value("attributes", std::vector<std::string>{});
  if (attrs.empty()) throw std::invalid_argument("sweep report lists no attributes");
  const std::string& x_attr = attrs.front();

  const std::vector<std::pair<std::string, std::string>> metrics = {
      {"task", "#1f77b4"}, {"probe_mean", "#d62728"}, {"mrr10", "#2ca02c"}, {"nfairr10", "#9467bd"},
      {"flip_retention", "#ff7f0e"}};
  std::vector<Series> series;
  for (const auto& [key, color] : metrics) {
    Series s{key, color, {}};
    for (const auto& row : report["rows"]) {
      const auto& omegas = row.at("omegas");
      bool others_zero = true;
      for (const auto& a : attrs) {
        if (a != x_attr && omegas.value(a, 0.0) != 0.0) others_zero = false;
      }
      if (!others_zero || !row.contains(key) || !row[key].is_number()) continue;
      s.points.emplace_back(omegas.at(x_attr).get<double>(), row[key].get<double>());
    }
    if (!s.points.empty()) series.push_back(std::move(s));
  }

  double lo = 1.0, hi = 0.0;
  for (const auto& s : series)
    for (const auto& [x, y] : s.points) {
      lo = std::min(lo, y);
      hi = std::max(hi, y);
    }
  lo = std::max(0.0, lo - 0.05);
  hi = std::min(1.0, hi + 0.05);
  if (hi <= lo) hi = lo + 0.1;
  const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
  auto px = [&](double x) { return kLeft + x * pw; };
  auto py = [&](double y) { return kTop + (1.0 - (y - lo) / (hi - lo)) * ph; };

  std::ostringstream os;
  os.precision(5);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kLeft << "\" y=\"24\" font-size=\"14\">" << escape(title.empty() ? "sweep over " + x_attr : title)
     << "</text>\n";
  os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop + ph << "\" x2=\"" << kLeft + pw << "\" y2=\"" << kTop + ph
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kTop + ph
     << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 10; i += 2) {
    const double x = i / 10.0;
    os << "<text x=\"" << px(x) << "\" y=\"" << kTop + ph + 18 << "\" text-anchor=\"middle\">" << x << "</text>\n";
  }
  for (int i = 0; i <= 4; ++i) {
    const double y = lo + (hi - lo) * i / 4.0;
    os << "<text x=\"" << kLeft - 6 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\">" << y << "</text>\n";
  }
  os << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kHeight - 10 << "\" text-anchor=\"middle\">omega("
     << escape(x_attr) << ")</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    os << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"2\" points=\"";
    for (const auto& [x, y] : s.points) os << px(x) << ',' << py(y) << ' ';
    os << "\"/>\n";
    const double ly = kTop + 16.0 * static_cast<double>(k);
    os << "<line x1=\"" << kLeft + pw + 12 << "\" y1=\"" << ly << "\" x2=\"" << kLeft + pw + 32 << "\" y2=\"" << ly
       << "\" stroke=\"" << s.color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << kLeft + pw + 38 << "\" y=\"" << ly + 4 << "\">" << escape(s.label) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace congater
