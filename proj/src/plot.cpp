// SPDX-License-Identifier: Apache-2.0

#include "ctlab/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "ctlab/errors.hpp"

namespace ctlab {

namespace {

constexpr double kWidth = 640, kHeight = 400;
constexpr double kLeft = 70, kRight = 160, kTop = 40, kBottom = 50;
constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

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

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  void add(double v) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  // Empty or degenerate ranges get a unit span so the mapping stays finite.
  void settle() {
    if (!(lo <= hi)) lo = 0, hi = 1;
    if (hi - lo < 1e-12) lo -= 0.5, hi += 0.5;
  }
};

struct Frame {
  Range x, y;
  double px(double v) const { return kLeft + (v - x.lo) / (x.hi - x.lo) * (kWidth - kLeft - kRight); }
  double py(double v) const { return kHeight - kBottom - (v - y.lo) / (y.hi - y.lo) * (kHeight - kTop - kBottom); }
};

void open_svg(std::ostringstream& os, const std::string& title) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title)
     << "</text>\n";
}

void y_axis(std::ostringstream& os, const Frame& f, const std::string& y_label) {
  for (int k = 0; k <= 4; ++k) {
    const double v = f.y.lo + (f.y.hi - f.y.lo) * k / 4.0;
    const double y = f.py(v);
    os << "<line x1=\"" << kLeft << "\" y1=\"" << num(y) << "\" x2=\"" << kWidth - kRight << "\" y2=\"" << num(y)
       << "\" stroke=\"#ddd\"/>\n"
       << "<text x=\"" << kLeft - 6 << "\" y=\"" << num(y + 4) << "\" text-anchor=\"end\">" << num(v) << "</text>\n";
  }
  os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kHeight - kBottom
     << "\" stroke=\"black\"/>\n"
     << "<text transform=\"translate(16," << (kTop + kHeight - kBottom) / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
     << escape(y_label) << "</text>\n";
}

}  // namespace

std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series) {
  Frame f;
  for (const auto& s : series) {
    for (const auto& [x, y] : s.points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      f.x.add(x);
      f.y.add(y);
    }
  }
  f.x.settle();
  f.y.settle();

  std::ostringstream os;
  open_svg(os, title);
  y_axis(os, f, y_label);
  for (int k = 0; k <= 4; ++k) {
    const double v = f.x.lo + (f.x.hi - f.x.lo) * k / 4.0;
    os << "<text x=\"" << num(f.px(v)) << "\" y=\"" << kHeight - kBottom + 16 << "\" text-anchor=\"middle\">"
       << num(v) << "</text>\n";
  }
  os << "<line x1=\"" << kLeft << "\" y1=\"" << kHeight - kBottom << "\" x2=\"" << kWidth - kRight << "\" y2=\""
     << kHeight - kBottom << "\" stroke=\"black\"/>\n"
     << "<text x=\"" << (kLeft + kWidth - kRight) / 2 << "\" y=\"" << kHeight - 10 << "\" text-anchor=\"middle\">"
     << escape(x_label) << "</text>\n";

  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = kPalette[i % std::size(kPalette)];
    std::string pts;
    for (const auto& [x, y] : series[i].points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      pts += num(f.px(x)) + "," + num(f.py(y)) + " ";
    }
    if (!pts.empty()) {
      pts.pop_back();
      os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.8\" points=\"" << pts << "\"/>\n";
    }
    const double ly = kTop + 10 + 18.0 * static_cast<double>(i);
    os << "<line x1=\"" << kWidth - kRight + 12 << "\" y1=\"" << ly << "\" x2=\"" << kWidth - kRight + 32
       << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n"
       << "<text x=\"" << kWidth - kRight + 38 << "\" y=\"" << ly + 4 << "\">" << escape(series[i].name)
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string bar_chart_svg(const std::string& title, const std::string& y_label, const std::vector<Bar>& bars,
                          std::optional<std::pair<std::string, double>> reference) {
  Frame f;
  f.y.add(0.0);
  for (const auto& b : bars) {
    if (!b.value || !std::isfinite(*b.value)) continue;
    const double e = b.error && std::isfinite(*b.error) ? std::abs(*b.error) : 0.0;
    f.y.add(*b.value + e);
    f.y.add(*b.value - e);
  }
  if (reference) f.y.add(reference->second);
  f.y.hi += 0.05 * (f.y.hi - f.y.lo);
  f.y.settle();

  std::ostringstream os;
  open_svg(os, title);
  y_axis(os, f, y_label);
  const double plot_w = kWidth - kLeft - kRight;
  const double slot = bars.empty() ? plot_w : plot_w / static_cast<double>(bars.size());
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const double cx = kLeft + slot * (static_cast<double>(i) + 0.5);
    const auto& b = bars[i];
    if (b.value && std::isfinite(*b.value)) {
      const double top = f.py(std::max(*b.value, 0.0)), base = f.py(std::min(*b.value, 0.0));
      os << "<rect x=\"" << num(cx - slot * 0.35) << "\" y=\"" << num(top) << "\" width=\"" << num(slot * 0.7)
         << "\" height=\"" << num(base - top) << "\" fill=\"" << kPalette[0] << "\"/>\n";
      if (b.error && std::isfinite(*b.error)) {
        const double e = std::abs(*b.error);
        os << "<line x1=\"" << num(cx) << "\" y1=\"" << num(f.py(*b.value - e)) << "\" x2=\"" << num(cx)
           << "\" y2=\"" << num(f.py(*b.value + e)) << "\" stroke=\"black\"/>\n";
      }
      os << "<text x=\"" << num(cx) << "\" y=\"" << num(top - 4) << "\" text-anchor=\"middle\" font-size=\"10\">"
         << num(*b.value) << "</text>\n";
    } else {
      os << "<text x=\"" << num(cx) << "\" y=\"" << num(f.py(0.0) - 4)
         << "\" text-anchor=\"middle\" font-size=\"10\">n/a</text>\n";
    }
    os << "<text x=\"" << num(cx) << "\" y=\"" << kHeight - kBottom + 16 << "\" text-anchor=\"middle\" font-size=\"10\">"
       << escape(b.label) << "</text>\n";
  }
  os << "<line x1=\"" << kLeft << "\" y1=\"" << num(f.py(0.0)) << "\" x2=\"" << kWidth - kRight << "\" y2=\""
     << num(f.py(0.0)) << "\" stroke=\"black\"/>\n";
  if (reference) {
    const double y = f.py(reference->second);
    os << "<line x1=\"" << kLeft << "\" y1=\"" << num(y) << "\" x2=\"" << kWidth - kRight << "\" y2=\"" << num(y)
       << "\" stroke=\"" << kPalette[1] << "\" stroke-dasharray=\"6,4\"/>\n"
       << "<text x=\"" << kWidth - kRight + 8 << "\" y=\"" << num(y + 4) << "\">" << escape(reference->first)
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

MetricsLog read_metrics_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  MetricsLog log;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("iteration") || !j["iteration"].is_number()) {
      ++log.malformed;
      continue;
    }
    log.records.push_back(std::move(j));
  }
  return log;
}

}  // namespace ctlab
