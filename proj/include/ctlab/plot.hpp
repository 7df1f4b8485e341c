// SPDX-License-Identifier: Apache-2.0
//
// Minimal deterministic SVG charts for metrics logs and harness tables. The
// output depends only on the inputs (fixed palette, fixed number formatting),
// so regenerating a figure from the same files gives the same bytes.

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace ctlab {

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;  // (x, y); non-finite y values are dropped
};

std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series);

struct Bar {
  std::string label;
  std::optional<double> value;  // nullopt draws an empty slot (skipped or failed run)
  std::optional<double> error;  // half-height of an error whisker
};

/// `reference` draws a horizontal dashed line, e.g. a baseline mean.
std::string bar_chart_svg(const std::string& title, const std::string& y_label, const std::vector<Bar>& bars,
                          std::optional<std::pair<std::string, double>> reference = std::nullopt);

struct MetricsLog {
  std::vector<nlohmann::json> records;
  int malformed = 0;  // non-blank lines that are not a JSON object with a numeric iteration
};

/// Reads a JSON-lines metrics file, skipping malformed lines. Throws IoError
/// when the file cannot be opened.
MetricsLog read_metrics_log(const std::filesystem::path& path);

}  // namespace ctlab
