// SPDX-License-Identifier: Apache-2.0

#include "ctlab/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "ctlab/errors.hpp"

namespace ctlab {

std::optional<double> average_precision(std::span<const ImageBox> detections, std::span<const ImageBox> truths,
                                        double iou_threshold) {
  if (truths.empty()) return std::nullopt;
  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return detections[a].box.score.value_or(0.0) > detections[b].box.score.value_or(0.0);
  });

  std::vector<bool> claimed(truths.size(), false);
  std::vector<double> precision;
  std::vector<double> recall;
  int tp = 0;
  int seen = 0;
  for (std::size_t idx : order) {
    const ImageBox& d = detections[idx];
    ++seen;
    double best = -1.0;
    std::size_t best_t = truths.size();
    for (std::size_t t = 0; t < truths.size(); ++t) {
      if (truths[t].image != d.image || claimed[t]) continue;
      const double o = iou(d.box, truths[t].box);
      if (o > best) {
        best = o;
        best_t = t;
      }
    }
    if (best_t < truths.size() && best >= iou_threshold) {
      claimed[best_t] = true;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / seen);
    recall.push_back(static_cast<double>(tp) / static_cast<double>(truths.size()));
  }
  // Precision envelope, then area under the step function of recall.
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return std::clamp(ap, 0.0, 1.0);
}

// ---------------------------------------------------------------------------

nlohmann::json EvalReport::to_json() const {
  nlohmann::json cats = nlohmann::json::array();
  for (const auto& c : categories) {
    cats.push_back({{"id", c.category},
                    {"name", c.name},
                    {"truths", c.truths},
                    {"detections", c.detections},
                    {"ap", c.ap ? nlohmann::json(*c.ap) : nlohmann::json(nullptr)}});
  }
  return {{"schema", "ctlab.eval/v1"},
          {"map", map},
          {"iou_threshold", iou_threshold},
          {"images", images},
          {"detections", detections},
          {"truths", truths},
          {"seed", seed},
          {"categories", cats},
          {"config", config}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  if (j.value("schema", std::string()) != "ctlab.eval/v1") throw InputError("not an evaluation report");
  EvalReport r;
  r.map = j.at("map").get<double>();
  r.iou_threshold = j.at("iou_threshold").get<double>();
  r.images = j.at("images").get<int>();
  r.detections = j.at("detections").get<int>();
  r.truths = j.at("truths").get<int>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.config = j.value("config", nlohmann::json());
  for (const auto& c : j.at("categories")) {
    CategoryAp a;
    a.category = c.at("id").get<int>();
    a.name = c.at("name").get<std::string>();
    a.truths = c.at("truths").get<int>();
    a.detections = c.at("detections").get<int>();
    if (!c.at("ap").is_null()) a.ap = c.at("ap").get<double>();
    r.categories.push_back(std::move(a));
  }
  return r;
}

EvalReport evaluate_detections(const std::vector<std::vector<Detection>>& detections,
                               const std::vector<Scene>& scenes, const CategoryVocabulary& vocab,
                               double iou_threshold) {
  if (scenes.empty()) throw ConfigError("evaluation set is empty");
  if (detections.size() != scenes.size()) throw ShapeError("one detection list per scene is required");
  const int n = vocab.n();
  std::vector<std::vector<ImageBox>> dets(static_cast<std::size_t>(n));
  std::vector<std::vector<ImageBox>> truths(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const int image = static_cast<int>(i);
    for (const auto& t : scenes[i].annotations) {
      if (t.category && vocab.is_known(*t.category)) truths[static_cast<std::size_t>(*t.category)].push_back({image, t});
    }
    for (const auto& d : detections[i]) {
      if (d.box.category && vocab.is_known(*d.box.category)) {
        dets[static_cast<std::size_t>(*d.box.category)].push_back({image, d.box});
      }
    }
  }
  EvalReport r;
  r.iou_threshold = iou_threshold;
  r.images = static_cast<int>(scenes.size());
  double sum = 0.0;
  int counted = 0;
  for (int c = 0; c < n; ++c) {
    CategoryAp a;
    a.category = c;
    a.name = vocab.name(c);
    a.truths = static_cast<int>(truths[c].size());
    a.detections = static_cast<int>(dets[c].size());
    a.ap = average_precision(dets[c], truths[c], iou_threshold);
    if (a.ap) {
      sum += *a.ap;
      ++counted;
    }
    r.detections += a.detections;
    r.truths += a.truths;
    r.categories.push_back(std::move(a));
  }
  r.map = counted > 0 ? sum / counted : 0.0;
  return r;
}

std::vector<std::vector<Detection>> detect_scenes(const DetectorParams<float>& params,
                                                  const std::vector<Scene>& scenes, const EvalOptions& options) {
  std::vector<std::vector<Detection>> all;
  all.reserve(scenes.size());
  const std::size_t batch = static_cast<std::size_t>(std::max(1, options.batch));
  for (std::size_t start = 0; start < scenes.size(); start += batch) {
    const std::size_t end = std::min(scenes.size(), start + batch);
    std::vector<const Image*> ptrs;
    for (std::size_t i = start; i < end; ++i) ptrs.push_back(&scenes[i].image);
    const auto images = images_to_tensor<float>(std::span<const Image* const>(ptrs), params.config.image_size);
    auto result = detect(params, images, options.detect);
    for (auto& d : result.detections) all.push_back(std::move(d));
  }
  return all;
}

EvalReport evaluate(const DetectorParams<float>& params, const std::vector<Scene>& scenes,
                    const CategoryVocabulary& vocab, const EvalOptions& options) {
  if (scenes.empty()) throw ConfigError("evaluation set is empty");
  if (vocab.n() != params.config.num_classes) {
    throw ConfigError("model predicts " + std::to_string(params.config.num_classes) + " classes, vocabulary has " +
                      std::to_string(vocab.n()));
  }
  return evaluate_detections(detect_scenes(params, scenes, options), scenes, vocab, options.iou_threshold);
}

// ---------------------------------------------------------------------------

double AblationRow::mean() const {
  if (reports.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : reports) s += r.map;
  return s / static_cast<double>(reports.size());
}

double AblationRow::stddev() const {
  if (reports.size() < 2) return 0.0;
  const double m = mean();
  double s = 0.0;
  for (const auto& r : reports) s += (r.map - m) * (r.map - m);
  return std::sqrt(s / static_cast<double>(reports.size() - 1));
}

double AblationRow::min() const {
  double v = reports.empty() ? 0.0 : reports.front().map;
  for (const auto& r : reports) v = std::min(v, r.map);
  return v;
}

double AblationRow::max() const {
  double v = reports.empty() ? 0.0 : reports.front().map;
  for (const auto& r : reports) v = std::max(v, r.map);
  return v;
}

std::vector<AblationRow> ablation_rows() {
  // flexible labels, interactive teaching, DBN
  const bool table[6][3] = {{false, false, false}, {true, false, false}, {false, true, false},
                            {false, false, true},  {true, true, false},  {true, true, true}};
  std::vector<AblationRow> rows;
  for (int i = 0; i < 6; ++i) {
    AblationRow r;
    r.id = i + 1;
    r.flexible_labels = table[i][0];
    r.interactive_teaching = table[i][1];
    r.dbn = table[i][2];
    rows.push_back(std::move(r));
  }
  return rows;
}

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << v;
  return os.str();
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::string AblationTable::to_csv() const {
  std::ostringstream os;
  os << "row,Flexible labels,IMT,DBN,seeds,completed,mAP_mean,mAP_std,mAP_min,mAP_max,status\n";
  for (const auto& r : rows) {
    std::string seeds;
    for (std::size_t i = 0; i < r.seeds.size(); ++i) seeds += (i ? ";" : "") + std::to_string(r.seeds[i]);
    os << r.id << ',' << (r.flexible_labels ? 1 : 0) << ',' << (r.interactive_teaching ? 1 : 0) << ','
       << (r.dbn ? 1 : 0) << ',' << seeds << ',' << r.reports.size() << ',' << fmt(r.mean()) << ','
       << fmt(r.stddev()) << ',' << fmt(r.min()) << ',' << fmt(r.max()) << ','
       << csv_field(r.failure.empty() ? "ok" : "failed: " + r.failure) << '\n';
  }
  return os.str();
}

nlohmann::json AblationTable::to_json() const {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json reports = nlohmann::json::array();
    for (const auto& rep : r.reports) reports.push_back(rep.to_json());
    out.push_back({{"row", r.id},
                   {"flexible_labels", r.flexible_labels},
                   {"interactive_teaching", r.interactive_teaching},
                   {"dbn", r.dbn},
                   {"seeds", r.seeds},
                   {"map_mean", r.mean()},
                   {"map_std", r.stddev()},
                   {"failure", r.failure},
                   {"reports", reports}});
  }
  return {{"schema", "ctlab.ablation/v1"}, {"rows", out}};
}

AblationTable run_ablation(const TrainConfig& base, std::span<const std::uint64_t> seeds, const RunFn& run) {
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  AblationTable table;
  table.rows = ablation_rows();
  for (auto& row : table.rows) {
    row.seeds.assign(seeds.begin(), seeds.end());
    for (std::uint64_t seed : seeds) {
      TrainConfig c = base;
      c.flexible_labels = row.flexible_labels;
      c.interactive_teaching = row.interactive_teaching;
      c.dbn = row.dbn;
      c.seed = seed;
      try {
        row.reports.push_back(run(c));
      } catch (const std::exception& e) {
        if (!row.failure.empty()) row.failure += "; ";
        row.failure += "seed " + std::to_string(seed) + ": " + e.what();
      }
    }
  }
  return table;
}

std::vector<double> default_tau_up_grid() { return {0.5, 0.6, 0.7, 0.8, 0.9}; }
std::vector<double> default_tau_low_grid() { return {0.01, 0.03, 0.05, 0.08, 0.1}; }

std::string SweepTable::to_csv() const {
  std::ostringstream os;
  os << "axis,tau_up,tau_low,mAP,status\n";
  for (const auto& p : points) {
    os << p.axis << ',' << fmt(p.tau_up) << ',' << fmt(p.tau_low) << ','
       << (p.report ? fmt(p.report->map) : std::string()) << ',' << csv_field(p.status) << '\n';
  }
  return os.str();
}

nlohmann::json SweepTable::to_json() const {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& p : points) {
    out.push_back({{"axis", p.axis},
                   {"tau_up", p.tau_up},
                   {"tau_low", p.tau_low},
                   {"status", p.status},
                   {"report", p.report ? p.report->to_json() : nlohmann::json(nullptr)}});
  }
  return {{"schema", "ctlab.sweep/v1"}, {"points", out}};
}

SweepTable run_sensitivity_sweep(const TrainConfig& base, std::span<const double> tau_up_grid,
                                 std::span<const double> tau_low_grid, const RunFn& run) {
  SweepTable table;
  auto one = [&](const std::string& axis, double up, double low) {
    SweepPoint p;
    p.axis = axis;
    p.tau_up = up;
    p.tau_low = low;
    if (!(low > 0.0 && up < 1.0)) {
      p.status = "skipped: thresholds must lie in (0, 1)";
    } else if (!(low < up)) {
      p.status = "skipped: tau_low must be below tau_up";
    } else {
      TrainConfig c = base;
      c.tau_up = up;
      c.tau_low = low;
      try {
        p.report = run(c);
      } catch (const std::exception& e) {
        p.status = std::string("failed: ") + e.what();
      }
    }
    table.points.push_back(std::move(p));
  };
  for (double up : tau_up_grid) one("tau_up", up, base.tau_low);
  for (double low : tau_low_grid) one("tau_low", base.tau_up, low);
  return table;
}

}  // namespace ctlab
