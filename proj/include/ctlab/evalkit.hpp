// SPDX-License-Identifier: Apache-2.0
//
// Known-class evaluation (AP at IoU 0.5, all-points interpolation), plus the
// ablation and threshold-sweep harnesses. The harnesses take a runner that
// trains and evaluates one configuration, so they do not depend on how runs
// are executed or cached.

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctlab/boxes.hpp"
#include "ctlab/detector.hpp"
#include "ctlab/scenes.hpp"
#include "ctlab/trainer.hpp"

namespace ctlab {

/// A box on a given image of an evaluation set.
struct ImageBox {
  int image = 0;
  BoundingBox box;
};

/// Detections are ranked by descending score (stable on ties); each
/// detection greedily claims the unmatched truth on its image with the highest
/// IoU when that IoU >= iou_threshold. Returns nullopt when there are no truths.
std::optional<double> average_precision(std::span<const ImageBox> detections, std::span<const ImageBox> truths,
                                        double iou_threshold = 0.5);

struct CategoryAp {
  int category = 0;
  std::string name;
  int truths = 0;
  int detections = 0;
  std::optional<double> ap;
};

struct EvalReport {
  std::vector<CategoryAp> categories;
  double map = 0.0;  // mean over categories with at least one truth
  int images = 0;
  int detections = 0;
  int truths = 0;
  double iou_threshold = 0.5;
  std::uint64_t seed = 0;
  nlohmann::json config;  // echo of the configuration that produced the model

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

struct EvalOptions {
  DetectOptions detect;  // 0.05 score, 0.5 NMS, 32 per image
  double iou_threshold = 0.5;
  int batch = 32;
};

/// Scores per-image detections against the exposed annotations of `scenes`.
/// Only known categories count. Throws ConfigError when `scenes` is empty.
EvalReport evaluate_detections(const std::vector<std::vector<Detection>>& detections,
                               const std::vector<Scene>& scenes, const CategoryVocabulary& vocab,
                               double iou_threshold = 0.5);

/// Batched inference over `scenes`; one detection list per scene.
std::vector<std::vector<Detection>> detect_scenes(const DetectorParams<float>& params,
                                                  const std::vector<Scene>& scenes, const EvalOptions& options);

/// Runs inference with `params` over `scenes` and scores it.
EvalReport evaluate(const DetectorParams<float>& params, const std::vector<Scene>& scenes,
                    const CategoryVocabulary& vocab, const EvalOptions& options = {});

// ---------------------------------------------------------------------------
// Harnesses

/// Trains and evaluates one configuration.
using RunFn = std::function<EvalReport(const TrainConfig&)>;

struct AblationRow {
  int id = 0;  // 1..6
  bool flexible_labels = false;
  bool interactive_teaching = false;
  bool dbn = false;
  std::vector<std::uint64_t> seeds;
  std::vector<EvalReport> reports;  // one per completed seed
  std::string failure;              // empty when every seed completed

  double mean() const;
  double stddev() const;  // sample standard deviation; 0 for fewer than 2 runs
  double min() const;
  double max() const;
};

/// Toggle settings of the six rows, in order.
std::vector<AblationRow> ablation_rows();

struct AblationTable {
  std::vector<AblationRow> rows;

  std::string to_csv() const;
  nlohmann::json to_json() const;
};

/// Trains every row for every seed. A throwing run marks its row failed and
/// the table keeps going.
AblationTable run_ablation(const TrainConfig& base, std::span<const std::uint64_t> seeds, const RunFn& run);

struct SweepPoint {
  std::string axis;  // "tau_up" or "tau_low"
  double tau_up = 0.0;
  double tau_low = 0.0;
  std::optional<EvalReport> report;
  std::string status = "ok";  // "ok", "skipped: ...", or "failed: ..."
};

struct SweepTable {
  std::vector<SweepPoint> points;

  std::string to_csv() const;
  nlohmann::json to_json() const;
};

std::vector<double> default_tau_up_grid();
std::vector<double> default_tau_low_grid();

/// One run per grid value with the other threshold at its base value.
/// Pairs with tau_low >= tau_up are skipped with an annotation.
SweepTable run_sensitivity_sweep(const TrainConfig& base, std::span<const double> tau_up_grid,
                                 std::span<const double> tau_low_grid, const RunFn& run);

}  // namespace ctlab
