// SPDX-License-Identifier: Apache-2.0
//
// Training objectives. Scalar helpers operate on plain vectors; the objective
// evaluator runs one student forward/backward over a fully specified set of
// targets so the trainer and the gradient audits share one code path.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "ctlab/boxes.hpp"
#include "ctlab/detector.hpp"
#include "ctlab/labeling.hpp"

namespace ctlab {

/// Probabilities are clamped to this floor before the logarithm.
inline constexpr double kProbFloor = 1e-12;

struct LossBreakdown {
  double sup_rpn_cls = 0.0;
  double sup_rpn_reg = 0.0;
  double sup_roi_cls = 0.0;
  double sup_roi_reg = 0.0;
  double unsup_rpn_cls = 0.0;
  double unsup_rpn_reg = 0.0;
  double unsup_roi_cls = 0.0;
  double unsup_roi_reg = 0.0;  // stays 0 unless the optional term is enabled
  double lambda = 0.0;
  double total = 0.0;

  double supervised() const { return sup_rpn_cls + sup_rpn_reg + sup_roi_cls + sup_roi_reg; }
  double unsupervised() const { return unsup_rpn_cls + unsup_rpn_reg + unsup_roi_cls + unsup_roi_reg; }
  bool finite() const;

  nlohmann::json to_json() const;
  static LossBreakdown from_json(const nlohmann::json& j);
};

/// Events that make a loss term empty; logged, never fatal.
struct LossCounters {
  long empty_objectness = 0;
  long empty_roi_classification = 0;
};

/// -sum_c target_c * log(max(p_c, kProbFloor)) for one box.
double soft_cross_entropy(std::span<const double> target, std::span<const double> p);

/// Mean binary cross-entropy over anchors labeled 1 or 0; -1 is ignored.
/// Zero contributing anchors gives 0 and increments the counter.
double binary_objectness_loss(std::span<const double> logits, std::span<const std::int8_t> labels,
                              LossCounters* counters = nullptr);

/// Sum over the four coordinates of the piecewise Huber term with beta 1.
double smooth_l1(const BoxDelta& pred, const BoxDelta& target);

/// L_s + lambda * L_u. Throws InputError for negative lambda.
double total_loss(double supervised, double unsupervised, double lambda);

// ---------------------------------------------------------------------------
// Targets

/// Proposal-stage targets of one image, one entry per anchor.
struct AnchorTargets {
  static constexpr std::int8_t kPositive = 1;
  static constexpr std::int8_t kNegative = 0;
  static constexpr std::int8_t kIgnore = -1;

  std::vector<std::int8_t> labels;
  std::vector<BoxDelta> deltas;  // meaningful where labels == kPositive

  int positives() const;
};

/// Anchor matching against boxes. With no boxes every anchor is background.
AnchorTargets make_anchor_targets(std::span<const BoundingBox> anchors, std::span<const BoundingBox> truths,
                                  MatchThresholds thr = MatchThresholds::proposal());

/// Every anchor ignored: the image contributes nothing to proposal losses.
AnchorTargets ignored_anchor_targets(std::size_t num_anchors);

/// One ROI with its classification target and optional normalized regression target.
struct RoiSample {
  RoiRef roi;
  std::vector<double> target;
  std::optional<BoxDelta> regression;
};

/// Regression target in the head's normalized units.
BoxDelta roi_regression_target(const DetectorConfig& config, const BoundingBox& proposal, const BoundingBox& truth);

/// Supervised ROI samples: candidates are the proposals plus the ground-truth
/// boxes; positives get one-hot category and a regression target, background
/// gets the background one-hot, ignores are dropped.
std::vector<RoiSample> supervised_roi_samples(const DetectorConfig& config, int image,
                                              std::span<const BoundingBox> proposals,
                                              std::span<const BoundingBox> truths,
                                              MatchThresholds thr = MatchThresholds::roi());

enum class LossBranch : std::uint8_t { kSupervised, kUnsupervised };

struct ImageObjective {
  LossBranch branch = LossBranch::kSupervised;
  AnchorTargets anchors;
  std::vector<RoiSample> rois;
};

/// Everything needed to evaluate the student objective on one concatenated batch.
struct StudentObjective {
  std::vector<ImageObjective> images;  // one per batch image, in tensor order
  std::vector<Segment> segments;
  double lambda = 0.0;
  bool unsup_roi_regression = false;
};

/// Forward products that do not depend on the ROI targets; lets a caller
/// build targets from the student's own proposals before the loss pass.
template <typename T>
struct StudentTrunk {
  Tensor<T> features;
  BackboneTape<T> tape;
  RpnOutput<T> rpn;
};

/// Training-mode forward of backbone and proposal stage. Updates running statistics.
template <typename T>
StudentTrunk<T> student_trunk(DetectorParams<T>& params, const Tensor<T>& images, std::span<const Segment> segments);

/// Loss of `objective`, and when `grads` is set, its gradient accumulated into
/// `grads`. Reuses `trunk` when given, otherwise runs the training forward.
template <typename T>
LossBreakdown evaluate_objective(DetectorParams<T>& params, const Tensor<T>& images, const StudentObjective& objective,
                                 const StudentTrunk<T>* trunk, ParamSet<T>* grads, LossCounters* counters = nullptr);

}  // namespace ctlab
