// SPDX-License-Identifier: Apache-2.0
//
// Label machinery for the unsupervised branch: confidence filtering of teacher
// detections into pseudo objects, flexible labels, and the IoU-assignment
// baseline that flexible labels replace.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ctlab/boxes.hpp"
#include "ctlab/detector.hpp"

namespace ctlab {

/// Teacher detections on the weak view that passed the confidence filter.
using PseudoObjects = std::vector<Detection>;

/// Keeps detections with score >= sigma, ordered by descending score (stable).
PseudoObjects filter_pseudo_objects(std::span<const Detection> detections, double sigma);

enum class Credibility : std::uint8_t { kUncertain, kPositive, kNegative };

struct FlexibleLabel {
  std::vector<double> values;
  std::vector<Credibility> mask;

  int count(Credibility c) const;
};

struct FlexibleThresholds {
  double tau_up = 0.8;
  double tau_low = 0.05;

  void validate() const;
};

/// Entrywise rule: > tau_up becomes 1, < tau_low becomes 0, anything else is
/// copied. Accepts any vector in [0, 1]; the rule is idempotent.
FlexibleLabel apply_flexible_rule(std::span<const double> values, FlexibleThresholds thr);

/// `p` must be a probability vector (non-negative, sums to 1 within 1e-6);
/// throws InputError otherwise.
FlexibleLabel make_flexible_label(std::span<const double> p, FlexibleThresholds thr);

/// Target and loss weight for one ROI. A zero weight excludes the ROI.
struct RoiTarget {
  std::vector<double> values;
  double weight = 1.0;
  int matched = Assignment::kBackground;  // index into the pseudo objects, or a sentinel
};

enum class PseudoTargetKind {
  kOneHot,    // category of the matched pseudo object
  kSoft,      // teacher's probability vector of the matched pseudo object
  kFlexible,  // flexible label of that probability vector
};

/// IoU assignment of candidates to pseudo objects. Background candidates get
/// the background one-hot (index num_classes); ignored candidates get weight 0.
std::vector<RoiTarget> assign_by_iou(std::span<const BoundingBox> candidates, const PseudoObjects& pseudo,
                                     MatchThresholds thr, PseudoTargetKind kind, int num_classes,
                                     FlexibleThresholds flex = {});

}  // namespace ctlab
