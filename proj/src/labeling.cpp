// SPDX-License-Identifier: Apache-2.0

#include "ctlab/labeling.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ctlab/errors.hpp"

namespace ctlab {

PseudoObjects filter_pseudo_objects(std::span<const Detection> detections, double sigma) {
  PseudoObjects out;
  for (const auto& d : detections) {
    if (d.box.score && *d.box.score >= sigma) out.push_back(d);
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const Detection& a, const Detection& b) { return *a.box.score > *b.box.score; });
  return out;
}

int FlexibleLabel::count(Credibility c) const {
  return static_cast<int>(std::count(mask.begin(), mask.end(), c));
}

void FlexibleThresholds::validate() const {
  if (!(tau_low > 0.0 && tau_low < tau_up && tau_up < 1.0)) {
    throw InputError("flexible thresholds must satisfy 0 < tau_low < tau_up < 1 (got " + std::to_string(tau_low) +
                     ", " + std::to_string(tau_up) + ")");
  }
}

FlexibleLabel apply_flexible_rule(std::span<const double> values, FlexibleThresholds thr) {
  thr.validate();
  FlexibleLabel out;
  out.values.reserve(values.size());
  out.mask.reserve(values.size());
  for (double v : values) {
    if (!(v >= 0.0 && v <= 1.0)) throw InputError("flexible label input outside [0, 1]");
    if (v > thr.tau_up) {
      out.values.push_back(1.0);
      out.mask.push_back(Credibility::kPositive);
    } else if (v < thr.tau_low) {
      out.values.push_back(0.0);
      out.mask.push_back(Credibility::kNegative);
    } else {
      out.values.push_back(v);
      out.mask.push_back(Credibility::kUncertain);
    }
  }
  return out;
}

FlexibleLabel make_flexible_label(std::span<const double> p, FlexibleThresholds thr) {
  if (p.empty()) throw InputError("empty probability vector");
  double sum = 0.0;
  for (double v : p) {
    if (!(v >= 0.0)) throw InputError("probability vector has a negative or NaN entry");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-6) {
    throw InputError("probability vector sums to " + std::to_string(sum) + ", not 1");
  }
  return apply_flexible_rule(p, thr);
}

std::vector<RoiTarget> assign_by_iou(std::span<const BoundingBox> candidates, const PseudoObjects& pseudo,
                                     MatchThresholds thr, PseudoTargetKind kind, int num_classes,
                                     FlexibleThresholds flex) {
  std::vector<BoundingBox> truths;
  truths.reserve(pseudo.size());
  for (const auto& d : pseudo) truths.push_back(d.box);
  const auto assignment = match_to_ground_truth(candidates, truths, thr);

  const std::size_t k = static_cast<std::size_t>(num_classes) + 1;
  std::vector<RoiTarget> out(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    RoiTarget& t = out[i];
    t.matched = assignment[i].truth;
    t.values.assign(k, 0.0);
    if (assignment[i].ignored()) {
      t.weight = 0.0;
      continue;
    }
    if (assignment[i].background()) {
      t.values[num_classes] = 1.0;
      continue;
    }
    const Detection& obj = pseudo[static_cast<std::size_t>(assignment[i].truth)];
    switch (kind) {
      case PseudoTargetKind::kOneHot:
        t.values[*obj.box.category] = 1.0;
        break;
      case PseudoTargetKind::kSoft:
        t.values = obj.probs;
        break;
      case PseudoTargetKind::kFlexible:
        t.values = make_flexible_label(obj.probs, flex).values;
        break;
    }
  }
  return out;
}

}  // namespace ctlab
