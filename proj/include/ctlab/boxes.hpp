// SPDX-License-Identifier: Apache-2.0
//
// Box geometry for the two-stage detector: overlap, suppression, delta
// encodings, anchors and ground-truth assignment.

#pragma once

#include <optional>
#include <span>
#include <vector>

namespace ctlab {

/// Axis-aligned box in continuous image coordinates. Area is
/// (x2 - x1) * (y2 - y1); there is no +1 pixel convention.
struct BoundingBox {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;
  std::optional<int> category;
  std::optional<double> score;

  /// Validating constructor. Throws InputError for zero/negative extents or a
  /// score outside [0, 1].
  static BoundingBox make(double x1, double y1, double x2, double y2,
                          std::optional<int> category = std::nullopt,
                          std::optional<double> score = std::nullopt);

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x1 + x2); }
  double center_y() const { return 0.5 * (y1 + y2); }
  bool valid() const;
};

/// Two-stage regression parameterization relative to a reference box.
struct BoxDelta {
  double tx = 0.0;
  double ty = 0.0;
  double tw = 0.0;
  double th = 0.0;
};

double iou(const BoundingBox& a, const BoundingBox& b);

/// Greedy non-maximum suppression. Boxes are visited by descending score
/// (ties: lower index first); a box is dropped when its IoU with an already
/// kept box exceeds `overlap_threshold`. Returns kept indices in visit order.
std::vector<int> nms(std::span<const BoundingBox> boxes, double overlap_threshold);

BoxDelta encode_delta(const BoundingBox& anchor, const BoundingBox& target);
BoundingBox decode_delta(const BoundingBox& anchor, const BoxDelta& delta);

/// Clamp to [0, width] x [0, height]. The result may be degenerate; callers
/// filter with `valid()` or a minimum size.
BoundingBox clip_box(const BoundingBox& box, double width, double height);

BoundingBox hflip_box(const BoundingBox& box, double image_width);

/// Per-candidate assignment. `kBackground` and `kIgnore` are sentinels;
/// non-negative values index the truth list.
struct Assignment {
  static constexpr int kBackground = -1;
  static constexpr int kIgnore = -2;
  int truth = kBackground;
  double max_iou = 0.0;

  bool positive() const { return truth >= 0; }
  bool background() const { return truth == kBackground; }
  bool ignored() const { return truth == kIgnore; }
};

struct MatchThresholds {
  double positive = 0.5;
  double negative = 0.3;

  static constexpr MatchThresholds roi() { return {0.5, 0.3}; }
  static constexpr MatchThresholds proposal() { return {0.7, 0.3}; }
};

/// Assigns each candidate to its best-overlapping truth when the overlap
/// reaches `thr.positive`, to background below `thr.negative`, and to ignore
/// in between. Each truth additionally claims its single highest-IoU
/// candidate (lowest index on ties) when that IoU is positive.
std::vector<Assignment> match_to_ground_truth(std::span<const BoundingBox> candidates,
                                              std::span<const BoundingBox> truths,
                                              MatchThresholds thr);

/// Square anchors centred on every cell of a stride-`stride` grid. Ordering is
/// row-major over cells, then by size: index = (y * grid_w + x) * sizes + s.
std::vector<BoundingBox> make_anchors(int grid_h, int grid_w, int stride,
                                      std::span<const double> sizes);

}  // namespace ctlab
