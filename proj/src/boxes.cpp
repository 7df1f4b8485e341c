// SPDX-License-Identifier: Apache-2.0

#include "ctlab/boxes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "ctlab/errors.hpp"

namespace ctlab {

BoundingBox BoundingBox::make(double x1, double y1, double x2, double y2,
                              std::optional<int> category, std::optional<double> score) {
  BoundingBox box{x1, y1, x2, y2, category, score};
  if (!box.valid()) {
    throw InputError("invalid box [" + std::to_string(x1) + ", " + std::to_string(y1) + ", " +
                     std::to_string(x2) + ", " + std::to_string(y2) + "]");
  }
  return box;
}

bool BoundingBox::valid() const {
  if (!(std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2))) {
    return false;
  }
  if (!(x1 < x2 && y1 < y2)) return false;
  if (score && !(*score >= 0.0 && *score <= 1.0)) return false;
  return true;
}

double iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

std::vector<int> nms(std::span<const BoundingBox> boxes, double overlap_threshold) {
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return boxes[a].score.value_or(0.0) > boxes[b].score.value_or(0.0);
  });

  std::vector<int> kept;
  std::vector<char> suppressed(boxes.size(), 0);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const int idx = order[i];
    if (suppressed[idx]) continue;
    kept.push_back(idx);
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      const int other = order[j];
      if (!suppressed[other] && iou(boxes[idx], boxes[other]) > overlap_threshold) {
        suppressed[other] = 1;
      }
    }
  }
  return kept;
}

BoxDelta encode_delta(const BoundingBox& anchor, const BoundingBox& target) {
  const double wa = anchor.width();
  const double ha = anchor.height();
  return {(target.center_x() - anchor.center_x()) / wa,
          (target.center_y() - anchor.center_y()) / ha, std::log(target.width() / wa),
          std::log(target.height() / ha)};
}

BoundingBox decode_delta(const BoundingBox& anchor, const BoxDelta& delta) {
  const double wa = anchor.width();
  const double ha = anchor.height();
  const double cx = anchor.center_x() + delta.tx * wa;
  const double cy = anchor.center_y() + delta.ty * ha;
  const double w = wa * std::exp(delta.tw);
  const double h = ha * std::exp(delta.th);
  BoundingBox out;
  out.x1 = cx - 0.5 * w;
  out.y1 = cy - 0.5 * h;
  out.x2 = cx + 0.5 * w;
  out.y2 = cy + 0.5 * h;
  return out;
}

BoundingBox clip_box(const BoundingBox& box, double width, double height) {
  BoundingBox out = box;
  out.x1 = std::clamp(box.x1, 0.0, width);
  out.x2 = std::clamp(box.x2, 0.0, width);
  out.y1 = std::clamp(box.y1, 0.0, height);
  out.y2 = std::clamp(box.y2, 0.0, height);
  return out;
}

BoundingBox hflip_box(const BoundingBox& box, double image_width) {
  BoundingBox out = box;
  out.x1 = image_width - box.x2;
  out.x2 = image_width - box.x1;
  return out;
}

std::vector<Assignment> match_to_ground_truth(std::span<const BoundingBox> candidates,
                                              std::span<const BoundingBox> truths,
                                              MatchThresholds thr) {
  if (thr.positive < thr.negative) {
    throw InputError("match_to_ground_truth: positive threshold below negative threshold");
  }
  std::vector<Assignment> out(candidates.size());
  if (truths.empty()) return out;

  const std::size_t nc = candidates.size();
  const std::size_t nt = truths.size();
  std::vector<double> overlaps(nc * nt);
  for (std::size_t c = 0; c < nc; ++c) {
    for (std::size_t t = 0; t < nt; ++t) overlaps[c * nt + t] = iou(candidates[c], truths[t]);
  }

  for (std::size_t c = 0; c < nc; ++c) {
    int best = 0;
    for (std::size_t t = 1; t < nt; ++t) {
      if (overlaps[c * nt + t] > overlaps[c * nt + best]) best = static_cast<int>(t);
    }
    const double best_iou = overlaps[c * nt + best];
    out[c].max_iou = best_iou;
    if (best_iou >= thr.positive) {
      out[c].truth = best;
    } else if (best_iou < thr.negative) {
      out[c].truth = Assignment::kBackground;
    } else {
      out[c].truth = Assignment::kIgnore;
    }
  }

  // Every truth claims its best candidate so that no object goes unsupervised.
  std::vector<double> claimed_iou(nc, -1.0);
  for (std::size_t t = 0; t < nt; ++t) {
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t c = 0; c < nc; ++c) {
      if (overlaps[c * nt + t] > best_iou) {
        best_iou = overlaps[c * nt + t];
        best = static_cast<int>(c);
      }
    }
    if (best < 0) continue;
    if (best_iou > claimed_iou[best]) {
      claimed_iou[best] = best_iou;
      out[best].truth = static_cast<int>(t);
    }
  }
  return out;
}

std::vector<BoundingBox> make_anchors(int grid_h, int grid_w, int stride,
                                      std::span<const double> sizes) {
  std::vector<BoundingBox> anchors;
  anchors.reserve(static_cast<std::size_t>(grid_h * grid_w) * sizes.size());
  for (int y = 0; y < grid_h; ++y) {
    for (int x = 0; x < grid_w; ++x) {
      const double cx = (x + 0.5) * stride;
      const double cy = (y + 0.5) * stride;
      for (double s : sizes) {
        anchors.push_back({cx - 0.5 * s, cy - 0.5 * s, cx + 0.5 * s, cy + 0.5 * s, {}, {}});
      }
    }
  }
  return anchors;
}

}  // namespace ctlab
