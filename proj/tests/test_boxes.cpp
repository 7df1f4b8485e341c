// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "ctlab/boxes.hpp"
#include "ctlab/errors.hpp"
#include "oracles.hpp"

using namespace ctlab;

using oracle::pixel_iou;

TEST_CASE("iou: identical, disjoint and half-overlap") {
  const auto a = BoundingBox::make(0, 0, 10, 10);
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, BoundingBox::make(20, 20, 30, 30)) == 0.0);
  CHECK(iou(a, BoundingBox::make(5, 0, 15, 10)) == doctest::Approx(50.0 / 150.0));
  // Touching edges share no area.
  CHECK(iou(a, BoundingBox::make(10, 0, 20, 10)) == 0.0);
}

TEST_CASE("iou: pixel-count oracle on 1000 integer boxes") {
  std::mt19937 rng(7);
  std::uniform_int_distribution<int> coord(0, 63);
  int checked = 0;
  while (checked < 1000) {
    int v[8];
    for (int& x : v) x = coord(rng);
    if (v[0] == v[2] || v[1] == v[3] || v[4] == v[6] || v[5] == v[7]) continue;
    const int ax1 = std::min(v[0], v[2]), ax2 = std::max(v[0], v[2]);
    const int ay1 = std::min(v[1], v[3]), ay2 = std::max(v[1], v[3]);
    const int bx1 = std::min(v[4], v[6]), bx2 = std::max(v[4], v[6]);
    const int by1 = std::min(v[5], v[7]), by2 = std::max(v[5], v[7]);
    const double got = iou(BoundingBox::make(ax1, ay1, ax2, ay2), BoundingBox::make(bx1, by1, bx2, by2));
    const double want = pixel_iou(ax1, ay1, ax2, ay2, bx1, by1, bx2, by2);
    REQUIRE(got == want);
    ++checked;
  }
}

TEST_CASE("iou is symmetric and bounded") {
  std::mt19937 rng(3);
  std::uniform_real_distribution<double> u(0.0, 50.0);
  for (int i = 0; i < 500; ++i) {
    const double x = u(rng), y = u(rng);
    const auto a = BoundingBox::make(x, y, x + 1 + u(rng), y + 1 + u(rng));
    const double p = u(rng), q = u(rng);
    const auto b = BoundingBox::make(p, q, p + 1 + u(rng), q + 1 + u(rng));
    CHECK(iou(a, b) == iou(b, a));
    CHECK(iou(a, b) >= 0.0);
    CHECK(iou(a, b) <= 1.0);
  }
}

TEST_CASE("BoundingBox::make rejects degenerate boxes and bad scores") {
  CHECK_THROWS_AS(BoundingBox::make(5, 5, 5, 10), InputError);
  CHECK_THROWS_AS(BoundingBox::make(5, 5, 4, 10), InputError);
  CHECK_THROWS_AS(BoundingBox::make(0, 0, 1, 1, 0, 1.5), InputError);
  CHECK_NOTHROW(BoundingBox::make(0, 0, 1, 1, 0, 1.0));
}

TEST_CASE("nms: suppression and ordering") {
  std::vector<BoundingBox> boxes{BoundingBox::make(0, 0, 10, 10, 0, 0.9), BoundingBox::make(1, 0, 11, 10, 0, 0.8),
                                 BoundingBox::make(30, 30, 40, 40, 0, 0.7)};
  CHECK(nms(boxes, 0.5) == std::vector<int>{0, 2});
  CHECK(nms(boxes, 0.95) == std::vector<int>{0, 1, 2});
  CHECK(nms({}, 0.5).empty());
  // Equal scores keep the lower index.
  std::vector<BoundingBox> tie{BoundingBox::make(0, 0, 10, 10, 0, 0.5), BoundingBox::make(0, 0, 10, 10, 0, 0.5)};
  CHECK(nms(tie, 0.5) == std::vector<int>{0});
}

TEST_CASE("nms: kept boxes pairwise overlap at most the threshold") {
  std::mt19937 rng(11);
  std::uniform_real_distribution<double> u(0.0, 40.0);
  std::uniform_real_distribution<double> s(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<BoundingBox> boxes;
    for (int i = 0; i < 30; ++i) {
      const double x = u(rng), y = u(rng);
      boxes.push_back(BoundingBox::make(x, y, x + 4 + u(rng) / 2, y + 4 + u(rng) / 2, 0, s(rng)));
    }
    const auto kept = nms(boxes, 0.4);
    for (std::size_t i = 0; i < kept.size(); ++i) {
      for (std::size_t j = i + 1; j < kept.size(); ++j) CHECK(iou(boxes[kept[i]], boxes[kept[j]]) <= 0.4);
      if (i + 1 < kept.size()) CHECK(*boxes[kept[i]].score >= *boxes[kept[i + 1]].score);
    }
    // Every dropped box overlaps some kept box with a score at least its own.
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      if (std::find(kept.begin(), kept.end(), static_cast<int>(i)) != kept.end()) continue;
      bool covered = false;
      for (int k : kept) covered |= iou(boxes[i], boxes[k]) > 0.4 && *boxes[k].score >= *boxes[i].score;
      CHECK(covered);
    }
  }
}

TEST_CASE("encode/decode round trip below 1e-9") {
  std::mt19937 rng(5);
  std::uniform_real_distribution<double> u(0.0, 60.0);
  std::uniform_real_distribution<double> sz(1.0, 30.0);
  double worst = 0.0;
  for (int i = 0; i < 2000; ++i) {
    const double ax = u(rng), ay = u(rng), tx = u(rng), ty = u(rng);
    const auto anchor = BoundingBox::make(ax, ay, ax + sz(rng), ay + sz(rng));
    const auto target = BoundingBox::make(tx, ty, tx + sz(rng), ty + sz(rng));
    const auto back = decode_delta(anchor, encode_delta(anchor, target));
    worst = std::max({worst, std::abs(back.x1 - target.x1), std::abs(back.y1 - target.y1),
                      std::abs(back.x2 - target.x2), std::abs(back.y2 - target.y2)});
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("encode_delta of a box onto itself is zero") {
  const auto b = BoundingBox::make(3, 4, 17, 12);
  const auto d = encode_delta(b, b);
  CHECK(d.tx == 0.0);
  CHECK(d.ty == 0.0);
  CHECK(d.tw == 0.0);
  CHECK(d.th == 0.0);
}

TEST_CASE("clip and flip") {
  const auto c = clip_box(BoundingBox::make(-5, -2, 70, 30), 64, 64);
  CHECK(c.x1 == 0.0);
  CHECK(c.y1 == 0.0);
  CHECK(c.x2 == 64.0);
  CHECK(c.y2 == 30.0);
  const auto f = hflip_box(BoundingBox::make(10, 5, 20, 15, 2), 64);
  CHECK(f.x1 == 44.0);
  CHECK(f.x2 == 54.0);
  CHECK(f.y1 == 5.0);
  CHECK(*f.category == 2);
  const auto ff = hflip_box(f, 64);
  CHECK(ff.x1 == 10.0);
  CHECK(ff.x2 == 20.0);
}

TEST_CASE("match_to_ground_truth: thresholds and bands") {
  const std::vector<BoundingBox> truths{BoundingBox::make(0, 0, 10, 10, 1)};
  const std::vector<BoundingBox> candidates{
      BoundingBox::make(0, 0, 10, 10),   // IoU 1
      BoundingBox::make(0, 0, 10, 6),    // IoU 0.6
      BoundingBox::make(0, 0, 10, 4),    // IoU 0.4, ignore band
      BoundingBox::make(0, 0, 10, 2),    // IoU 0.2
      BoundingBox::make(40, 40, 50, 50)  // IoU 0
  };
  const auto a = match_to_ground_truth(candidates, truths, MatchThresholds::roi());
  CHECK(a[0].truth == 0);
  CHECK(a[1].truth == 0);
  CHECK(a[2].ignored());
  CHECK(a[3].background());
  CHECK(a[4].background());
  CHECK(a[1].max_iou == doctest::Approx(0.6));
}

TEST_CASE("match_to_ground_truth: no truths means all background") {
  const std::vector<BoundingBox> candidates{BoundingBox::make(0, 0, 10, 10), BoundingBox::make(5, 5, 9, 9)};
  for (const auto& a : match_to_ground_truth(candidates, {}, MatchThresholds::roi())) CHECK(a.background());
}

TEST_CASE("match_to_ground_truth: every truth claims its best candidate") {
  // The only candidate near the truth overlaps below the positive threshold.
  const std::vector<BoundingBox> truths{BoundingBox::make(0, 0, 10, 10, 0)};
  const std::vector<BoundingBox> candidates{BoundingBox::make(40, 40, 50, 50), BoundingBox::make(0, 0, 10, 3)};
  const auto a = match_to_ground_truth(candidates, truths, MatchThresholds::roi());
  CHECK(a[0].background());
  CHECK(a[1].truth == 0);
}

TEST_CASE("match_to_ground_truth: rejects inverted thresholds") {
  CHECK_THROWS_AS(match_to_ground_truth({}, {}, MatchThresholds{0.3, 0.5}), InputError);
}

TEST_CASE("make_anchors: layout and centers") {
  const std::vector<double> sizes{12.0, 24.0};
  const auto anchors = make_anchors(8, 8, 8, sizes);
  REQUIRE(anchors.size() == 128);
  // index = (y * 8 + x) * 2 + s
  const auto& a = anchors[(3 * 8 + 5) * 2 + 1];
  CHECK(a.center_x() == doctest::Approx(5.5 * 8));
  CHECK(a.center_y() == doctest::Approx(3.5 * 8));
  CHECK(a.width() == doctest::Approx(24.0));
  CHECK(anchors[0].width() == doctest::Approx(12.0));
}
