// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "ctlab/detector.hpp"
#include "ctlab/errors.hpp"

using namespace ctlab;

namespace {

Tensor<double> random_tensor(int n, int c, int h, int w, std::mt19937& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(n, c, h, w);
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data) v = u(rng);
  return t;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

/// Compares analytic gradient entries against central differences on a
/// strided subset of one parameter array.
template <typename F>
void check_param_gradient(DetectorParams<double>& p, std::size_t index, const ParamSet<double>& grads, F loss,
                          std::size_t stride) {
  auto& arr = p.weights[index].value;
  const double h = 1e-6;
  for (std::size_t i = 0; i < arr.size(); i += stride) {
    const double keep = arr[i];
    arr[i] = keep + h;
    const double lp = loss();
    arr[i] = keep - h;
    const double lm = loss();
    arr[i] = keep;
    const double fd = (lp - lm) / (2 * h);
    INFO(p.weights[index].name, "[", i, "]");
    CHECK(grads[index].value[i] == doctest::Approx(fd).epsilon(1e-5).scale(1e-3));
  }
}

}  // namespace

TEST_CASE("init: deterministic, seed-sensitive and shaped") {
  DetectorConfig cfg;
  const auto a = DetectorParams<float>::init(cfg, 1);
  const auto b = DetectorParams<float>::init(cfg, 1);
  const auto c = DetectorParams<float>::init(cfg, 2);
  CHECK(a.weights == b.weights);
  CHECK(!(a.weights == c.weights));
  CHECK(a.weights.count() == kParamCount);
  CHECK(a.weights[kClsW].size() == static_cast<std::size_t>((cfg.num_classes + 1) * cfg.hidden));
  CHECK(a.weights[kFcW].size() == static_cast<std::size_t>(cfg.hidden * cfg.crop_size()));
  for (float v : a.weights[kNorm2Alpha].value) CHECK(v == 1.0f);
  for (float v : a.weights[kConv1B].value) CHECK(v == 0.0f);
  CHECK(cfg.num_anchors() == 128);
}

TEST_CASE("config validation rejects bad shapes") {
  DetectorConfig cfg;
  cfg.image_size = 60;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  DetectorConfig none;
  none.anchor_sizes.clear();
  CHECK_THROWS_AS(none.validate(), ConfigError);
}

TEST_CASE("images_to_tensor rejects the wrong size") {
  Image small(32, 32);
  const Image* ptrs[] = {&small};
  CHECK_THROWS_AS(images_to_tensor<float>(ptrs, 64), ShapeError);
}

TEST_CASE("backbone backward matches central differences") {
  DetectorConfig cfg;
  cfg.image_size = 32;
  cfg.channels = {4, 6, 5};
  auto p = DetectorParams<double>::init(cfg, 3);
  std::mt19937 rng(9);
  // Non-trivial affine so the norm gradients are exercised.
  for (auto idx : {kNorm1Alpha, kNorm2Alpha, kNorm3Alpha, kNorm1Beta, kNorm2Beta, kNorm3Beta}) {
    for (auto& v : p.weights[idx].value) v = std::uniform_real_distribution<double>(0.5, 1.5)(rng) - (idx % 4 == 3);
  }
  const auto x = random_tensor(4, 3, 32, 32, rng, 0.0, 1.0);
  const std::vector<Segment> segs{{Split::kLabeled, 0, 2}, {Split::kUnlabeled, 2, 2}};
  BackboneTape<double> tape;
  const auto f = backbone_forward_train(p, x, segs, tape);
  CHECK(f.c == 5);
  CHECK(f.h == 4);
  const auto w = random_tensor(f.n, f.c, f.h, f.w, rng);
  auto loss = [&] {
    BackboneTape<double> t;
    return dot(backbone_forward_train(p, x, segs, t).data, w.data);
  };
  auto grads = p.weights.zeros_like();
  backbone_backward(p, tape, w, grads);
  for (auto idx : {kConv1W, kConv2W, kConv3W, kConv3B, kNorm1Alpha, kNorm2Beta, kNorm3Alpha}) {
    check_param_gradient(p, idx, grads, loss, 7);
  }
}

TEST_CASE("rpn forward shapes and backward") {
  DetectorConfig cfg;
  auto p = DetectorParams<double>::init(cfg, 4);
  std::mt19937 rng(5);
  const auto feat = random_tensor(2, cfg.channels[2], 8, 8, rng, 0.0, 1.0);
  const auto out = rpn_forward(p, feat);
  CHECK(out.logits.c == cfg.anchors_per_cell());
  CHECK(out.deltas.c == 4 * cfg.anchors_per_cell());
  const auto wl = random_tensor(out.logits.n, out.logits.c, 8, 8, rng);
  const auto wd = random_tensor(out.deltas.n, out.deltas.c, 8, 8, rng);
  auto loss = [&] {
    const auto o = rpn_forward(p, feat);
    return dot(o.logits.data, wl.data) + dot(o.deltas.data, wd.data);
  };
  auto grads = p.weights.zeros_like();
  Tensor<double> d_feat;
  rpn_backward(p, feat, wl, wd, grads, d_feat);
  for (auto idx : {kRpnClsW, kRpnClsB, kRpnRegW, kRpnRegB}) check_param_gradient(p, idx, grads, loss, 5);
  // Linear in the features: the adjoint identity holds exactly up to rounding.
  CHECK(dot(d_feat.data, feat.data) ==
        doctest::Approx(loss() - [&] {
          auto z = feat;
          std::fill(z.data.begin(), z.data.end(), 0.0);
          const auto o = rpn_forward(p, z);
          return dot(o.logits.data, wl.data) + dot(o.deltas.data, wd.data);
        }()));
}

TEST_CASE("roi_features is linear and its backward is the adjoint") {
  std::mt19937 rng(6);
  const auto feat = random_tensor(2, 3, 8, 8, rng);
  const std::vector<RoiRef> rois{{0, BoundingBox::make(3.5, 7.0, 40.2, 33.0)},
                                 {1, BoundingBox::make(0.0, 0.0, 64.0, 64.0)},
                                 {1, BoundingBox::make(50.0, 12.0, 60.0, 20.0)}};
  const auto crops = roi_features(feat, rois, 4);
  CHECK(crops.n == 3);
  CHECK(crops.h == 4);
  const auto g = random_tensor(crops.n, crops.c, 4, 4, rng);
  Tensor<double> d(2, 3, 8, 8);
  roi_features_backward(g, rois, 4, d);
  CHECK(dot(crops.data, g.data) == doctest::Approx(dot(feat.data, d.data)).epsilon(1e-12));
  // A constant map crops to the same constant.
  const Tensor<double> ones(1, 1, 8, 8, 2.5);
  const std::vector<RoiRef> one{{0, BoundingBox::make(1, 1, 63, 63)}};
  for (double v : roi_features(ones, one, 4).data) CHECK(v == doctest::Approx(2.5));
}

TEST_CASE("roi head: probabilities sum to one and backward matches differences") {
  DetectorConfig cfg;
  cfg.channels = {4, 6, 5};
  cfg.hidden = 16;
  auto p = DetectorParams<double>::init(cfg, 8);
  std::mt19937 rng(7);
  const auto crops = random_tensor(6, 5, 4, 4, rng);
  RoiHeadTape<double> tape;
  const auto out = roi_head(p, crops, &tape);
  REQUIRE(out.classes == 4);
  for (int r = 0; r < out.rows; ++r) {
    double s = 0.0;
    for (int c = 0; c < out.classes; ++c) s += out.probs[r * out.classes + c];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  std::vector<double> wl(out.logits.size()), wd(out.deltas.size());
  std::uniform_real_distribution<double> u(-1, 1);
  for (auto& v : wl) v = u(rng);
  for (auto& v : wd) v = u(rng);
  auto loss = [&] {
    const auto o = roi_head<double>(p, crops, nullptr);
    return dot(o.logits, wl) + dot(o.deltas, wd);
  };
  auto grads = p.weights.zeros_like();
  Tensor<double> d_crops;
  roi_head_backward<double>(p, tape, wl, wd, grads, d_crops);
  for (auto idx : {kFcW, kFcB, kClsW, kClsB, kRegW, kRegB}) check_param_gradient(p, idx, grads, loss, 11);
}

TEST_CASE("propose: clipped, sorted, suppressed and bounded") {
  DetectorConfig cfg;
  auto p = DetectorParams<double>::init(cfg, 2);
  std::mt19937 rng(3);
  const auto feat = random_tensor(1, cfg.channels[2], 8, 8, rng, 0.0, 2.0);
  const auto rpn = rpn_forward(p, feat);
  const auto anchors = detector_anchors(cfg);
  const ProposalOptions opts{0.7, 20, 2.0};
  const auto props = propose(rpn, 0, cfg, anchors, opts);
  CHECK(!props.empty());
  CHECK(props.size() <= 20);
  for (std::size_t i = 0; i < props.size(); ++i) {
    CHECK(props[i].x1 >= 0.0);
    CHECK(props[i].x2 <= 64.0);
    CHECK(props[i].width() >= 2.0);
    if (i + 1 < props.size()) CHECK(*props[i].score >= *props[i + 1].score);
    for (std::size_t j = i + 1; j < props.size(); ++j) CHECK(iou(props[i], props[j]) <= 0.7);
  }
}

TEST_CASE("detect and classify_boxes on a trained-statistics model") {
  DetectorConfig cfg;
  auto p = DetectorParams<float>::init(cfg, 5);
  std::mt19937 rng(1);
  Tensor<float> x(4, 3, 64, 64);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& v : x.data) v = u(rng);
  // Populate running statistics for both splits.
  const std::vector<Segment> segs{{Split::kLabeled, 0, 2}, {Split::kUnlabeled, 2, 2}};
  BackboneTape<float> tape;
  backbone_forward_train(p, x, segs, tape);

  DetectOptions opts;
  opts.score_threshold = 0.0;
  const auto res = detect(p, x, opts);
  REQUIRE(res.detections.size() == 4);
  for (const auto& per_image : res.detections) {
    CHECK(per_image.size() <= static_cast<std::size_t>(opts.max_detections));
    for (const auto& d : per_image) {
      REQUIRE(d.box.category.has_value());
      CHECK(*d.box.category >= 0);
      CHECK(*d.box.category < cfg.num_classes);
      CHECK(d.probs.size() == 4u);
      CHECK(*d.box.score == doctest::Approx(d.probs[*d.box.category]).epsilon(1e-6));
    }
  }
  const std::vector<RoiRef> rois{{0, BoundingBox::make(5, 5, 30, 30)}, {3, BoundingBox::make(20, 10, 50, 60)}};
  const auto probs = classify_boxes(p, res.features, rois);
  REQUIRE(probs.size() == 2);
  for (const auto& pr : probs) CHECK(std::accumulate(pr.begin(), pr.end(), 0.0) == doctest::Approx(1.0));

  // Inference must not touch the model.
  const auto before = fingerprint(p.weights);
  const auto stats_before = p.norms;
  detect(p, x, opts);
  CHECK(fingerprint(p.weights) == before);
  CHECK(p.norms == stats_before);
}

TEST_CASE("decode_roi scales normalized deltas") {
  DetectorConfig cfg;
  const auto prop = BoundingBox::make(10, 10, 30, 20);
  const double zero[4] = {0, 0, 0, 0};
  const auto same = decode_roi(cfg, prop, zero);
  CHECK(same.x1 == doctest::Approx(10.0));
  CHECK(same.y2 == doctest::Approx(20.0));
  const double shift[4] = {1.0, 0.0, 0.0, 0.0};  // 1 normalized unit = 0.1 widths
  const auto moved = decode_roi(cfg, prop, shift);
  CHECK(moved.x1 == doctest::Approx(12.0));
  CHECK(moved.x2 == doctest::Approx(32.0));
}
