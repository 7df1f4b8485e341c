// SPDX-License-Identifier: Apache-2.0

#include "ctlab/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ctlab/errors.hpp"

namespace ctlab {

namespace {

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Smooth L1 of one coordinate difference and its derivative.
std::pair<double, double> huber(double d) {
  if (std::abs(d) < 1.0) return {0.5 * d * d, d};
  return {std::abs(d) - 0.5, d > 0 ? 1.0 : -1.0};
}

std::array<double, 4> as_array(const BoxDelta& d) { return {d.tx, d.ty, d.tw, d.th}; }

}  // namespace

bool LossBreakdown::finite() const {
  for (double v : {sup_rpn_cls, sup_rpn_reg, sup_roi_cls, sup_roi_reg, unsup_rpn_cls, unsup_rpn_reg, unsup_roi_cls,
                   unsup_roi_reg, total}) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

nlohmann::json LossBreakdown::to_json() const {
  return {{"sup_rpn_cls", sup_rpn_cls},     {"sup_rpn_reg", sup_rpn_reg},     {"sup_roi_cls", sup_roi_cls},
          {"sup_roi_reg", sup_roi_reg},     {"unsup_rpn_cls", unsup_rpn_cls}, {"unsup_rpn_reg", unsup_rpn_reg},
          {"unsup_roi_cls", unsup_roi_cls}, {"unsup_roi_reg", unsup_roi_reg}, {"lambda", lambda},
          {"total", total}};
}

LossBreakdown LossBreakdown::from_json(const nlohmann::json& j) {
  LossBreakdown b;
  b.sup_rpn_cls = j.at("sup_rpn_cls").get<double>();
  b.sup_rpn_reg = j.at("sup_rpn_reg").get<double>();
  b.sup_roi_cls = j.at("sup_roi_cls").get<double>();
  b.sup_roi_reg = j.at("sup_roi_reg").get<double>();
  b.unsup_rpn_cls = j.at("unsup_rpn_cls").get<double>();
  b.unsup_rpn_reg = j.at("unsup_rpn_reg").get<double>();
  b.unsup_roi_cls = j.at("unsup_roi_cls").get<double>();
  b.unsup_roi_reg = j.value("unsup_roi_reg", 0.0);
  b.lambda = j.at("lambda").get<double>();
  b.total = j.at("total").get<double>();
  return b;
}

double soft_cross_entropy(std::span<const double> target, std::span<const double> p) {
  if (target.size() != p.size()) throw ShapeError("soft cross-entropy: target and probability sizes differ");
  double loss = 0.0;
  for (std::size_t c = 0; c < p.size(); ++c) {
    if (target[c] == 0.0) continue;
    loss -= target[c] * std::log(std::max(p[c], kProbFloor));
  }
  return loss;
}

double binary_objectness_loss(std::span<const double> logits, std::span<const std::int8_t> labels,
                              LossCounters* counters) {
  if (logits.size() != labels.size()) throw ShapeError("objectness loss: logits and labels sizes differ");
  double sum = 0.0;
  long n = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (labels[i] == AnchorTargets::kIgnore) continue;
    sum += softplus(logits[i]) - (labels[i] == AnchorTargets::kPositive ? logits[i] : 0.0);
    ++n;
  }
  if (n == 0) {
    if (counters) ++counters->empty_objectness;
    return 0.0;
  }
  return sum / static_cast<double>(n);
}

double smooth_l1(const BoxDelta& pred, const BoxDelta& target) {
  const auto p = as_array(pred);
  const auto t = as_array(target);
  double sum = 0.0;
  for (int j = 0; j < 4; ++j) sum += huber(p[j] - t[j]).first;
  return sum;
}

double total_loss(double supervised, double unsupervised, double lambda) {
  if (!(lambda >= 0.0)) throw InputError("lambda must be non-negative, got " + std::to_string(lambda));
  return supervised + lambda * unsupervised;
}

// ---------------------------------------------------------------------------

int AnchorTargets::positives() const {
  return static_cast<int>(std::count(labels.begin(), labels.end(), kPositive));
}

AnchorTargets make_anchor_targets(std::span<const BoundingBox> anchors, std::span<const BoundingBox> truths,
                                  MatchThresholds thr) {
  const auto assignment = match_to_ground_truth(anchors, truths, thr);
  AnchorTargets t;
  t.labels.resize(anchors.size());
  t.deltas.resize(anchors.size());
  for (std::size_t k = 0; k < anchors.size(); ++k) {
    const auto& a = assignment[k];
    if (a.positive()) {
      t.labels[k] = AnchorTargets::kPositive;
      t.deltas[k] = encode_delta(anchors[k], truths[static_cast<std::size_t>(a.truth)]);
    } else {
      t.labels[k] = a.ignored() ? AnchorTargets::kIgnore : AnchorTargets::kNegative;
    }
  }
  return t;
}

AnchorTargets ignored_anchor_targets(std::size_t num_anchors) {
  AnchorTargets t;
  t.labels.assign(num_anchors, AnchorTargets::kIgnore);
  t.deltas.resize(num_anchors);
  return t;
}

BoxDelta roi_regression_target(const DetectorConfig& config, const BoundingBox& proposal, const BoundingBox& truth) {
  const BoxDelta d = encode_delta(proposal, truth);
  const auto& s = config.roi_delta_std;
  return {d.tx / s[0], d.ty / s[1], d.tw / s[2], d.th / s[3]};
}

std::vector<RoiSample> supervised_roi_samples(const DetectorConfig& config, int image,
                                              std::span<const BoundingBox> proposals,
                                              std::span<const BoundingBox> truths, MatchThresholds thr) {
  std::vector<BoundingBox> candidates(proposals.begin(), proposals.end());
  for (const auto& t : truths) {
    if (!t.category || *t.category < 0 || *t.category >= config.num_classes) {
      throw InputError("supervised ROI target needs a known category on every ground-truth box");
    }
    BoundingBox b = t;
    b.score.reset();
    b.category.reset();
    candidates.push_back(b);
  }
  const auto assignment = match_to_ground_truth(candidates, truths, thr);
  const std::size_t k = static_cast<std::size_t>(config.num_classes) + 1;
  std::vector<RoiSample> out;
  out.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& a = assignment[i];
    if (a.ignored()) continue;
    RoiSample s{{image, candidates[i]}, std::vector<double>(k, 0.0), std::nullopt};
    if (a.positive()) {
      const auto& truth = truths[static_cast<std::size_t>(a.truth)];
      s.target[static_cast<std::size_t>(*truth.category)] = 1.0;
      s.regression = roi_regression_target(config, candidates[i], truth);
    } else {
      s.target[k - 1] = 1.0;
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------

template <typename T>
StudentTrunk<T> student_trunk(DetectorParams<T>& params, const Tensor<T>& images, std::span<const Segment> segments) {
  StudentTrunk<T> trunk;
  trunk.features = backbone_forward_train(params, images, segments, trunk.tape);
  trunk.rpn = rpn_forward(params, trunk.features);
  return trunk;
}

template <typename T>
LossBreakdown evaluate_objective(DetectorParams<T>& params, const Tensor<T>& images, const StudentObjective& objective,
                                 const StudentTrunk<T>* trunk, ParamSet<T>* grads, LossCounters* counters) {
  const auto& cfg = params.config;
  if (static_cast<int>(objective.images.size()) != images.n) {
    throw ShapeError("objective has " + std::to_string(objective.images.size()) + " image entries for a batch of " +
                     std::to_string(images.n));
  }
  if (!(objective.lambda >= 0.0)) throw InputError("lambda must be non-negative");
  StudentTrunk<T> own;
  if (!trunk) {
    own = student_trunk(params, images, objective.segments);
    trunk = &own;
  }
  const int num_anchors = cfg.num_anchors();
  const int a_per_cell = cfg.anchors_per_cell();
  const std::size_t plane = trunk->rpn.logits.plane();
  const double branch_weight[2] = {1.0, objective.lambda};

  // Proposal stage: per-branch contributing counts first, so every term is a mean.
  long cls_count[2] = {0, 0};
  long reg_count[2] = {0, 0};
  for (const auto& im : objective.images) {
    if (static_cast<int>(im.anchors.labels.size()) != num_anchors) {
      throw ShapeError("anchor targets do not cover all " + std::to_string(num_anchors) + " anchors");
    }
    const int b = static_cast<int>(im.branch);
    for (auto l : im.anchors.labels) {
      if (l != AnchorTargets::kIgnore) ++cls_count[b];
      if (l == AnchorTargets::kPositive) ++reg_count[b];
    }
  }
  double rpn_cls[2] = {0, 0};
  double rpn_reg[2] = {0, 0};
  Tensor<T> d_logits, d_deltas;
  if (grads) {
    d_logits = Tensor<T>(trunk->rpn.logits.n, trunk->rpn.logits.c, trunk->rpn.logits.h, trunk->rpn.logits.w);
    d_deltas = Tensor<T>(trunk->rpn.deltas.n, trunk->rpn.deltas.c, trunk->rpn.deltas.h, trunk->rpn.deltas.w);
  }
  for (int i = 0; i < images.n; ++i) {
    const auto& im = objective.images[static_cast<std::size_t>(i)];
    const int b = static_cast<int>(im.branch);
    const double cls_scale = cls_count[b] > 0 ? 1.0 / static_cast<double>(cls_count[b]) : 0.0;
    const double reg_scale = reg_count[b] > 0 ? 1.0 / static_cast<double>(reg_count[b]) : 0.0;
    for (int k = 0; k < num_anchors; ++k) {
      const auto label = im.anchors.labels[static_cast<std::size_t>(k)];
      if (label == AnchorTargets::kIgnore) continue;
      const double z = static_cast<double>(trunk->rpn.logit(i, k));
      const double y = label == AnchorTargets::kPositive ? 1.0 : 0.0;
      rpn_cls[b] += (softplus(z) - y * z) * cls_scale;
      const int cell = k / a_per_cell;
      const int a = k % a_per_cell;
      if (grads) {
        d_logits.sample(i)[static_cast<std::size_t>(a) * plane + cell] =
            static_cast<T>((sigmoid(z) - y) * cls_scale * branch_weight[b]);
      }
      if (label != AnchorTargets::kPositive) continue;
      const auto pred = as_array(trunk->rpn.delta(i, k));
      const auto tgt = as_array(im.anchors.deltas[static_cast<std::size_t>(k)]);
      for (int j = 0; j < 4; ++j) {
        const auto [v, g] = huber(pred[j] - tgt[j]);
        rpn_reg[b] += v * reg_scale;
        if (grads) {
          d_deltas.sample(i)[static_cast<std::size_t>(4 * a + j) * plane + cell] =
              static_cast<T>(g * reg_scale * branch_weight[b]);
        }
      }
    }
  }
  for (int b = 0; b < 2; ++b) {
    if (cls_count[b] == 0 && counters) {
      const bool present = std::any_of(objective.images.begin(), objective.images.end(),
                                       [&](const ImageObjective& im) { return static_cast<int>(im.branch) == b; });
      if (present) ++counters->empty_objectness;
    }
  }

  // ROI stage over every sample of the batch in one head pass.
  std::vector<RoiRef> rois;
  std::vector<const RoiSample*> samples;
  for (const auto& im : objective.images) {
    for (const auto& s : im.rois) {
      if (s.roi.image < 0 || s.roi.image >= images.n) throw ShapeError("ROI sample refers to a missing image");
      if (s.target.size() != static_cast<std::size_t>(cfg.num_classes + 1)) {
        throw ShapeError("ROI target has the wrong number of classes");
      }
      rois.push_back(s.roi);
      samples.push_back(&s);
    }
  }
  long roi_cls_count[2] = {0, 0};
  long roi_reg_count[2] = {0, 0};
  auto sample_branch = [&](const RoiSample& s) {
    return static_cast<int>(objective.images[static_cast<std::size_t>(s.roi.image)].branch);
  };
  auto regresses = [&](const RoiSample& s, int b) {
    return s.regression.has_value() && (b == 0 || objective.unsup_roi_regression);
  };
  for (const RoiSample* s : samples) {
    const int b = sample_branch(*s);
    ++roi_cls_count[b];
    if (regresses(*s, b)) ++roi_reg_count[b];
  }
  double roi_cls[2] = {0, 0};
  double roi_reg[2] = {0, 0};
  Tensor<T> d_features;
  if (!rois.empty()) {
    const Tensor<T> crops = roi_features(trunk->features, std::span<const RoiRef>(rois), cfg.roi_grid);
    RoiHeadTape<T> head_tape;
    const RoiHeadOutput<T> head = roi_head<T>(params, crops, grads ? &head_tape : nullptr);
    const int k = head.classes;
    std::vector<T> g_logits(grads ? head.logits.size() : 0, T(0));
    std::vector<T> g_deltas(grads ? head.deltas.size() : 0, T(0));
    std::vector<double> logp(static_cast<std::size_t>(k));
    std::vector<double> prob(static_cast<std::size_t>(k));
    for (std::size_t r = 0; r < samples.size(); ++r) {
      const RoiSample& s = *samples[r];
      const int b = sample_branch(s);
      const double cls_scale = 1.0 / static_cast<double>(roi_cls_count[b]);
      const T* z = head.logits.data() + r * k;
      double zmax = static_cast<double>(z[0]);
      for (int c = 1; c < k; ++c) zmax = std::max(zmax, static_cast<double>(z[c]));
      double sum = 0.0;
      for (int c = 0; c < k; ++c) sum += std::exp(static_cast<double>(z[c]) - zmax);
      const double lse = zmax + std::log(sum);
      double live_mass = 0.0;  // target mass on entries whose log is not clamped
      double loss = 0.0;
      for (int c = 0; c < k; ++c) {
        logp[c] = static_cast<double>(z[c]) - lse;
        prob[c] = std::exp(logp[c]);
        const double t = s.target[static_cast<std::size_t>(c)];
        if (t == 0.0) continue;
        if (logp[c] < std::log(kProbFloor)) {
          loss -= t * std::log(kProbFloor);
        } else {
          loss -= t * logp[c];
          live_mass += t;
        }
      }
      roi_cls[b] += loss * cls_scale;
      if (grads) {
        const double w = cls_scale * branch_weight[b];
        for (int c = 0; c < k; ++c) {
          const double t = s.target[static_cast<std::size_t>(c)];
          const double live_t = (t != 0.0 && logp[c] >= std::log(kProbFloor)) ? t : 0.0;
          g_logits[r * k + c] = static_cast<T>((prob[c] * live_mass - live_t) * w);
        }
      }
      if (!regresses(s, b)) continue;
      const double reg_scale = 1.0 / static_cast<double>(roi_reg_count[b]);
      const auto tgt = as_array(*s.regression);
      for (int j = 0; j < 4; ++j) {
        const auto [v, g] = huber(static_cast<double>(head.deltas[r * 4 + j]) - tgt[j]);
        roi_reg[b] += v * reg_scale;
        if (grads) g_deltas[r * 4 + j] = static_cast<T>(g * reg_scale * branch_weight[b]);
      }
    }
    if (grads) {
      Tensor<T> d_crops;
      roi_head_backward(params, head_tape, std::span<const T>(g_logits), std::span<const T>(g_deltas), *grads,
                        d_crops);
      d_features = Tensor<T>(trunk->features.n, trunk->features.c, trunk->features.h, trunk->features.w);
      roi_features_backward(d_crops, std::span<const RoiRef>(rois), cfg.roi_grid, d_features);
    }
  }
  if (counters) {
    for (int b = 0; b < 2; ++b) {
      const bool present = std::any_of(objective.images.begin(), objective.images.end(),
                                       [&](const ImageObjective& im) { return static_cast<int>(im.branch) == b; });
      if (present && roi_cls_count[b] == 0) ++counters->empty_roi_classification;
    }
  }

  if (grads) {
    rpn_backward(params, trunk->features, d_logits, d_deltas, *grads, d_features);
    backbone_backward(params, trunk->tape, d_features, *grads);
  }

  LossBreakdown out;
  out.sup_rpn_cls = rpn_cls[0];
  out.sup_rpn_reg = rpn_reg[0];
  out.sup_roi_cls = roi_cls[0];
  out.sup_roi_reg = roi_reg[0];
  out.unsup_rpn_cls = rpn_cls[1];
  out.unsup_rpn_reg = rpn_reg[1];
  out.unsup_roi_cls = roi_cls[1];
  out.unsup_roi_reg = roi_reg[1];
  out.lambda = objective.lambda;
  out.total = total_loss(out.supervised(), out.unsupervised(), objective.lambda);
  return out;
}

#define CTLAB_INSTANTIATE(T)                                                                                      \
  template StudentTrunk<T> student_trunk<T>(DetectorParams<T>&, const Tensor<T>&, std::span<const Segment>);     \
  template LossBreakdown evaluate_objective<T>(DetectorParams<T>&, const Tensor<T>&, const StudentObjective&,     \
                                               const StudentTrunk<T>*, ParamSet<T>*, LossCounters*);

CTLAB_INSTANTIATE(float)
CTLAB_INSTANTIATE(double)
#undef CTLAB_INSTANTIATE

}  // namespace ctlab
