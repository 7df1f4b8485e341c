// SPDX-License-Identifier: Apache-2.0

#include "ctlab/trainer.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "ctlab/errors.hpp"
#include "ctlab/json_util.hpp"
#include "ctlab/rng.hpp"

namespace ctlab {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train: " + m); };
  if (!(sigma > 0.0 && sigma < 1.0)) fail("sigma must lie in (0, 1)");
  if (!(tau_low > 0.0 && tau_low < tau_up && tau_up < 1.0)) fail("thresholds must satisfy 0 < tau_low < tau_up < 1");
  if (!(lambda >= 0.0)) fail("lambda must be non-negative");
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) fail("ema_decay must lie in [0, 1]");
  if (burn_in < 0 || iterations < 0) fail("burn_in and iterations must be non-negative");
  if (labeled_batch < 2 || unlabeled_batch < 2) fail("batch sizes must be at least 2 (batch statistics)");
  if (log_every < 1) fail("log_every must be positive");
  if (eval_every < 0 || checkpoint_every < 0) fail("eval_every and checkpoint_every must be non-negative");
  if (student_proposals.top_k < 1 || teacher_detect.proposals.top_k < 1) fail("proposal top_k must be positive");
  try {
    detector.validate();
  } catch (const std::exception& e) {
    fail(e.what());
  }
}

DetectorConfig TrainConfig::effective_detector() const {
  DetectorConfig d = detector;
  d.norm = dbn_effective() ? NormKind::kDataSpecific : NormKind::kBatch;
  return d;
}

nlohmann::json detector_config_to_json(const DetectorConfig& c) {
  return {{"image_size", c.image_size},
          {"num_classes", c.num_classes},
          {"anchor_sizes", c.anchor_sizes},
          {"channels", c.channels},
          {"roi_grid", c.roi_grid},
          {"hidden", c.hidden},
          {"norm", c.norm == NormKind::kBatch ? "batch" : "data_specific"},
          {"norm_eps", c.norm_options.eps},
          {"norm_momentum", c.norm_options.momentum},
          {"variance_merge", c.norm_options.merge == VarianceMerge::kVariance ? "variance" : "stddev"},
          {"roi_delta_std", c.roi_delta_std}};
}

DetectorConfig detector_config_from_json(const nlohmann::json& j) {
  const char* ctx = "detector";
  require_known_keys(j,
                     {"image_size", "num_classes", "anchor_sizes", "channels", "roi_grid", "hidden", "norm",
                      "norm_eps", "norm_momentum", "variance_merge", "roi_delta_std"},
                     ctx);
  DetectorConfig c;
  read_opt(j, "image_size", c.image_size, ctx);
  read_opt(j, "num_classes", c.num_classes, ctx);
  read_opt(j, "anchor_sizes", c.anchor_sizes, ctx);
  read_opt(j, "channels", c.channels, ctx);
  read_opt(j, "roi_grid", c.roi_grid, ctx);
  read_opt(j, "hidden", c.hidden, ctx);
  read_opt(j, "norm_eps", c.norm_options.eps, ctx);
  read_opt(j, "norm_momentum", c.norm_options.momentum, ctx);
  read_opt(j, "roi_delta_std", c.roi_delta_std, ctx);
  std::string norm = "data_specific";
  read_opt(j, "norm", norm, ctx);
  if (norm == "batch") {
    c.norm = NormKind::kBatch;
  } else if (norm == "data_specific") {
    c.norm = NormKind::kDataSpecific;
  } else {
    throw ConfigError("detector.norm must be \"batch\" or \"data_specific\"");
  }
  std::string merge = "variance";
  read_opt(j, "variance_merge", merge, ctx);
  if (merge == "variance") {
    c.norm_options.merge = VarianceMerge::kVariance;
  } else if (merge == "stddev") {
    c.norm_options.merge = VarianceMerge::kStdDev;
  } else {
    throw ConfigError("detector.variance_merge must be \"variance\" or \"stddev\"");
  }
  try {
    c.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return c;
}

namespace {

nlohmann::json proposals_to_json(const ProposalOptions& p) {
  return {{"nms_threshold", p.nms_threshold}, {"top_k", p.top_k}, {"min_size", p.min_size}};
}

ProposalOptions proposals_from_json(const nlohmann::json& j, ProposalOptions p, const char* ctx) {
  require_known_keys(j, {"nms_threshold", "top_k", "min_size"}, ctx);
  read_opt(j, "nms_threshold", p.nms_threshold, ctx);
  read_opt(j, "top_k", p.top_k, ctx);
  read_opt(j, "min_size", p.min_size, ctx);
  return p;
}

}  // namespace

nlohmann::json TrainConfig::to_json() const {
  return {{"sigma", sigma},
          {"tau_up", tau_up},
          {"tau_low", tau_low},
          {"lambda", lambda},
          {"learning_rate", learning_rate},
          {"momentum", momentum},
          {"weight_decay", weight_decay},
          {"ema_decay", ema_decay},
          {"burn_in", burn_in},
          {"iterations", iterations},
          {"labeled_batch", labeled_batch},
          {"unlabeled_batch", unlabeled_batch},
          {"seed", seed},
          {"flexible_labels", flexible_labels},
          {"interactive_teaching", interactive_teaching},
          {"dbn", dbn},
          {"unsup_roi_regression", unsup_roi_regression},
          {"log_every", log_every},
          {"eval_every", eval_every},
          {"checkpoint_every", checkpoint_every},
          {"halt_at", halt_at},
          {"student_proposals", proposals_to_json(student_proposals)},
          {"teacher_detect",
           {{"score_threshold", teacher_detect.score_threshold},
            {"nms_threshold", teacher_detect.nms_threshold},
            {"max_detections", teacher_detect.max_detections},
            {"proposals", proposals_to_json(teacher_detect.proposals)}}},
          {"detector", detector_config_to_json(detector)}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  const char* ctx = "train";
  require_known_keys(j,
                     {"sigma", "tau_up", "tau_low", "lambda", "learning_rate", "momentum", "weight_decay",
                      "ema_decay", "burn_in", "iterations", "labeled_batch", "unlabeled_batch", "seed",
                      "flexible_labels", "interactive_teaching", "dbn", "unsup_roi_regression", "log_every",
                      "eval_every", "checkpoint_every", "halt_at", "student_proposals", "teacher_detect",
                      "detector"},
                     ctx);
  TrainConfig c;
  read_opt(j, "sigma", c.sigma, ctx);
  read_opt(j, "tau_up", c.tau_up, ctx);
  read_opt(j, "tau_low", c.tau_low, ctx);
  read_opt(j, "lambda", c.lambda, ctx);
  read_opt(j, "learning_rate", c.learning_rate, ctx);
  read_opt(j, "momentum", c.momentum, ctx);
  read_opt(j, "weight_decay", c.weight_decay, ctx);
  read_opt(j, "ema_decay", c.ema_decay, ctx);
  read_opt(j, "burn_in", c.burn_in, ctx);
  read_opt(j, "iterations", c.iterations, ctx);
  read_opt(j, "labeled_batch", c.labeled_batch, ctx);
  read_opt(j, "unlabeled_batch", c.unlabeled_batch, ctx);
  read_opt(j, "seed", c.seed, ctx);
  read_opt(j, "flexible_labels", c.flexible_labels, ctx);
  read_opt(j, "interactive_teaching", c.interactive_teaching, ctx);
  read_opt(j, "dbn", c.dbn, ctx);
  read_opt(j, "unsup_roi_regression", c.unsup_roi_regression, ctx);
  read_opt(j, "log_every", c.log_every, ctx);
  read_opt(j, "eval_every", c.eval_every, ctx);
  read_opt(j, "checkpoint_every", c.checkpoint_every, ctx);
  read_opt(j, "halt_at", c.halt_at, ctx);
  if (j.contains("student_proposals")) {
    c.student_proposals = proposals_from_json(j.at("student_proposals"), c.student_proposals, "train.student_proposals");
  }
  if (j.contains("teacher_detect")) {
    const auto& t = j.at("teacher_detect");
    const char* tctx = "train.teacher_detect";
    require_known_keys(t, {"score_threshold", "nms_threshold", "max_detections", "proposals"}, tctx);
    read_opt(t, "score_threshold", c.teacher_detect.score_threshold, tctx);
    read_opt(t, "nms_threshold", c.teacher_detect.nms_threshold, tctx);
    read_opt(t, "max_detections", c.teacher_detect.max_detections, tctx);
    if (t.contains("proposals")) {
      c.teacher_detect.proposals =
          proposals_from_json(t.at("proposals"), c.teacher_detect.proposals, "train.teacher_detect.proposals");
    }
  }
  if (j.contains("detector")) c.detector = detector_config_from_json(j.at("detector"));
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// State and optimizer

TeacherStudentState TeacherStudentState::init(const TrainConfig& config) {
  TeacherStudentState s;
  s.student = DetectorParams<float>::init(config.effective_detector(), derive_seed(config.seed, Stream::kInit));
  s.teacher = s.student;
  s.velocity = s.student.weights.zeros_like();
  return s;
}

void ema_update(DetectorParams<float>& teacher, const DetectorParams<float>& student, double m) {
  teacher.require_compatible(student, "ema_update");
  if (!(m >= 0.0 && m <= 1.0)) throw InputError("EMA decay must lie in [0, 1]");
  const float mf = static_cast<float>(m);
  const float sf = static_cast<float>(1.0 - m);
  for (std::size_t a = 0; a < teacher.weights.count(); ++a) {
    auto& t = teacher.weights[a].value;
    const auto& s = student.weights[a].value;
    for (std::size_t i = 0; i < t.size(); ++i) {
      // Bit-exact fixed point when the two already agree.
      if (t[i] == s[i]) continue;
      const float lo = std::min(t[i], s[i]);
      const float hi = std::max(t[i], s[i]);
      t[i] = std::clamp(mf * t[i] + sf * s[i], lo, hi);
    }
  }
  teacher.norms = student.norms;
}

void sgd_update(ParamSet<float>& params, ParamSet<float>& velocity, const ParamSet<float>& grads,
                const TrainConfig& config) {
  params.require_same_layout(velocity, "sgd velocity");
  params.require_same_layout(grads, "sgd gradient");
  const float lr = static_cast<float>(config.learning_rate);
  const float mu = static_cast<float>(config.momentum);
  const float wd = static_cast<float>(config.weight_decay);
  for (std::size_t a = 0; a < params.count(); ++a) {
    auto& p = params[a].value;
    auto& v = velocity[a].value;
    const auto& g = grads[a].value;
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = mu * v[i] + (g[i] + wd * p[i]);
      p[i] -= lr * v[i];
    }
  }
}

// ---------------------------------------------------------------------------
// Batches

namespace {

std::vector<int> draw_indices(std::size_t pool_size, int batch, std::uint64_t seed) {
  if (pool_size == 0) throw TrainingError("cannot sample a batch from an empty pool");
  Rng rng(seed);
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(batch));
  if (static_cast<std::size_t>(batch) <= pool_size) {
    // Partial Fisher-Yates over a virtual identity permutation.
    std::vector<int> perm(pool_size);
    std::iota(perm.begin(), perm.end(), 0);
    for (int k = 0; k < batch; ++k) {
      const int j = uniform_int(rng, k, static_cast<int>(pool_size) - 1);
      std::swap(perm[k], perm[j]);
      out.push_back(perm[k]);
    }
  } else {
    for (int k = 0; k < batch; ++k) out.push_back(uniform_int(rng, 0, static_cast<int>(pool_size) - 1));
  }
  return out;
}

}  // namespace

LabeledBatch sample_labeled_batch(const SamplePools& pools, const TrainConfig& config, long iteration) {
  LabeledBatch b;
  const auto it = static_cast<std::uint64_t>(iteration);
  b.indices = draw_indices(pools.labeled.size(), config.labeled_batch,
                           derive_seed(config.seed, Stream::kBatchLabeled, it));
  const double size = pools.config.image_size;
  for (std::size_t k = 0; k < b.indices.size(); ++k) {
    const Scene& s = pools.labeled[static_cast<std::size_t>(b.indices[k])];
    const auto aug = WeakAugParams::draw(derive_seed(config.seed, Stream::kAugLabeled, it, k));
    b.images.push_back(apply_weak(s.image, aug));
    std::vector<BoundingBox> boxes = s.annotations;
    if (aug.flip) {
      for (auto& box : boxes) box = hflip_box(box, size);
    }
    b.boxes.push_back(std::move(boxes));
  }
  return b;
}

UnlabeledBatch sample_unlabeled_batch(const SamplePools& pools, const TrainConfig& config, long iteration) {
  UnlabeledBatch b;
  const auto it = static_cast<std::uint64_t>(iteration);
  b.indices = draw_indices(pools.unlabeled.size(), config.unlabeled_batch,
                           derive_seed(config.seed, Stream::kBatchUnlabeled, it));
  for (std::size_t k = 0; k < b.indices.size(); ++k) {
    const Scene& s = pools.unlabeled[static_cast<std::size_t>(b.indices[k])];
    const auto weak = WeakAugParams::draw(derive_seed(config.seed, Stream::kAugUnlabeledWeak, it, k));
    b.weak.push_back(apply_weak(s.image, weak));
    const Image base = weak.flip ? hflip(s.image) : s.image;
    const auto strong = StrongAugParams::draw(derive_seed(config.seed, Stream::kAugUnlabeledStrong, it, k),
                                              base.height, base.width);
    b.strong.push_back(apply_strong(base, strong));
  }
  return b;
}

// ---------------------------------------------------------------------------
// Step

nlohmann::json StepStats::to_json() const {
  return {{"empty_objectness", counters.empty_objectness},
          {"empty_roi_classification", counters.empty_roi_classification},
          {"pseudo_objects", pseudo_objects},
          {"unsup_rois", unsup_rois},
          {"credible_positive", credible_positive},
          {"credible_negative", credible_negative},
          {"uncertain", uncertain},
          {"unsupervised_active", unsupervised_active}};
}

namespace {

template <typename C>
Tensor<float> stack(const C& images, int size) {
  std::vector<const Image*> ptrs;
  for (const auto& im : images) ptrs.push_back(&im);
  return images_to_tensor<float>(std::span<const Image* const>(ptrs), size);
}

/// Supervised objective entries for the labeled images at the front of the batch.
void add_supervised(StudentObjective& obj, const LabeledBatch& lb, const RpnOutput<float>& rpn,
                    const DetectorConfig& cfg, const std::vector<BoundingBox>& anchors,
                    const ProposalOptions& popts) {
  for (std::size_t i = 0; i < lb.images.size(); ++i) {
    ImageObjective im;
    im.branch = LossBranch::kSupervised;
    im.anchors = make_anchor_targets(anchors, lb.boxes[i]);
    const auto proposals = propose(rpn, static_cast<int>(i), cfg, anchors, popts);
    im.rois = supervised_roi_samples(cfg, static_cast<int>(i), proposals, lb.boxes[i]);
    obj.images.push_back(std::move(im));
  }
}

[[noreturn]] void fail_non_finite(long iteration, const LossBreakdown& loss, const StepStats& stats) {
  nlohmann::json dump = {{"iteration", iteration}, {"loss", loss.to_json()}, {"stats", stats.to_json()}};
  throw TrainingError("non-finite loss at step " + std::to_string(iteration) + ": " + dump.dump());
}

}  // namespace

LossBreakdown train_step(TeacherStudentState& state, const SamplePools& pools, const TrainConfig& config,
                         StepStats* stats_out) {
  const long it = state.iteration;
  const DetectorConfig& cfg = state.student.config;
  const auto anchors = detector_anchors(cfg);
  StepStats stats;

  // (a) labeled batch; the unlabeled batch joins the student forward whenever
  // the unsupervised branch exists, so DBN statistics fill during burn-in too.
  const LabeledBatch lb = sample_labeled_batch(pools, config, it);
  const bool with_unlabeled = config.unsupervised_enabled();
  const bool active = with_unlabeled && it >= config.burn_in;
  stats.unsupervised_active = active;
  const int nl = static_cast<int>(lb.images.size());

  std::vector<Image> batch_images = lb.images;
  UnlabeledBatch ub;
  if (with_unlabeled) {
    ub = sample_unlabeled_batch(pools, config, it);
    batch_images.insert(batch_images.end(), ub.strong.begin(), ub.strong.end());
  }
  const int nu = static_cast<int>(ub.strong.size());
  const Tensor<float> images = stack(batch_images, cfg.image_size);

  StudentObjective obj;
  obj.lambda = config.lambda;
  obj.unsup_roi_regression = config.unsup_roi_regression;
  if (cfg.norm == NormKind::kDataSpecific) {
    obj.segments = {{Split::kLabeled, 0, nl}, {Split::kUnlabeled, nl, nu}};
  } else {
    obj.segments = {{Split::kLabeled, 0, nl + nu}};
  }

  const StudentTrunk<float> trunk = student_trunk(state.student, images, obj.segments);
  add_supervised(obj, lb, trunk.rpn, cfg, anchors, config.student_proposals);

  if (with_unlabeled) {
    std::optional<InferenceResult<float>> teacher_view;
    if (active) {
      // (b) teacher on the weak view, merged-statistics inference.
      teacher_view = detect(state.teacher, stack(ub.weak, cfg.image_size), config.teacher_detect);
    }
    const FlexibleThresholds flex{config.tau_up, config.tau_low};
    for (int u = 0; u < nu; ++u) {
      const int row = nl + u;
      ImageObjective im;
      im.branch = LossBranch::kUnsupervised;
      if (!active) {
        im.anchors = ignored_anchor_targets(anchors.size());
        obj.images.push_back(std::move(im));
        continue;
      }
      const PseudoObjects pseudo = filter_pseudo_objects(teacher_view->detections[static_cast<std::size_t>(u)],
                                                         config.sigma);
      stats.pseudo_objects += static_cast<int>(pseudo.size());
      std::vector<BoundingBox> pseudo_boxes;
      for (const auto& d : pseudo) pseudo_boxes.push_back(d.box);
      // (c) proposal-stage targets from the pseudo objects.
      im.anchors = pseudo.empty() ? ignored_anchor_targets(anchors.size()) : make_anchor_targets(anchors, pseudo_boxes);

      const auto proposals = propose(trunk.rpn, row, cfg, anchors, config.student_proposals);
      if (proposals.empty()) {
        obj.images.push_back(std::move(im));
        continue;
      }
      const auto matches = match_to_ground_truth(proposals, pseudo_boxes, MatchThresholds::roi());
      std::vector<std::vector<double>> targets;
      std::vector<bool> keep(proposals.size(), true);
      if (config.interactive_teaching) {
        // (d) the student's boxes, verbatim, scored by the teacher on the weak view.
        std::vector<RoiRef> refs;
        for (const auto& p : proposals) refs.push_back({u, p});
        const auto probs = classify_boxes(state.teacher, teacher_view->features, std::span<const RoiRef>(refs));
        for (const auto& p : probs) {
          if (config.flexible_labels) {
            const FlexibleLabel fl = make_flexible_label(p, flex);
            stats.credible_positive += fl.count(Credibility::kPositive);
            stats.credible_negative += fl.count(Credibility::kNegative);
            stats.uncertain += fl.count(Credibility::kUncertain);
            targets.push_back(fl.values);
          } else {
            targets.push_back(p);
          }
        }
      } else {
        const auto kind = config.flexible_labels ? PseudoTargetKind::kFlexible : PseudoTargetKind::kSoft;
        const auto assigned =
            assign_by_iou(proposals, pseudo, MatchThresholds::roi(), kind, cfg.num_classes, flex);
        for (std::size_t r = 0; r < assigned.size(); ++r) {
          keep[r] = assigned[r].weight > 0.0;
          targets.push_back(assigned[r].values);
        }
      }
      // (e) student ROI classification against those targets.
      for (std::size_t r = 0; r < proposals.size(); ++r) {
        if (!keep[r]) continue;
        RoiSample s{{row, proposals[r]}, std::move(targets[r]), std::nullopt};
        if (matches[r].positive()) {
          s.regression = roi_regression_target(cfg, proposals[r], pseudo_boxes[static_cast<std::size_t>(matches[r].truth)]);
        }
        im.rois.push_back(std::move(s));
      }
      stats.unsup_rois += static_cast<int>(im.rois.size());
      obj.images.push_back(std::move(im));
    }
  }

  // (f) one optimizer step on the student.
  ParamSet<float> grads = state.student.weights.zeros_like();
  const LossBreakdown loss = evaluate_objective(state.student, images, obj, &trunk, &grads, &stats.counters);
  if (!loss.finite()) fail_non_finite(it, loss, stats);
  sgd_update(state.student.weights, state.velocity, grads, config);

  // (g) teacher follows the student: a copy during burn-in, EMA afterwards.
  if (it < config.burn_in) {
    state.teacher = state.student;
  } else {
    ema_update(state.teacher, state.student, config.ema_decay);
  }
  ++state.iteration;
  if (stats_out) *stats_out = stats;
  return loss;
}

// ---------------------------------------------------------------------------
// Supervised-only reference

SupervisedTrainer::SupervisedTrainer(const TrainConfig& config)
    : params(DetectorParams<float>::init(
          [&] {
            DetectorConfig d = config.detector;
            d.norm = NormKind::kBatch;
            return d;
          }(),
          derive_seed(config.seed, Stream::kInit))),
      velocity(params.weights.zeros_like()) {}

LossBreakdown SupervisedTrainer::step(const SamplePools& pools, const TrainConfig& config) {
  const DetectorConfig& cfg = params.config;
  const auto anchors = detector_anchors(cfg);
  const LabeledBatch lb = sample_labeled_batch(pools, config, iteration);
  const Tensor<float> images = stack(lb.images, cfg.image_size);
  StudentObjective obj;
  obj.lambda = 0.0;
  obj.segments = {{Split::kLabeled, 0, images.n}};
  const StudentTrunk<float> trunk = student_trunk(params, images, obj.segments);
  add_supervised(obj, lb, trunk.rpn, cfg, anchors, config.student_proposals);
  ParamSet<float> grads = params.weights.zeros_like();
  const LossBreakdown loss = evaluate_objective(params, images, obj, &trunk, &grads);
  if (!loss.finite()) throw TrainingError("non-finite supervised loss at step " + std::to_string(iteration));
  sgd_update(params.weights, velocity, grads, config);
  ++iteration;
  return loss;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'C', 'T', 'L', 'A', 'B', 'C', 'K', '1'};

struct NamedArray {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
};

void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  if (!is) throw IoError("checkpoint truncated");
  return v;
}

std::uint64_t get_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  if (!is) throw IoError("checkpoint truncated");
  return v;
}

const char* kSplitNames[2] = {"labeled", "unlabeled"};

void collect_model(const std::string& prefix, const DetectorParams<float>& p, std::vector<NamedArray>& out) {
  for (const auto& a : p.weights) {
    NamedArray n{prefix + "/" + a.name, {}, a.value};
    for (int d : a.shape) n.dims.push_back(static_cast<std::uint32_t>(d));
    out.push_back(std::move(n));
  }
  for (int l = 0; l < 3; ++l) {
    const std::string base = prefix + "/backbone.norm" + std::to_string(l + 1);
    const auto& s = p.norms[l];
    const auto c = static_cast<std::uint32_t>(s.channels());
    for (int k = 0; k < 2; ++k) {
      out.push_back({base + "." + kSplitNames[k] + ".mean", {c}, s.mean[k]});
      out.push_back({base + "." + kSplitNames[k] + ".var", {c}, s.var[k]});
      out.push_back({base + "." + kSplitNames[k] + ".updates", {1}, {static_cast<float>(s.updates[k])}});
    }
  }
}

const NamedArray& need(const std::vector<NamedArray>& arrays, const std::string& name) {
  for (const auto& a : arrays) {
    if (a.name == name) return a;
  }
  throw IoError("checkpoint lacks array " + name);
}

void restore_model(const std::string& prefix, DetectorParams<float>& p, const std::vector<NamedArray>& arrays) {
  for (auto& a : p.weights) {
    const auto& src = need(arrays, prefix + "/" + a.name);
    if (src.data.size() != a.value.size()) throw IoError("checkpoint array " + src.name + " has the wrong size");
    a.value = src.data;
  }
  for (int l = 0; l < 3; ++l) {
    const std::string base = prefix + "/backbone.norm" + std::to_string(l + 1);
    auto& s = p.norms[l];
    for (int k = 0; k < 2; ++k) {
      const auto& m = need(arrays, base + "." + kSplitNames[k] + ".mean");
      const auto& v = need(arrays, base + "." + kSplitNames[k] + ".var");
      if (m.data.size() != s.mean[k].size() || v.data.size() != s.var[k].size()) {
        throw IoError("checkpoint norm statistics have the wrong size");
      }
      s.mean[k] = m.data;
      s.var[k] = v.data;
      s.updates[k] = static_cast<long>(need(arrays, base + "." + kSplitNames[k] + ".updates").data.at(0));
    }
  }
}

}  // namespace

void write_checkpoint(const TeacherStudentState& state, const TrainConfig& config,
                      const std::filesystem::path& path) {
  TrainConfig echo = config;
  echo.halt_at = -1;
  const std::string cfg = echo.to_json().dump();
  std::vector<NamedArray> arrays;
  collect_model("student", state.student, arrays);
  collect_model("teacher", state.teacher, arrays);
  for (const auto& a : state.velocity) {
    NamedArray n{"optimizer/velocity/" + a.name, {}, a.value};
    for (int d : a.shape) n.dims.push_back(static_cast<std::uint32_t>(d));
    arrays.push_back(std::move(n));
  }

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write checkpoint " + tmp.string());
    os.write(kMagic, 8);
    put_u32(os, kCheckpointVersion);
    put_u32(os, static_cast<std::uint32_t>(cfg.size()));
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    put_u64(os, static_cast<std::uint64_t>(state.iteration));
    put_u32(os, static_cast<std::uint32_t>(arrays.size()));
    for (const auto& a : arrays) {
      put_u32(os, static_cast<std::uint32_t>(a.name.size()));
      os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
      put_u32(os, static_cast<std::uint32_t>(a.dims.size()));
      for (auto d : a.dims) put_u32(os, d);
      os.write(reinterpret_cast<const char*>(a.data.data()), static_cast<std::streamsize>(a.data.size() * 4));
    }
    if (!os) throw IoError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

LoadedCheckpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0) throw IoError(path.string() + " is not a checkpoint");
  const auto version = get_u32(is);
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  std::string cfg(get_u32(is), '\0');
  is.read(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  const auto iteration = get_u64(is);
  const auto count = get_u32(is);
  std::vector<NamedArray> arrays(count);
  for (auto& a : arrays) {
    a.name.resize(get_u32(is));
    is.read(a.name.data(), static_cast<std::streamsize>(a.name.size()));
    a.dims.resize(get_u32(is));
    std::size_t n = 1;
    for (auto& d : a.dims) {
      d = get_u32(is);
      n *= d;
    }
    a.data.resize(n);
    is.read(reinterpret_cast<char*>(a.data.data()), static_cast<std::streamsize>(n * 4));
    if (!is) throw IoError("checkpoint truncated in array " + a.name);
  }

  LoadedCheckpoint out;
  try {
    out.config = TrainConfig::from_json(nlohmann::json::parse(cfg));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint config is not valid JSON: ") + e.what());
  }
  out.state = TeacherStudentState::init(out.config);
  restore_model("student", out.state.student, arrays);
  restore_model("teacher", out.state.teacher, arrays);
  for (auto& a : out.state.velocity) a.value = need(arrays, "optimizer/velocity/" + a.name).data;
  out.state.iteration = static_cast<long>(iteration);
  return out;
}

// ---------------------------------------------------------------------------
// Full run

namespace {

/// Keeps metrics records whose iteration does not exceed `iteration`.
std::vector<nlohmann::json> load_metrics_prefix(const std::filesystem::path& path, long iteration) {
  std::vector<nlohmann::json> out;
  std::ifstream is(path);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("iteration")) continue;
    if (j.at("iteration").get<long>() <= iteration) out.push_back(std::move(j));
  }
  return out;
}

void rewrite_metrics(const std::filesystem::path& path, const std::vector<nlohmann::json>& records) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write metrics " + path.string());
  for (const auto& r : records) os << r.dump() << '\n';
}

}  // namespace

RunResult run_training(const SamplePools& pools, const TrainConfig& config, const RunOptions& options) {
  config.validate();
  if (pools.labeled.empty()) throw ConfigError("labeled pool is empty");
  if (config.unsupervised_enabled() && pools.unlabeled.empty()) throw ConfigError("unlabeled pool is empty");
  auto log = [&](const std::string& m) {
    if (options.log) options.log(m);
  };

  RunResult result;
  result.state = TeacherStudentState::init(config);
  if (options.resume && options.checkpoint_path && std::filesystem::exists(*options.checkpoint_path)) {
    auto loaded = read_checkpoint(*options.checkpoint_path);
    TrainConfig a = loaded.config, b = config;
    a.halt_at = b.halt_at = -1;
    a.iterations = b.iterations;
    if (a.to_json() != b.to_json()) throw ConfigError("checkpoint was written with a different configuration");
    result.state = std::move(loaded.state);
    log("resumed from step " + std::to_string(result.state.iteration));
    if (options.metrics_path) result.metrics = load_metrics_prefix(*options.metrics_path, result.state.iteration);
  }
  if (options.metrics_path) rewrite_metrics(*options.metrics_path, result.metrics);
  std::ofstream metrics_out;
  if (options.metrics_path) metrics_out.open(*options.metrics_path, std::ios::app);

  const auto start = std::chrono::steady_clock::now();
  const long total = config.iterations;
  auto save = [&] {
    if (options.checkpoint_path) write_checkpoint(result.state, config, *options.checkpoint_path);
  };
  while (result.state.iteration < total) {
    if (config.halt_at >= 0 && result.state.iteration >= config.halt_at) {
      save();
      result.halted = true;
      log("halted at step " + std::to_string(result.state.iteration));
      return result;
    }
    StepStats stats;
    const LossBreakdown loss = train_step(result.state, pools, config, &stats);
    const long done = result.state.iteration;
    const bool last = done == total;
    if (done % config.log_every == 0 || last) {
      nlohmann::json rec = loss.to_json();
      rec["iteration"] = done;
      rec["stats"] = stats.to_json();
      const bool eval_now = options.evaluator && (last || (config.eval_every > 0 && done % config.eval_every == 0));
      if (eval_now) rec["map"] = options.evaluator(result.state.teacher);
      rec["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      if (metrics_out.is_open()) {
        metrics_out << rec.dump() << '\n';
        metrics_out.flush();
      }
      log("step " + std::to_string(done) + " loss " + std::to_string(loss.total) +
          (rec.contains("map") ? " map " + std::to_string(rec["map"].get<double>()) : std::string()));
      result.metrics.push_back(std::move(rec));
    }
    if (last || (config.checkpoint_every > 0 && done % config.checkpoint_every == 0)) save();
  }
  if (total == 0) save();
  return result;
}

}  // namespace ctlab
