// SPDX-License-Identifier: Apache-2.0
//
// Teacher-student engine. Each step runs the supervised branch on a labeled
// batch and, after burn-in, the unsupervised branch on an unlabeled batch:
// the teacher detects on the weak view, the student trains on the strong view
// against the teacher's pseudo objects and flexible labels. One SGD update of
// the student per step, then an EMA update of the teacher.
//
// All randomness of step i derives from (seed, stream, i), so a run resumed
// from a checkpoint continues on the identical trajectory.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctlab/detector.hpp"
#include "ctlab/labeling.hpp"
#include "ctlab/losses.hpp"
#include "ctlab/scenes.hpp"

namespace ctlab {

struct TrainConfig {
  double sigma = 0.9;
  double tau_up = 0.8;
  double tau_low = 0.05;
  double lambda = 2.0;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double ema_decay = 0.996;
  int burn_in = 500;
  int iterations = 4000;
  int labeled_batch = 8;
  int unlabeled_batch = 8;
  std::uint64_t seed = 0;

  bool flexible_labels = true;
  bool interactive_teaching = true;
  bool dbn = true;
  bool unsup_roi_regression = false;

  int log_every = 100;
  int eval_every = 0;         // 0: evaluate only after the last step
  int checkpoint_every = 500;  // 0: checkpoint only after the last step
  int halt_at = -1;            // stop (with a checkpoint) once this many steps are done

  ProposalOptions student_proposals{0.7, 64, 2.0};
  DetectOptions teacher_detect;
  DetectorConfig detector;

  void validate() const;
  bool unsupervised_enabled() const { return lambda > 0.0; }
  /// DBN only matters when unlabeled images pass through the student.
  bool dbn_effective() const { return dbn && unsupervised_enabled(); }
  DetectorConfig effective_detector() const;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

nlohmann::json detector_config_to_json(const DetectorConfig& c);
DetectorConfig detector_config_from_json(const nlohmann::json& j);

struct TeacherStudentState {
  DetectorParams<float> student;
  DetectorParams<float> teacher;
  ParamSet<float> velocity;
  long iteration = 0;

  static TeacherStudentState init(const TrainConfig& config);
};

/// teacher <- m * teacher + (1 - m) * student over trainable arrays; norm
/// running statistics are copied from the student. Throws ShapeError on
/// layout mismatch.
void ema_update(DetectorParams<float>& teacher, const DetectorParams<float>& student, double m);

/// One SGD-with-momentum update: v <- mu v + (g + wd theta); theta <- theta - lr v.
void sgd_update(ParamSet<float>& params, ParamSet<float>& velocity, const ParamSet<float>& grads,
                const TrainConfig& config);

/// Labeled batch of step `iteration`: indices and flip-augmented images and boxes.
struct LabeledBatch {
  std::vector<int> indices;
  std::vector<Image> images;
  std::vector<std::vector<BoundingBox>> boxes;
};
LabeledBatch sample_labeled_batch(const SamplePools& pools, const TrainConfig& config, long iteration);

struct UnlabeledBatch {
  std::vector<int> indices;
  std::vector<Image> weak;
  std::vector<Image> strong;
};
UnlabeledBatch sample_unlabeled_batch(const SamplePools& pools, const TrainConfig& config, long iteration);

/// Per-step diagnostics beyond the loss values.
struct StepStats {
  LossCounters counters;
  int pseudo_objects = 0;
  int unsup_rois = 0;
  int credible_positive = 0;
  int credible_negative = 0;
  int uncertain = 0;
  bool unsupervised_active = false;

  nlohmann::json to_json() const;
};

/// Runs one full step at state.iteration and advances it. Throws
/// TrainingError (with a diagnostic dump in the message) on a non-finite loss.
LossBreakdown train_step(TeacherStudentState& state, const SamplePools& pools, const TrainConfig& config,
                         StepStats* stats = nullptr);

/// Independent supervised-only trainer: same batches and optimizer, no
/// teacher, no unlabeled data. Reference for the lambda = 0 path.
struct SupervisedTrainer {
  DetectorParams<float> params;
  ParamSet<float> velocity;
  long iteration = 0;

  explicit SupervisedTrainer(const TrainConfig& config);
  LossBreakdown step(const SamplePools& pools, const TrainConfig& config);
};

// ---------------------------------------------------------------------------
// Checkpoints
//
// Little-endian binary:
//   "CTLABCK1" | u32 version | u32 len, config JSON | u64 iteration |
//   u32 count | count x (u32 len, name | u32 ndim | ndim x u32 dim | f32 data)
// Array names: student/<param>, teacher/<param>, optimizer/velocity/<param>,
// <model>/<norm>.{labeled,unlabeled}.{mean,var,updates}.

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const TeacherStudentState& state, const TrainConfig& config,
                      const std::filesystem::path& path);

struct LoadedCheckpoint {
  TeacherStudentState state;
  TrainConfig config;
};
LoadedCheckpoint read_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Full run

struct RunOptions {
  std::optional<std::filesystem::path> checkpoint_path;
  std::optional<std::filesystem::path> metrics_path;
  bool resume = false;
  /// Called with the teacher to obtain mAP; absent means no evaluation.
  std::function<double(const DetectorParams<float>&)> evaluator;
  std::function<void(const std::string&)> log;
};

struct RunResult {
  TeacherStudentState state;
  std::vector<nlohmann::json> metrics;
  bool halted = false;
};

/// Iterates train_step; writes JSON-lines metrics (one record per log
/// interval) and checkpoints. With resume set and a checkpoint present,
/// continues from it and truncates metrics past its iteration.
RunResult run_training(const SamplePools& pools, const TrainConfig& config, const RunOptions& options = {});

}  // namespace ctlab
