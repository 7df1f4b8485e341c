// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration and on-disk layout shared by the command-line
// tool and the acceptance harness.
//
// Layout under the output directory:
//   data/                 generated pools (gen-data)
//   runs/<name>/          named training run: checkpoint, metrics, eval report
//   cache/<key>/          runs launched by ablate and sweep, keyed by config hash
//   ablation.{csv,json}   sweep.{csv,json}   plots/

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctlab/evalkit.hpp"
#include "ctlab/scenes.hpp"
#include "ctlab/trainer.hpp"

namespace ctlab {

inline constexpr const char* kExperimentSchema = "ctlab.experiment/v1";

/// Overrides relative output directories when set.
inline constexpr const char* kOutputRootEnv = "CTLAB_OUTPUT_ROOT";

struct ExperimentConfig {
  std::string output_dir = "ctlab_out";
  std::string run_name = "default";
  std::uint64_t seed = 0;  // dataset seed; training seeds live in `train`
  DatasetConfig dataset;
  TrainConfig train;
  EvalOptions eval;
  std::vector<std::uint64_t> ablation_seeds{0, 1, 2};
  std::vector<double> sweep_tau_up = default_tau_up_grid();
  std::vector<double> sweep_tau_low = default_tau_low_grid();

  /// Throws ConfigError. Also checks that the detector head matches the vocabulary.
  void validate() const;

  nlohmann::json to_json() const;
  /// Requires the schema id; rejects unknown keys at every level.
  static ExperimentConfig from_json(const nlohmann::json& j);

  /// Reads a config file (or the defaults when `path` is empty), applies
  /// `key=value` overrides in order, then validates.
  static ExperimentConfig load(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

  std::filesystem::path output_root() const;
  std::filesystem::path data_dir() const { return output_root() / "data"; }
  std::filesystem::path run_dir() const { return output_root() / "runs" / run_name; }
  std::filesystem::path cache_dir() const { return output_root() / "cache"; }
};

/// Applies one `dotted.key=value` override to a config document. The key must
/// already exist (so typos fail loudly); the value is parsed as JSON and falls
/// back to a plain string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Loads the pools written by gen-data and checks they were generated from
/// this config's dataset section and seed. Throws IoError when absent and
/// ConfigError on a mismatch.
SamplePools load_dataset(const ExperimentConfig& exp);

// ---------------------------------------------------------------------------
// Runs

struct RunPaths {
  std::filesystem::path dir;
  std::filesystem::path checkpoint() const { return dir / "checkpoint.ckpt"; }
  std::filesystem::path metrics() const { return dir / "metrics.jsonl"; }
  std::filesystem::path report() const { return dir / "eval.json"; }
  std::filesystem::path config() const { return dir / "config.json"; }
};

/// Everything that determines a run's result: dataset, dataset seed, training
/// and evaluation settings. Echoed into reports and hashed by run_key.
nlohmann::json run_identity(const ExperimentConfig& exp, const TrainConfig& train);

/// Trains `train` on `pools` into `paths` (resuming when a checkpoint is
/// present), evaluates the teacher on the test pool and writes the report.
/// Returns nullopt when the run stopped at halt_at.
std::optional<EvalReport> train_and_evaluate(const ExperimentConfig& exp, const SamplePools& pools, const TrainConfig& train,
                              const RunPaths& paths, const std::function<void(const std::string&)>& log = {});

/// Stable hex digest of run_identity.
std::string run_key(const ExperimentConfig& exp, const TrainConfig& train);

/// Runner for the ablation and sweep harnesses: each configuration trains
/// once under cache/<key>/, and a finished run is loaded instead of retrained.
/// `pools` is held by reference and must outlive the runner.
RunFn cached_runner(const ExperimentConfig& exp, const SamplePools& pools,
                    std::function<void(const std::string&)> log = {});

// ---------------------------------------------------------------------------
// Detections files: per-image boxes with category names and scores, keyed by
// the image file names of the test pool.

nlohmann::json detections_to_json(const std::vector<std::vector<Detection>>& detections,
                                  const std::vector<Scene>& scenes, const CategoryVocabulary& vocab);
std::vector<std::vector<Detection>> detections_from_json(const nlohmann::json& j, const std::vector<Scene>& scenes,
                                                         const CategoryVocabulary& vocab);

}  // namespace ctlab
