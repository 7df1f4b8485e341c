// SPDX-License-Identifier: Apache-2.0
//
// Bodies of the ctlab subcommands. Each takes a validated experiment config
// and writes human-readable progress to `out`; failures are reported by
// throwing (ConfigError for configuration problems), and the executable maps
// exceptions to exit codes.

#pragma once

#include <filesystem>
#include <optional>
#include <ostream>

#include "ctlab/evalkit.hpp"
#include "ctlab/experiment.hpp"

namespace ctlab {

/// Generates the pools into data/ and prints per-pool statistics.
void cmd_gen_data(const ExperimentConfig& exp, std::ostream& out);

/// Trains into runs/<run_name>/. Without `resume`, an existing checkpoint and
/// metrics log of that run are discarded first.
void cmd_train(const ExperimentConfig& exp, bool resume, std::ostream& out);

struct EvalInputs {
  std::optional<std::filesystem::path> checkpoint;  // default: runs/<run_name>/checkpoint.ckpt
  std::optional<std::filesystem::path> detections;  // a ctlab.detections/v1 file scored as is
  std::optional<std::filesystem::path> report;      // where to write the report
  std::optional<std::filesystem::path> save_detections;
};

/// Scores a checkpoint's teacher (or a detections file) on the test pool.
EvalReport cmd_eval(const ExperimentConfig& exp, const EvalInputs& inputs, std::ostream& out);

/// Writes ablation.csv and ablation.json.
AblationTable cmd_ablate(const ExperimentConfig& exp, std::ostream& out);

/// Writes sweep.csv and sweep.json.
SweepTable cmd_sweep(const ExperimentConfig& exp, std::ostream& out);

struct PlotSummary {
  int figures = 0;
  int malformed_lines = 0;
};

/// Renders whatever inputs exist: loss and mAP curves from the run's metrics
/// log, and bar charts from sweep.json and ablation.json. Writes to plots/.
PlotSummary cmd_plot(const ExperimentConfig& exp, std::ostream& out);

}  // namespace ctlab
