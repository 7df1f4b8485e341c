// SPDX-License-Identifier: Apache-2.0
//
// ctlab: single executable with one subcommand per stage. Every tunable lives
// in the experiment config; flags only pick the config, key=value overrides,
// and the input files of eval and train --resume.
//
// Exit codes: 0 success, 2 configuration or usage error, 1 anything else.

#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "ctlab/commands.hpp"
#include "ctlab/errors.hpp"

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "experiment config (JSON); defaults apply when omitted");
  cmd->add_option("-s,--set", c.overrides, "override a config key, e.g. --set train.lambda=0")->allow_extra_args(false);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ctlab: open-scene semi-supervised detection experiments on synthetic shapes"};
  app.require_subcommand(1);

  Common common;
  bool resume = false;
  ctlab::EvalInputs eval_inputs;
  std::string checkpoint, detections, report, save_detections;

  auto* gen = app.add_subcommand("gen-data", "generate the labeled, unlabeled and test pools");
  auto* train = app.add_subcommand("train", "train a run under runs/<run_name>");
  auto* eval = app.add_subcommand("eval", "score a checkpoint or a detections file on the test pool");
  auto* ablate = app.add_subcommand("ablate", "train and score the six ablation rows over the ablation seeds");
  auto* sweep = app.add_subcommand("sweep", "threshold sensitivity sweep");
  auto* plot = app.add_subcommand("plot", "render SVG figures from metrics and harness results");
  for (auto* cmd : {gen, train, eval, ablate, sweep, plot}) add_common(cmd, common);
  train->add_flag("--resume", resume, "continue from the run's checkpoint");
  auto* ckpt_opt = eval->add_option("--checkpoint", checkpoint, "checkpoint (default: the run's checkpoint)");
  eval->add_option("--detections", detections, "ctlab.detections/v1 file to score instead of a model")
      ->excludes(ckpt_opt);
  eval->add_option("--report", report, "write the report JSON here");
  eval->add_option("--save-detections", save_detections, "write the scored detections here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const auto exp = ctlab::ExperimentConfig::load(common.config, common.overrides);
    if (gen->parsed()) {
      ctlab::cmd_gen_data(exp, std::cout);
    } else if (train->parsed()) {
      ctlab::cmd_train(exp, resume, std::cout);
    } else if (eval->parsed()) {
      if (!checkpoint.empty()) eval_inputs.checkpoint = checkpoint;
      if (!detections.empty()) eval_inputs.detections = detections;
      if (!report.empty()) eval_inputs.report = report;
      if (!save_detections.empty()) eval_inputs.save_detections = save_detections;
      ctlab::cmd_eval(exp, eval_inputs, std::cout);
    } else if (ablate->parsed()) {
      ctlab::cmd_ablate(exp, std::cout);
    } else if (sweep->parsed()) {
      ctlab::cmd_sweep(exp, std::cout);
    } else if (plot->parsed()) {
      ctlab::cmd_plot(exp, std::cout);
    }
  } catch (const ctlab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
