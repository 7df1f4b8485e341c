// SPDX-License-Identifier: Apache-2.0

#include "ctlab/commands.hpp"

#include <cstdio>
#include <fstream>

#include "ctlab/errors.hpp"
#include "ctlab/plot.hpp"

namespace ctlab {

namespace fs = std::filesystem;

namespace {

void write_file(const fs::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

std::function<void(const std::string&)> line_logger(std::ostream& out) {
  return [&out](const std::string& m) { out << m << '\n' << std::flush; };
}

void print_report(const EvalReport& r, std::ostream& out) {
  out << "category      truths  detections  AP\n";
  for (const auto& c : r.categories) {
    char line[128];
    std::snprintf(line, sizeof(line), "%-12s %7d %11d  %s\n", c.name.c_str(), c.truths, c.detections,
                  c.ap ? fmt("%.4f", *c.ap).c_str() : "n/a");
    out << line;
  }
  out << "mAP@" << r.iou_threshold << " = " << fmt("%.4f", r.map) << " over " << r.images << " images\n";
}

}  // namespace

void cmd_gen_data(const ExperimentConfig& exp, std::ostream& out) {
  const SamplePools pools = generate_pools(exp.dataset, exp.seed);
  const fs::path root = exp.data_dir();
  // Only clear a directory that holds a previous dataset, so shrinking a pool leaves no stale images.
  if (fs::exists(root / "meta.json")) fs::remove_all(root / "pools");
  write_pools(pools, root);

  const auto& vocab = exp.dataset.vocabulary;
  out << "wrote dataset (seed " << exp.seed << ") to " << root.string() << "\n";
  out << "pool        scenes  with_unknown  contamination";
  for (int c = 0; c < vocab.total(); ++c) out << "  " << vocab.name(c) << (vocab.is_known(c) ? "" : "*");
  out << "\n";
  for (PoolTag tag : {PoolTag::kLabeled, PoolTag::kUnlabeled, PoolTag::kTest}) {
    const auto st = pool_statistics(pools.pool(tag), tag, vocab);
    char line[128];
    std::snprintf(line, sizeof(line), "%-10s %7d %13d %14.4f", pool_name(tag), st.scenes, st.scenes_with_unknown,
                  st.contamination_rate());
    out << line;
    for (int n : st.objects_per_category) out << "  " << n;
    out << "\n";
  }
  out << "(* unknown category)\n";
}

void cmd_train(const ExperimentConfig& exp, bool resume, std::ostream& out) {
  const SamplePools pools = load_dataset(exp);
  const RunPaths paths{exp.run_dir()};
  if (!resume) {
    for (const auto& p : {paths.checkpoint(), paths.metrics(), paths.report()}) fs::remove(p);
  }
  const auto report = train_and_evaluate(exp, pools, exp.train, paths, line_logger(out));
  if (!report) {
    out << "halted; resume with: ctlab train --resume\n";
    return;
  }
  print_report(*report, out);
  out << "checkpoint: " << paths.checkpoint().string() << "\n";
}

EvalReport cmd_eval(const ExperimentConfig& exp, const EvalInputs& inputs, std::ostream& out) {
  if (inputs.checkpoint && inputs.detections) throw ConfigError("give either a checkpoint or a detections file");
  const SamplePools pools = load_dataset(exp);
  const auto& vocab = pools.config.vocabulary;
  std::vector<std::vector<Detection>> detections;
  nlohmann::json source;
  std::uint64_t seed = 0;
  if (inputs.detections) {
    detections = detections_from_json(read_json(*inputs.detections), pools.test, vocab);
    source = {{"detections", inputs.detections->string()}};
  } else {
    const fs::path ckpt = inputs.checkpoint.value_or(RunPaths{exp.run_dir()}.checkpoint());
    const auto loaded = read_checkpoint(ckpt);
    if (loaded.state.teacher.config.num_classes != vocab.n()) {
      throw ConfigError("checkpoint predicts " + std::to_string(loaded.state.teacher.config.num_classes) +
                        " classes, dataset has " + std::to_string(vocab.n()));
    }
    detections = detect_scenes(loaded.state.teacher, pools.test, exp.eval);
    seed = loaded.config.seed;
    source = {{"checkpoint", ckpt.string()}, {"iteration", loaded.state.iteration}, {"train", loaded.config.to_json()}};
  }
  EvalReport report = evaluate_detections(detections, pools.test, vocab, exp.eval.iou_threshold);
  report.seed = seed;
  report.config = source;
  print_report(report, out);
  if (inputs.report) write_file(*inputs.report, report.to_json().dump(2) + "\n");
  if (inputs.save_detections) {
    write_file(*inputs.save_detections, detections_to_json(detections, pools.test, vocab).dump(1) + "\n");
  }
  return report;
}

AblationTable cmd_ablate(const ExperimentConfig& exp, std::ostream& out) {
  const SamplePools pools = load_dataset(exp);
  const auto table = run_ablation(exp.train, exp.ablation_seeds, cached_runner(exp, pools, line_logger(out)));
  write_file(exp.output_root() / "ablation.csv", table.to_csv());
  write_file(exp.output_root() / "ablation.json", table.to_json().dump(2) + "\n");
  out << table.to_csv();
  return table;
}

SweepTable cmd_sweep(const ExperimentConfig& exp, std::ostream& out) {
  const SamplePools pools = load_dataset(exp);
  const auto table =
      run_sensitivity_sweep(exp.train, exp.sweep_tau_up, exp.sweep_tau_low, cached_runner(exp, pools, line_logger(out)));
  write_file(exp.output_root() / "sweep.csv", table.to_csv());
  write_file(exp.output_root() / "sweep.json", table.to_json().dump(2) + "\n");
  out << table.to_csv();
  return table;
}

PlotSummary cmd_plot(const ExperimentConfig& exp, std::ostream& out) {
  PlotSummary summary;
  const fs::path dir = exp.output_root() / "plots";
  auto emit = [&](const std::string& name, const std::string& svg) {
    write_file(dir / name, svg);
    out << "wrote " << (dir / name).string() << "\n";
    ++summary.figures;
  };

  const fs::path metrics = RunPaths{exp.run_dir()}.metrics();
  if (fs::exists(metrics)) {
    const MetricsLog log = read_metrics_log(metrics);
    summary.malformed_lines = log.malformed;
    if (log.malformed > 0) out << "warning: skipped " << log.malformed << " malformed metrics line(s)\n";
    Series total{"total", {}}, sup{"supervised", {}}, unsup{"unsupervised", {}}, map{"teacher mAP", {}};
    auto field = [](const nlohmann::json& r, const char* k) {
      auto it = r.find(k);
      return it != r.end() && it->is_number() ? it->get<double>() : 0.0;
    };
    for (const auto& r : log.records) {
      const double it = r["iteration"].get<double>();
      total.points.emplace_back(it, field(r, "total"));
      sup.points.emplace_back(it, field(r, "sup_rpn_cls") + field(r, "sup_rpn_reg") + field(r, "sup_roi_cls") +
                                      field(r, "sup_roi_reg"));
      unsup.points.emplace_back(it, field(r, "unsup_rpn_cls") + field(r, "unsup_rpn_reg") +
                                        field(r, "unsup_roi_cls") + field(r, "unsup_roi_reg"));
      if (r.contains("map") && r["map"].is_number()) map.points.emplace_back(it, r["map"].get<double>());
    }
    if (!log.records.empty()) {
      emit("loss.svg", line_chart_svg("Training loss (" + exp.run_name + ")", "iteration", "loss", {total, sup, unsup}));
    }
    if (!map.points.empty()) {
      emit("map.svg", line_chart_svg("Teacher mAP@0.5 (" + exp.run_name + ")", "iteration", "mAP", {map}));
    }
  }

  const fs::path sweep = exp.output_root() / "sweep.json";
  if (fs::exists(sweep)) {
    std::vector<Bar> bars;
    try {
      for (const auto& p : read_json(sweep).at("points")) {
        Bar b;
        b.label = p.at("axis").get<std::string>() == "tau_up" ? "up " + fmt("%g", p.at("tau_up").get<double>())
                                                               : "low " + fmt("%g", p.at("tau_low").get<double>());
        if (!p.at("report").is_null()) b.value = p.at("report").at("map").get<double>();
        bars.push_back(std::move(b));
      }
    } catch (const nlohmann::json::exception& e) {
      throw IoError(sweep.string() + ": " + e.what());
    }
    emit("sweep.svg", bar_chart_svg("Threshold sensitivity", "mAP@0.5", bars));
  }

  const fs::path ablation = exp.output_root() / "ablation.json";
  if (fs::exists(ablation)) {
    std::vector<Bar> bars;
    try {
      for (const auto& r : read_json(ablation).at("rows")) {
        Bar b;
        b.label = "(" + std::to_string(r.at("row").get<int>()) + ")";
        if (!r.at("reports").empty()) {
          b.value = r.at("map_mean").get<double>();
          b.error = r.at("map_std").get<double>();
        }
        bars.push_back(std::move(b));
      }
    } catch (const nlohmann::json::exception& e) {
      throw IoError(ablation.string() + ": " + e.what());
    }
    emit("ablation.svg", bar_chart_svg("Ablation (mean and std over seeds)", "mAP@0.5", bars));
  }

  if (summary.figures == 0) {
    throw IoError("nothing to plot: no metrics log at " + metrics.string() + " and no sweep or ablation results");
  }
  return summary;
}

}  // namespace ctlab
