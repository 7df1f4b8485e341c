// SPDX-License-Identifier: Apache-2.0
//
// Drives the ctlab executable as a subprocess on tiny configurations.

#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ctlab/plot.hpp"

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
};

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ctlab_cli_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome run(const std::string& args, const fs::path& dir) {
  const fs::path log = dir / "stdout.txt";
  const std::string cmd = std::string(CTLAB_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  Outcome o;
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  o.out = slurp(log);
  return o;
}

/// Overrides for a dataset and schedule small enough to train in well under a second.
std::string tiny(const fs::path& out) {
  return "-s output_dir=" + out.string() +
         " -s dataset.n_labeled=16 -s dataset.n_unlabeled=24 -s dataset.n_test=10"
         " -s train.iterations=6 -s train.burn_in=2 -s train.labeled_batch=4 -s train.unlabeled_batch=4"
         " -s train.log_every=2 -s train.checkpoint_every=0";
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

}  // namespace

TEST_CASE("exit codes: usage and config errors give 2, runtime failures give 1") {
  const auto dir = scratch("codes");
  CHECK(run("", dir).code == 2);
  CHECK(run("frobnicate", dir).code == 2);
  CHECK(run("train --no-such-flag", dir).code == 2);
  CHECK(run("train -s train.lamda=0", dir).code == 2);
  CHECK(run("train -s train.tau_low=0.95", dir).code == 2);
  {
    std::ofstream f(dir / "bad.json");
    f << R"({"schema": "ctlab.experiment/v1", "trian": {}})";
  }
  const auto unknown = run("gen-data -c " + (dir / "bad.json").string(), dir);
  CHECK(unknown.code == 2);
  CHECK(unknown.out.find("trian") != std::string::npos);
  CHECK(run("gen-data -c " + (dir / "absent.json").string(), dir).code == 2);
  CHECK(run("--help", dir).code == 0);

  const auto missing = run("train -s output_dir=" + (dir / "empty").string(), dir);
  CHECK(missing.code == 1);
  CHECK(missing.out.find("no dataset") != std::string::npos);
}

TEST_CASE("gen-data: deterministic output and a contamination rate that matches a recount") {
  const auto dir = scratch("gen");
  const auto a = run("gen-data " + tiny(dir / "a"), dir);
  REQUIRE(a.code == 0);
  CHECK(run("gen-data " + tiny(dir / "b"), dir).code == 0);
  CHECK(fs::exists(dir / "a/data/meta.json"));
  for (const char* pool : {"labeled", "unlabeled", "test"}) {
    const auto rel = fs::path("data/pools") / pool / "annotations.json";
    CHECK(slurp(dir / "a" / rel) == slurp(dir / "b" / rel));
  }
  CHECK(slurp(dir / "a/data/pools/test/images/00003.png") == slurp(dir / "b/data/pools/test/images/00003.png"));

  // Recount from the annotation file, using the unknown names from meta.json.
  const auto meta = read_json(dir / "a/data/meta.json");
  std::set<std::string> unknown;
  for (const auto& n : meta.at("vocabulary").at("unknown")) unknown.insert(n.get<std::string>());
  const auto entries = read_json(dir / "a/data/pools/unlabeled/annotations.json");
  int with_unknown = 0;
  for (const auto& e : entries) {
    bool any = false;
    for (const auto& b : e.at("boxes")) any = any || unknown.count(b.at("category").get<std::string>()) > 0;
    with_unknown += any ? 1 : 0;
  }
  std::smatch m;
  REQUIRE(std::regex_search(a.out, m, std::regex(R"(unlabeled\s+(\d+)\s+(\d+)\s+([0-9.]+))")));
  CHECK(std::stoi(m[1]) == static_cast<int>(entries.size()));
  CHECK(std::stoi(m[2]) == with_unknown);
  CHECK(std::stod(m[3]) == doctest::Approx(static_cast<double>(with_unknown) / entries.size()).epsilon(1e-4));
}

TEST_CASE("train: metrics are JSON lines; interrupted-and-resumed equals uninterrupted") {
  const auto dir = scratch("train");
  REQUIRE(run("gen-data " + tiny(dir / "out"), dir).code == 0);

  REQUIRE(run("train " + tiny(dir / "out") + " -s run_name=full", dir).code == 0);
  const auto halted = run("train " + tiny(dir / "out") + " -s run_name=split -s train.halt_at=3", dir);
  REQUIRE(halted.code == 0);
  CHECK(halted.out.find("halted") != std::string::npos);
  CHECK(!fs::exists(dir / "out/runs/split/eval.json"));
  REQUIRE(run("train --resume " + tiny(dir / "out") + " -s run_name=split", dir).code == 0);

  const auto full = dir / "out/runs/full", split = dir / "out/runs/split";
  CHECK(slurp(full / "checkpoint.ckpt") == slurp(split / "checkpoint.ckpt"));

  const auto a = ctlab::read_metrics_log(full / "metrics.jsonl");
  const auto b = ctlab::read_metrics_log(split / "metrics.jsonl");
  CHECK(a.malformed == 0);
  CHECK(b.malformed == 0);
  REQUIRE(a.records.size() == 3);
  REQUIRE(b.records.size() == 3);
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    auto x = a.records[i], y = b.records[i];
    CHECK(x.contains("wall_seconds"));
    for (const char* k : {"sup_rpn_cls", "unsup_roi_cls", "total", "iteration"}) CHECK(x.contains(k));
    x.erase("wall_seconds");
    y.erase("wall_seconds");
    CHECK(x == y);
  }
  CHECK(a.records.back().contains("map"));

  // A repeated fresh run reproduces the checkpoint byte for byte.
  REQUIRE(run("train " + tiny(dir / "out") + " -s run_name=full", dir).code == 0);
  CHECK(slurp(full / "checkpoint.ckpt") == slurp(split / "checkpoint.ckpt"));
}

TEST_CASE("train: lambda 0 runs the supervised baseline") {
  const auto dir = scratch("baseline");
  REQUIRE(run("gen-data " + tiny(dir / "out"), dir).code == 0);
  REQUIRE(run("train " + tiny(dir / "out") + " -s train.lambda=0", dir).code == 0);
  const auto log = ctlab::read_metrics_log(dir / "out/runs/default/metrics.jsonl");
  REQUIRE(!log.records.empty());
  for (const auto& r : log.records) {
    CHECK(r.at("unsup_rpn_cls") == 0.0);
    CHECK(r.at("unsup_roi_cls") == 0.0);
    CHECK(r.at("lambda") == 0.0);
  }
}

TEST_CASE("eval: ground-truth detections score mAP 1; a checkpoint evaluates read-only") {
  const auto dir = scratch("eval");
  REQUIRE(run("gen-data " + tiny(dir / "out"), dir).code == 0);
  // Oracle fixture: the test pool's known-category annotations as detections.
  const auto entries = read_json(dir / "out/data/pools/test/annotations.json");
  const auto meta = read_json(dir / "out/data/meta.json");
  std::set<std::string> known;
  for (const auto& n : meta.at("vocabulary").at("known")) known.insert(n.get<std::string>());
  nlohmann::json images = nlohmann::json::array();
  for (const auto& e : entries) {
    nlohmann::json boxes = nlohmann::json::array();
    for (auto b : e.at("boxes")) {
      if (!known.count(b.at("category").get<std::string>())) continue;
      b["score"] = 1.0;
      boxes.push_back(b);
    }
    images.push_back({{"image", e.at("image")}, {"boxes", boxes}});
  }
  {
    std::ofstream f(dir / "oracle.json");
    f << nlohmann::json{{"format", "ctlab.detections/v1"}, {"images", images}}.dump();
  }
  const auto o = run("eval " + tiny(dir / "out") + " --detections " + (dir / "oracle.json").string() +
                         " --report " + (dir / "oracle_report.json").string(),
                     dir);
  REQUIRE(o.code == 0);
  const auto report = read_json(dir / "oracle_report.json");
  CHECK(report.at("schema") == "ctlab.eval/v1");
  CHECK(report.at("map").get<double>() == 1.0);

  CHECK(run("eval " + tiny(dir / "out"), dir).code == 1);  // no checkpoint yet
  REQUIRE(run("train " + tiny(dir / "out"), dir).code == 0);
  const auto ckpt = dir / "out/runs/default/checkpoint.ckpt";
  const std::string before = slurp(ckpt);
  REQUIRE(run("eval " + tiny(dir / "out") + " --report " + (dir / "r1.json").string() + " --save-detections " +
                  (dir / "d1.json").string(),
              dir)
              .code == 0);
  CHECK(slurp(ckpt) == before);
  // The run's own report was produced from the same teacher.
  CHECK(read_json(dir / "r1.json").at("map") == read_json(dir / "out/runs/default/eval.json").at("map"));
  // Scoring the saved detections reproduces the model's report.
  REQUIRE(run("eval " + tiny(dir / "out") + " --detections " + (dir / "d1.json").string() + " --report " +
                  (dir / "r2.json").string(),
              dir)
              .code == 0);
  CHECK(read_json(dir / "r2.json").at("map") == read_json(dir / "r1.json").at("map"));
  CHECK(run("eval " + tiny(dir / "out") + " --checkpoint a --detections b", dir).code == 2);
}

TEST_CASE("ablate and sweep: table layout, caching and plots") {
  const auto dir = scratch("harness");
  const std::string cfg = tiny(dir / "out") + " -s train.iterations=3 -s train.burn_in=1 -s ablation_seeds=[0]";
  REQUIRE(run("gen-data " + cfg, dir).code == 0);
  const auto first = run("ablate " + cfg, dir);
  REQUIRE(first.code == 0);
  const std::string csv = slurp(dir / "out/ablation.csv");
  std::istringstream lines(csv);
  std::string header;
  std::getline(lines, header);
  CHECK(header == "row,Flexible labels,IMT,DBN,seeds,completed,mAP_mean,mAP_std,mAP_min,mAP_max,status");
  int rows = 0;
  for (std::string l; std::getline(lines, l);) rows += l.empty() ? 0 : 1;
  CHECK(rows == 6);
  const auto again = run("ablate " + cfg, dir);
  REQUIRE(again.code == 0);
  CHECK(again.out.find("training ") == std::string::npos);
  CHECK(slurp(dir / "out/ablation.csv") == csv);

  const auto sweep = run("sweep " + cfg, dir);
  REQUIRE(sweep.code == 0);
  const auto sj = read_json(dir / "out/sweep.json");
  CHECK(sj.at("schema") == "ctlab.sweep/v1");
  CHECK(sj.at("points").size() == 10);
  // The base thresholds coincide with ablation row 6, so that run is reused.
  CHECK(sweep.out.find("cached ") != std::string::npos);

  REQUIRE(run("plot " + cfg + " -s run_name=none", dir).code == 0);
  CHECK(fs::file_size(dir / "out/plots/sweep.svg") > 0);
  CHECK(fs::file_size(dir / "out/plots/ablation.svg") > 0);
}

TEST_CASE("plot: a two-record metrics file with a malformed line") {
  const auto dir = scratch("plot");
  const auto run_dir = dir / "out/runs/default";
  fs::create_directories(run_dir);
  {
    std::ofstream f(run_dir / "metrics.jsonl");
    f << R"({"iteration": 100, "total": 2.5, "sup_rpn_cls": 0.6, "sup_roi_cls": 1.1, "unsup_roi_cls": 0.4, "map": 0.1})"
      << "\n"
      << "{\"iteration\": 2\n"
      << R"({"iteration": 200, "total": 1.9, "sup_rpn_cls": 0.5, "sup_roi_cls": 0.8, "unsup_roi_cls": 0.3, "map": 0.2})"
      << "\n";
  }
  const std::string cfg = "-s output_dir=" + (dir / "out").string();
  const auto o = run("plot " + cfg, dir);
  REQUIRE(o.code == 0);
  CHECK(o.out.find("skipped 1 malformed") != std::string::npos);
  for (const char* f : {"loss.svg", "map.svg"}) {
    REQUIRE(fs::exists(dir / "out/plots" / f));
    CHECK(fs::file_size(dir / "out/plots" / f) > 0);
  }
  const std::string loss = slurp(dir / "out/plots/loss.svg");
  REQUIRE(run("plot " + cfg, dir).code == 0);
  CHECK(slurp(dir / "out/plots/loss.svg") == loss);

  CHECK(run("plot -s output_dir=" + (dir / "nothing").string(), dir).code == 1);
}

TEST_CASE("output root comes from the environment for relative output directories") {
  const auto dir = scratch("env");
  const std::string cmd = "CTLAB_OUTPUT_ROOT=" + dir.string() + " " + CTLAB_CLI_PATH +
                          " gen-data -s output_dir=rel -s dataset.n_labeled=4 -s dataset.n_unlabeled=4"
                          " -s dataset.n_test=2 > /dev/null 2>&1";
  REQUIRE(std::system(cmd.c_str()) == 0);
  CHECK(fs::exists(dir / "rel/data/meta.json"));
}
