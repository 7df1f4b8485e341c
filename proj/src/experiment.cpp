// SPDX-License-Identifier: Apache-2.0

#include "ctlab/experiment.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "ctlab/errors.hpp"
#include "ctlab/json_util.hpp"

namespace ctlab {

namespace fs = std::filesystem;

namespace {

nlohmann::json read_json_file(const fs::path& path, bool config) {
  std::ifstream in(path);
  if (!in) {
    const std::string m = "cannot open " + path.string();
    if (config) throw ConfigError(m);
    throw IoError(m);
  }
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    const std::string m = path.string() + ": " + e.what();
    if (config) throw ConfigError(m);
    throw IoError(m);
  }
}

void write_json_file(const fs::path& path, const nlohmann::json& j) {
  // Write-then-rename so a reader never sees a half-written report.
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out << j.dump(2) << "\n";
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + ": " + ec.message());
}

nlohmann::json eval_to_json(const EvalOptions& e) {
  return {{"score_threshold", e.detect.score_threshold},
          {"nms_threshold", e.detect.nms_threshold},
          {"max_detections", e.detect.max_detections},
          {"proposals",
           {{"nms_threshold", e.detect.proposals.nms_threshold},
            {"top_k", e.detect.proposals.top_k},
            {"min_size", e.detect.proposals.min_size}}},
          {"iou_threshold", e.iou_threshold},
          {"batch", e.batch}};
}

EvalOptions eval_from_json(const nlohmann::json& j) {
  const char* ctx = "eval";
  require_known_keys(j, {"score_threshold", "nms_threshold", "max_detections", "proposals", "iou_threshold", "batch"},
                     ctx);
  EvalOptions e;
  read_opt(j, "score_threshold", e.detect.score_threshold, ctx);
  read_opt(j, "nms_threshold", e.detect.nms_threshold, ctx);
  read_opt(j, "max_detections", e.detect.max_detections, ctx);
  read_opt(j, "iou_threshold", e.iou_threshold, ctx);
  read_opt(j, "batch", e.batch, ctx);
  if (auto it = j.find("proposals"); it != j.end()) {
    const char* pctx = "eval.proposals";
    require_known_keys(*it, {"nms_threshold", "top_k", "min_size"}, pctx);
    read_opt(*it, "nms_threshold", e.detect.proposals.nms_threshold, pctx);
    read_opt(*it, "top_k", e.detect.proposals.top_k, pctx);
    read_opt(*it, "min_size", e.detect.proposals.min_size, pctx);
  }
  return e;
}

// FNV-1a; stable across platforms, unlike std::hash.
std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace

// ---------------------------------------------------------------------------
// ExperimentConfig

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (output_dir.empty()) fail("output_dir must not be empty");
  if (run_name.empty() || run_name.find('/') != std::string::npos || run_name == "." || run_name == "..") {
    fail("run_name must be a plain directory name");
  }
  dataset.validate();
  train.validate();
  if (train.detector.num_classes != dataset.vocabulary.n()) {
    fail("train.detector.num_classes (" + std::to_string(train.detector.num_classes) +
         ") must equal the number of known categories (" + std::to_string(dataset.vocabulary.n()) + ")");
  }
  if (train.detector.image_size != dataset.image_size) {
    fail("train.detector.image_size must equal dataset.image_size");
  }
  if (!(eval.iou_threshold > 0.0 && eval.iou_threshold <= 1.0)) fail("eval.iou_threshold must lie in (0, 1]");
  if (!(eval.detect.score_threshold >= 0.0 && eval.detect.score_threshold < 1.0)) {
    fail("eval.score_threshold must lie in [0, 1)");
  }
  if (eval.detect.max_detections < 1 || eval.detect.proposals.top_k < 1) {
    fail("eval.max_detections and eval.proposals.top_k must be positive");
  }
  if (eval.batch < 1) fail("eval.batch must be positive");
  if (ablation_seeds.empty()) fail("ablation_seeds must not be empty");
  if (sweep_tau_up.empty() || sweep_tau_low.empty()) fail("sweep grids must not be empty");
}

nlohmann::json ExperimentConfig::to_json() const {
  return {{"schema", kExperimentSchema},
          {"output_dir", output_dir},
          {"run_name", run_name},
          {"seed", seed},
          {"dataset", dataset.to_json()},
          {"train", train.to_json()},
          {"eval", eval_to_json(eval)},
          {"ablation_seeds", ablation_seeds},
          {"sweep", {{"tau_up", sweep_tau_up}, {"tau_low", sweep_tau_low}}}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  const char* ctx = "experiment";
  require_known_keys(j,
                     {"schema", "output_dir", "run_name", "seed", "dataset", "train", "eval", "ablation_seeds",
                      "sweep"},
                     ctx);
  if (j.value("schema", std::string()) != kExperimentSchema) {
    throw ConfigError(std::string("experiment: schema must be \"") + kExperimentSchema + "\"");
  }
  ExperimentConfig c;
  read_opt(j, "output_dir", c.output_dir, ctx);
  read_opt(j, "run_name", c.run_name, ctx);
  read_opt(j, "seed", c.seed, ctx);
  read_opt(j, "ablation_seeds", c.ablation_seeds, ctx);
  if (auto it = j.find("dataset"); it != j.end()) c.dataset = DatasetConfig::from_json(*it);
  if (auto it = j.find("train"); it != j.end()) c.train = TrainConfig::from_json(*it);
  if (auto it = j.find("eval"); it != j.end()) c.eval = eval_from_json(*it);
  if (auto it = j.find("sweep"); it != j.end()) {
    require_known_keys(*it, {"tau_up", "tau_low"}, "sweep");
    read_opt(*it, "tau_up", c.sweep_tau_up, "sweep");
    read_opt(*it, "tau_low", c.sweep_tau_low, "sweep");
  }
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path, const std::vector<std::string>& overrides) {
  ExperimentConfig c = path.empty() ? ExperimentConfig{} : from_json(read_json_file(path, true));
  if (!overrides.empty()) {
    nlohmann::json doc = c.to_json();
    for (const auto& o : overrides) apply_override(doc, o);
    c = from_json(doc);
  }
  c.validate();
  return c;
}

fs::path ExperimentConfig::output_root() const {
  const fs::path p(output_dir);
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv(kOutputRootEnv); root != nullptr && *root != '\0') return fs::path(root) / p;
  return p;
}

void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);

  nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw ConfigError("override: unknown key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  *node = std::move(value);
}

SamplePools load_dataset(const ExperimentConfig& exp) {
  SamplePools pools = read_pools(exp.data_dir());
  if (pools.seed != exp.seed || pools.config.to_json() != exp.dataset.to_json()) {
    throw ConfigError("dataset at " + exp.data_dir().string() +
                      " was generated from a different dataset section or seed; rerun gen-data");
  }
  return pools;
}

// ---------------------------------------------------------------------------
// Runs

nlohmann::json run_identity(const ExperimentConfig& exp, const TrainConfig& train) {
  TrainConfig t = train;
  t.halt_at = -1;
  return {{"seed", exp.seed}, {"dataset", exp.dataset.to_json()}, {"train", t.to_json()},
          {"eval", eval_to_json(exp.eval)}};
}

std::string run_key(const ExperimentConfig& exp, const TrainConfig& train) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a(run_identity(exp, train).dump())));
  return buf;
}

std::optional<EvalReport> train_and_evaluate(const ExperimentConfig& exp, const SamplePools& pools,
                                             const TrainConfig& train, const RunPaths& paths,
                                             const std::function<void(const std::string&)>& log) {
  std::error_code ec;
  fs::create_directories(paths.dir, ec);
  if (ec) throw IoError("cannot create " + paths.dir.string() + ": " + ec.message());
  const nlohmann::json identity = run_identity(exp, train);
  write_json_file(paths.config(), identity);

  const auto& vocab = pools.config.vocabulary;
  std::optional<EvalReport> last;
  RunOptions opts;
  opts.checkpoint_path = paths.checkpoint();
  opts.metrics_path = paths.metrics();
  opts.resume = true;
  opts.log = log;
  opts.evaluator = [&](const DetectorParams<float>& teacher) {
    last = evaluate(teacher, pools.test, vocab, exp.eval);
    return last->map;
  };
  RunResult result = run_training(pools, train, opts);
  if (result.halted) return std::nullopt;
  // The final step always evaluates; a resumed run that was already complete takes no step.
  if (!last) {
    last = evaluate(result.state.teacher, pools.test, vocab, exp.eval);
  }
  last->seed = train.seed;
  last->config = identity;
  write_json_file(paths.report(), last->to_json());
  return last;
}

RunFn cached_runner(const ExperimentConfig& exp, const SamplePools& pools,
                    std::function<void(const std::string&)> log) {
  return [exp, &pools, log](const TrainConfig& requested) {
    TrainConfig train = requested;
    train.halt_at = -1;
    const RunPaths paths{exp.cache_dir() / run_key(exp, train)};
    if (fs::exists(paths.report())) {
      try {
        EvalReport cached = EvalReport::from_json(read_json_file(paths.report(), false));
        if (cached.config == run_identity(exp, train)) {
          if (log) log("cached " + paths.dir.filename().string());
          return cached;
        }
      } catch (const std::exception&) {
        // Unreadable report: fall through and retrain (resuming from the checkpoint).
      }
    }
    if (log) log("training " + paths.dir.filename().string());
    auto report = train_and_evaluate(exp, pools, train, paths, log);
    if (!report) throw TrainingError("run halted before completion");
    return *report;
  };
}

// ---------------------------------------------------------------------------
// Detections files

nlohmann::json detections_to_json(const std::vector<std::vector<Detection>>& detections,
                                  const std::vector<Scene>& scenes, const CategoryVocabulary& vocab) {
  if (detections.size() != scenes.size()) throw ShapeError("one detection list per scene is required");
  nlohmann::json images = nlohmann::json::array();
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& d : detections[i]) {
      boxes.push_back({{"x1", d.box.x1},
                       {"y1", d.box.y1},
                       {"x2", d.box.x2},
                       {"y2", d.box.y2},
                       {"category", vocab.name(*d.box.category)},
                       {"score", d.box.score.value_or(1.0)}});
    }
    images.push_back({{"image", image_name(i)}, {"boxes", boxes}});
  }
  return {{"format", "ctlab.detections/v1"}, {"images", images}};
}

std::vector<std::vector<Detection>> detections_from_json(const nlohmann::json& j, const std::vector<Scene>& scenes,
                                                         const CategoryVocabulary& vocab) {
  if (!j.is_object() || j.value("format", std::string()) != "ctlab.detections/v1") {
    throw InputError("not a detections file (format must be ctlab.detections/v1)");
  }
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < scenes.size(); ++i) index[image_name(i)] = i;
  std::vector<std::vector<Detection>> out(scenes.size());
  try {
    for (const auto& e : j.at("images")) {
      const std::string name = e.at("image").get<std::string>();
      const auto it = index.find(name);
      if (it == index.end()) throw InputError("detections refer to unknown image " + name);
      for (const auto& b : e.at("boxes")) {
        Detection d;
        d.box = BoundingBox::make(b.at("x1").get<double>(), b.at("y1").get<double>(), b.at("x2").get<double>(),
                                  b.at("y2").get<double>(), vocab.id(b.at("category").get<std::string>()),
                                  b.at("score").get<double>());
        out[it->second].push_back(std::move(d));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("detections file: ") + e.what());
  }
  return out;
}

}  // namespace ctlab
