// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "ctlab/errors.hpp"
#include "ctlab/trainer.hpp"
#include "test_util.hpp"

using namespace ctlab;
using ctlab::testing::TempDir;

namespace {

const SamplePools& tiny_pools() {
  static const SamplePools pools = generate_pools(ctlab::testing::small_dataset(16, 32, 8), 21);
  return pools;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.labeled_batch = 4;
  c.unlabeled_batch = 4;
  c.burn_in = 3;
  c.iterations = 8;
  c.log_every = 2;
  c.checkpoint_every = 0;
  c.seed = 5;
  // A permissive filter so pseudo objects appear on an untrained teacher.
  c.sigma = 0.3;
  return c;
}

nlohmann::json strip_wall(nlohmann::json j) {
  j.erase("wall_seconds");
  return j;
}

}  // namespace

TEST_CASE("ema_update: worked values, fixed point and convexity") {
  TrainConfig cfg;
  auto teacher = DetectorParams<float>::init(cfg.detector, 1);
  auto student = DetectorParams<float>::init(cfg.detector, 2);
  teacher.weights[kClsB].value = {1.0f, 1.0f, 1.0f, 1.0f};
  student.weights[kClsB].value = {3.0f, 1.0f, -1.0f, 1.0f};
  student.norms[0].mean[0][0] = 0.25f;

  auto half = teacher;
  ema_update(half, student, 0.5);
  CHECK(half.weights[kClsB].value == std::vector<float>{2.0f, 1.0f, 0.0f, 1.0f});
  CHECK(half.norms == student.norms);

  auto keep = teacher;
  ema_update(keep, student, 1.0);
  CHECK(keep.weights == teacher.weights);
  auto copy = teacher;
  ema_update(copy, student, 0.0);
  CHECK(copy.weights == student.weights);

  // Teacher equal to student stays put exactly, for any m.
  auto same = student;
  for (double m : {0.996, 0.5, 0.1234567}) {
    ema_update(same, student, m);
    CHECK(same.weights == student.weights);
  }

  // Every entry lies between the two inputs.
  auto mixed = teacher;
  ema_update(mixed, student, 0.996);
  for (std::size_t a = 0; a < mixed.weights.count(); ++a) {
    for (std::size_t i = 0; i < mixed.weights[a].size(); ++i) {
      const float lo = std::min(teacher.weights[a].value[i], student.weights[a].value[i]);
      const float hi = std::max(teacher.weights[a].value[i], student.weights[a].value[i]);
      REQUIRE(mixed.weights[a].value[i] >= lo);
      REQUIRE(mixed.weights[a].value[i] <= hi);
    }
  }

  DetectorConfig other;
  other.hidden = 64;
  auto wrong = DetectorParams<float>::init(other, 1);
  CHECK_THROWS_AS(ema_update(wrong, student, 0.5), ShapeError);
}

TEST_CASE("sgd_update: momentum and weight decay arithmetic") {
  ParamSet<float> p, v, g;
  p.add("w", {2}).value = {1.0f, -2.0f};
  v.add("w", {2}).value = {0.0f, 1.0f};
  g.add("w", {2}).value = {0.5f, 0.0f};
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.momentum = 0.9;
  cfg.weight_decay = 0.01;
  sgd_update(p, v, g, cfg);
  CHECK(v[0].value[0] == doctest::Approx(0.51));
  CHECK(v[0].value[1] == doctest::Approx(0.9 - 0.02));
  CHECK(p[0].value[0] == doctest::Approx(1.0 - 0.051));
  CHECK(p[0].value[1] == doctest::Approx(-2.0 - 0.088));
}

TEST_CASE("config: validation and JSON round trip") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  auto bad = c;
  bad.tau_low = 0.9;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.lambda = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.labeled_batch = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.detector.image_size = 50;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  c.lambda = 4.0;
  c.dbn = false;
  c.student_proposals.top_k = 17;
  const auto back = TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  auto j = c.to_json();
  j["mystery"] = true;
  CHECK_THROWS_AS(TrainConfig::from_json(j), ConfigError);

  TrainConfig sup;
  sup.lambda = 0.0;
  CHECK(!sup.dbn_effective());
  CHECK(sup.effective_detector().norm == NormKind::kBatch);
  CHECK(TrainConfig{}.effective_detector().norm == NormKind::kDataSpecific);
}

TEST_CASE("batch sampling is deterministic per step") {
  const auto cfg = tiny_config();
  const auto a = sample_labeled_batch(tiny_pools(), cfg, 7);
  const auto b = sample_labeled_batch(tiny_pools(), cfg, 7);
  const auto c = sample_labeled_batch(tiny_pools(), cfg, 8);
  CHECK(a.indices == b.indices);
  CHECK(a.images.size() == 4);
  CHECK(a.boxes.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(a.images[i] == b.images[i]);
  CHECK(a.indices != c.indices);
  const auto u = sample_unlabeled_batch(tiny_pools(), cfg, 7);
  CHECK(u.weak.size() == 4);
  CHECK(u.strong.size() == 4);
  CHECK(u.indices == sample_unlabeled_batch(tiny_pools(), cfg, 7).indices);
}

TEST_CASE("lambda 0 trajectory is bit-identical to the supervised trainer") {
  auto cfg = tiny_config();
  cfg.lambda = 0.0;
  cfg.iterations = 30;
  auto state = TeacherStudentState::init(cfg);
  SupervisedTrainer sup(cfg);
  REQUIRE(state.student.weights == sup.params.weights);
  for (int s = 0; s < cfg.iterations; ++s) {
    const auto l1 = train_step(state, tiny_pools(), cfg);
    const auto l2 = sup.step(tiny_pools(), cfg);
    REQUIRE(l1.total == l2.total);
    REQUIRE(fingerprint(state.student.weights) == fingerprint(sup.params.weights));
    REQUIRE(state.velocity == sup.velocity);
    REQUIRE(state.student.norms == sup.params.norms);
  }
  CHECK(state.iteration == sup.iteration);
}

TEST_CASE("burn-in: teacher mirrors the student, then follows by EMA") {
  const auto cfg = tiny_config();
  auto state = TeacherStudentState::init(cfg);
  for (int s = 0; s < cfg.burn_in; ++s) {
    StepStats stats;
    const auto l = train_step(state, tiny_pools(), cfg, &stats);
    CHECK(!stats.unsupervised_active);
    CHECK(l.unsupervised() == 0.0);
    CHECK(state.teacher.weights == state.student.weights);
    CHECK(state.teacher.norms == state.student.norms);
  }
  auto before = state.teacher;
  StepStats stats;
  train_step(state, tiny_pools(), cfg, &stats);
  CHECK(stats.unsupervised_active);
  ema_update(before, state.student, cfg.ema_decay);
  CHECK(state.teacher.weights == before.weights);
  CHECK(!(state.teacher.weights == state.student.weights));
}

TEST_CASE("with DBN, burn-in losses match the supervised trainer") {
  // Unlabeled images join the forward during burn-in but carry no targets;
  // with per-split statistics they cannot influence the labeled branch.
  auto cfg = tiny_config();
  auto state = TeacherStudentState::init(cfg);
  SupervisedTrainer sup(cfg);
  for (int s = 0; s < cfg.burn_in; ++s) {
    const auto l1 = train_step(state, tiny_pools(), cfg);
    const auto l2 = sup.step(tiny_pools(), cfg);
    CHECK(l1.supervised() == l2.supervised());
  }
}

TEST_CASE("the teacher receives no gradient: ema_decay 1 freezes it") {
  auto cfg = tiny_config();
  cfg.ema_decay = 1.0;
  auto state = TeacherStudentState::init(cfg);
  for (int s = 0; s < cfg.burn_in; ++s) train_step(state, tiny_pools(), cfg);
  const auto frozen = fingerprint(state.teacher.weights);
  const auto student_before = fingerprint(state.student.weights);
  StepStats stats;
  for (int s = 0; s < 3; ++s) train_step(state, tiny_pools(), cfg, &stats);
  CHECK(stats.unsupervised_active);
  CHECK(fingerprint(state.teacher.weights) == frozen);
  CHECK(fingerprint(state.student.weights) != student_before);
}

TEST_CASE("training is deterministic in the seed") {
  const auto cfg = tiny_config();
  auto a = TeacherStudentState::init(cfg);
  auto b = TeacherStudentState::init(cfg);
  for (int s = 0; s < 5; ++s) {
    const auto la = train_step(a, tiny_pools(), cfg);
    const auto lb = train_step(b, tiny_pools(), cfg);
    CHECK(la.total == lb.total);
  }
  CHECK(a.student.weights == b.student.weights);
  CHECK(a.teacher.weights == b.teacher.weights);
  auto other = cfg;
  other.seed = 6;
  auto c = TeacherStudentState::init(other);
  train_step(c, tiny_pools(), other);
  CHECK(!(c.student.weights == a.student.weights));
}

TEST_CASE("ablation toggles all train") {
  for (int mask = 0; mask < 8; ++mask) {
    auto cfg = tiny_config();
    cfg.flexible_labels = mask & 1;
    cfg.interactive_teaching = mask & 2;
    cfg.dbn = mask & 4;
    cfg.unsup_roi_regression = mask == 7;
    auto state = TeacherStudentState::init(cfg);
    for (int s = 0; s < 5; ++s) {
      StepStats stats;
      const auto l = train_step(state, tiny_pools(), cfg, &stats);
      CHECK(l.finite());
      if (s >= cfg.burn_in && !cfg.flexible_labels) {
        CHECK(stats.credible_positive + stats.credible_negative == 0);
      }
    }
  }
}

TEST_CASE("checkpoint round trip and corruption") {
  TempDir dir("ckpt");
  auto cfg = tiny_config();
  auto state = TeacherStudentState::init(cfg);
  for (int s = 0; s < 4; ++s) train_step(state, tiny_pools(), cfg);
  const auto path = dir.path() / "model.ckpt";
  write_checkpoint(state, cfg, path);
  const auto loaded = read_checkpoint(path);
  CHECK(loaded.state.iteration == 4);
  CHECK(loaded.state.student.weights == state.student.weights);
  CHECK(loaded.state.teacher.weights == state.teacher.weights);
  CHECK(loaded.state.velocity == state.velocity);
  CHECK(loaded.state.student.norms == state.student.norms);
  CHECK(loaded.config.to_json() == cfg.to_json());

  // Bytes are a function of the state alone.
  write_checkpoint(loaded.state, loaded.config, dir.path() / "again.ckpt");
  CHECK(ctlab::testing::read_file(path) == ctlab::testing::read_file(dir.path() / "again.ckpt"));

  auto bytes = ctlab::testing::read_file(path);
  {
    std::ofstream os(dir.path() / "bad_magic.ckpt", std::ios::binary);
    os << "NOTACKPT" << bytes.substr(8);
  }
  CHECK_THROWS_AS(read_checkpoint(dir.path() / "bad_magic.ckpt"), IoError);
  {
    std::ofstream os(dir.path() / "short.ckpt", std::ios::binary);
    os << bytes.substr(0, bytes.size() / 2);
  }
  CHECK_THROWS_AS(read_checkpoint(dir.path() / "short.ckpt"), IoError);
  CHECK_THROWS_AS(read_checkpoint(dir.path() / "missing.ckpt"), IoError);
}

TEST_CASE("run_training: metrics cadence, interruption and resume") {
  TempDir dir("run");
  auto cfg = tiny_config();
  cfg.iterations = 9;
  cfg.log_every = 4;
  cfg.checkpoint_every = 3;

  RunOptions full;
  full.checkpoint_path = dir.path() / "full.ckpt";
  full.metrics_path = dir.path() / "full.jsonl";
  int evals = 0;
  full.evaluator = [&](const DetectorParams<float>&) { return 0.25 + 0.0 * ++evals; };
  const auto uninterrupted = run_training(tiny_pools(), cfg, full);
  // ceil(9 / 4) records: steps 4, 8 and the final step 9.
  REQUIRE(uninterrupted.metrics.size() == 3);
  CHECK(uninterrupted.metrics[2]["iteration"] == 9);
  CHECK(uninterrupted.metrics[2]["map"] == 0.25);
  CHECK(!uninterrupted.metrics[0].contains("map"));
  CHECK(evals == 1);

  RunOptions part = full;
  part.checkpoint_path = dir.path() / "part.ckpt";
  part.metrics_path = dir.path() / "part.jsonl";
  auto halting = cfg;
  halting.halt_at = 5;
  const auto first = run_training(tiny_pools(), halting, part);
  CHECK(first.halted);
  CHECK(first.state.iteration == 5);
  // A stray record past the checkpoint, as a crash after logging would leave.
  {
    std::ofstream os(*part.metrics_path, std::ios::app);
    os << "{\"iteration\": 99}\n";
  }
  part.resume = true;
  const auto second = run_training(tiny_pools(), cfg, part);
  CHECK(!second.halted);
  CHECK(second.state.iteration == 9);
  CHECK(ctlab::testing::read_file(*part.checkpoint_path) == ctlab::testing::read_file(*full.checkpoint_path));
  REQUIRE(second.metrics.size() == uninterrupted.metrics.size());
  for (std::size_t i = 0; i < second.metrics.size(); ++i) {
    CHECK(strip_wall(second.metrics[i]) == strip_wall(uninterrupted.metrics[i]));
  }

  // A changed configuration refuses to resume.
  auto changed = cfg;
  changed.learning_rate = 0.02;
  CHECK_THROWS_AS(run_training(tiny_pools(), changed, part), ConfigError);
}

TEST_CASE("run_training with zero iterations writes the initial state") {
  TempDir dir("zero");
  auto cfg = tiny_config();
  cfg.iterations = 0;
  RunOptions opts;
  opts.checkpoint_path = dir.path() / "m.ckpt";
  opts.metrics_path = dir.path() / "m.jsonl";
  const auto r = run_training(tiny_pools(), cfg, opts);
  CHECK(r.metrics.empty());
  CHECK(r.state.iteration == 0);
  CHECK(read_checkpoint(*opts.checkpoint_path).state.student.weights == TeacherStudentState::init(cfg).student.weights);
}

TEST_CASE("run_training rejects an empty unlabeled pool when lambda > 0") {
  auto pools = tiny_pools();
  pools.unlabeled.clear();
  CHECK_THROWS_AS(run_training(pools, tiny_config()), ConfigError);
  auto sup = tiny_config();
  sup.lambda = 0.0;
  sup.iterations = 1;
  CHECK_NOTHROW(run_training(pools, sup));
}
