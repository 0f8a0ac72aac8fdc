// SPDX-License-Identifier: Apache-2.0
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "scob/error.hpp"
#include "scob/trainer.hpp"

using namespace scob;
namespace fs = std::filesystem;

namespace {

Dataset toy(int classes = 4, int train = 64, std::uint64_t seed = 11, int max_pos = 2) {
  DatasetSpec spec;
  spec.num_classes = classes;
  spec.palette.resize(static_cast<std::size_t>(classes));
  spec.image_size = 32;
  spec.num_train = train;
  spec.num_val = 24;
  spec.max_positives = max_pos;
  spec.seed = seed;
  auto d = generate_dataset(spec);
  drop_to_single_positive(d, seed + 1);
  return d;
}

TrainConfig tiny() {
  TrainConfig c;
  c.epochs = 1;
  c.widths = {4, 8, 8, 8};
  c.d_model = 8;
  c.heads = 2;
  c.hidden_dim = 16;
  c.smt_layers = 1;
  c.negatives_k = 4;
  c.ipt_capacity = 8;
  c.wall_clock = false;
  return c;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string csv(const TrainState& st) {
  std::ostringstream os;
  write_metrics_csv(os, st.rows);
  return os.str();
}

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / ("scob_trainer_" + std::to_string(::getpid()))) {
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const char* name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("config text round trip and validation") {
  TrainConfig c = tiny();
  c.lambda_c = 0.123456789;
  c.no_cl = true;
  c.eval_masks = "zero";
  std::istringstream in(c.to_text());
  TrainConfig back;
  back.merge_text(in);
  CHECK(back == c);

  std::istringstream bad("epochs = 3\nnot_a_key = 1\n");
  CHECK_THROWS_AS(back.merge_text(bad), ConfigError);
  CHECK_THROWS_AS(back.set("epochs", "three"), ConfigError);
  CHECK_THROWS_AS(back.set("no_cl", "maybe"), ConfigError);
  back.set("epochs", " 7 ");
  CHECK(back.epochs == 7);
  back.set("epochs", "0");
  CHECK_THROWS_AS(back.validate(), ConfigError);

  TrainConfig z = tiny();
  z.lr_smt = 0;
  CHECK_THROWS_AS(z.validate(), ConfigError);
  z = tiny();
  z.no_cl = true;
  z.random_negatives = true;
  CHECK_THROWS_AS(z.validate(), ConfigError);
  z = tiny();
  z.widths = {4, 8, 8};
  CHECK_THROWS_AS(z.validate(), ConfigError);
  CHECK(TrainConfig{}.warmup_epochs() == 0);
  z = TrainConfig{};
  z.two_stage = true;
  CHECK(z.warmup_epochs() == 10);
}

TEST_CASE("one epoch on a toy set writes a checkpoint and one metrics row") {
  const auto data = toy();
  TempDir dir;
  RunOptions opt;
  opt.metrics_path = dir.file("metrics.csv");
  opt.checkpoint_path = dir.file("state.ckpt");
  opt.histogram_path = dir.file("hist.csv");
  auto st = run_bootstrap(tiny(), data, opt);
  CHECK(st.epoch == 1);
  CHECK(st.t == 8);
  REQUIRE(st.rows.size() == 1);
  CHECK(st.rows[0].loss_class > 0);
  CHECK(st.rows[0].loss_cont > 0);
  CHECK(fs::exists(opt.checkpoint_path));
  const auto text = slurp(opt.metrics_path);
  CHECK(text.rfind("epoch,t,loss_class,loss_cont,val_mAP,val_OF1,val_CF1,mean_unknown_neg_prob,wall_seconds\n", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 2);
  CHECK(st.forest.total_size() > 0);
  for (int c = 0; c < st.forest.num_classes(); ++c) CHECK(st.forest.tree(c).heap_ok());
  CHECK(st.histograms.size() == 1);
}

TEST_CASE("batch events follow the bootstrap order") {
  const auto data = toy();
  auto check_order = [&](TrainConfig c, std::vector<std::string> per_batch) {
    std::vector<std::string> events;
    RunOptions opt;
    opt.events = &events;
    run_bootstrap(c, data, opt);
    std::vector<std::string> expected;
    for (int b = 0; b < 8; ++b) expected.insert(expected.end(), per_batch.begin(), per_batch.end());
    expected.emplace_back("momentum");
    CHECK(events == expected);
  };
  check_order(tiny(), {"e_step", "ipt_insert", "m_step_class", "m_step_cont"});
  auto no_cl = tiny();
  no_cl.no_cl = true;
  check_order(no_cl, {"e_step", "m_step_class"});
  auto joint = tiny();
  joint.joint_optim = true;
  check_order(joint, {"m_step_class", "e_step", "ipt_insert", "m_step_cont"});

  auto per_step = tiny();
  per_step.momentum_per_step = true;
  std::vector<std::string> events;
  RunOptions opt;
  opt.events = &events;
  run_bootstrap(per_step, data, opt);
  CHECK(std::count(events.begin(), events.end(), "momentum") == 8);
  CHECK(events.back() == "momentum");
}

TEST_CASE("same seed gives a byte-identical metrics file") {
  const auto data = toy();
  TempDir dir;
  auto c = tiny();
  c.epochs = 2;
  RunOptions a, b;
  a.metrics_path = dir.file("a.csv");
  b.metrics_path = dir.file("b.csv");
  run_bootstrap(c, data, a);
  run_bootstrap(c, data, b);
  CHECK(slurp(a.metrics_path) == slurp(b.metrics_path));
  CHECK(slurp(a.metrics_path).size() > 100);
}

TEST_CASE("resuming from a checkpoint matches the uninterrupted run") {
  const auto data = toy();
  TempDir dir;
  auto c = tiny();
  c.epochs = 3;
  const auto full = run_bootstrap(c, data);

  RunOptions first;
  first.checkpoint_path = dir.file("resume.ckpt");
  first.stop_after_epoch = 1;
  const auto partial = run_bootstrap(c, data, first);
  CHECK(partial.epoch == 1);

  auto resumed = load_checkpoint(first.checkpoint_path);
  CHECK(resumed.nets.online.parameters().checksum() == partial.nets.online.parameters().checksum());
  run_bootstrap(resumed, data);
  CHECK(resumed.epoch == 3);
  CHECK(resumed.rows == full.rows);
  CHECK(csv(resumed) == csv(full));
  CHECK(resumed.nets.online.parameters().checksum() == full.nets.online.parameters().checksum());
  CHECK(resumed.nets.target.parameters().checksum() == full.nets.target.parameters().checksum());
  CHECK(std::equal(resumed.estimator.logits().begin(), resumed.estimator.logits().end(),
                   full.estimator.logits().begin(), full.estimator.logits().end()));
}

TEST_CASE("checkpoint bytes survive a load and save unchanged") {
  const auto data = toy();
  auto c = tiny();
  c.joint_optim = true;
  const auto st = run_bootstrap(c, data);
  std::stringstream a;
  save_checkpoint(st, a);
  const std::string bytes = a.str();
  std::stringstream in(bytes);
  const auto back = load_checkpoint(in);
  std::stringstream b;
  save_checkpoint(back, b);
  CHECK(b.str() == bytes);
  CHECK(back.config == c);
  CHECK(back.cached_masks.size() == data.train.size());

  std::string corrupt = bytes;
  corrupt[0] = 'X';
  std::stringstream bad(corrupt);
  CHECK_THROWS_AS(load_checkpoint(bad), FormatError);

  std::string version = bytes;
  version[4] = 9;
  std::stringstream vbad(version);
  CHECK_THROWS_WITH_AS(load_checkpoint(vbad), doctest::Contains("version"), FormatError);

  std::stringstream cut(bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS_AS(load_checkpoint(cut), FormatError);
}

TEST_CASE("no_cl changes the trajectory") {
  const auto data = toy();
  auto c = tiny();
  c.epochs = 2;
  const auto full = run_bootstrap(c, data);
  c.no_cl = true;
  const auto plain = run_bootstrap(c, data);
  CHECK(csv(full) != csv(plain));
  CHECK(plain.rows[0].loss_cont == 0);
  CHECK(plain.forest.total_size() == 0);
}

TEST_CASE("without negatives the contrastive step leaves the network alone") {
  auto data = toy(2, 96, 21);
  // keep only samples observed as class 0 so no other class ever enters the forest
  std::vector<ImageSample> kept;
  for (auto s : data.train) {
    if (!s.y[0]) continue;
    s.z = {1, 0};
    s.id = static_cast<int>(kept.size());
    kept.push_back(std::move(s));
  }
  data.train = std::move(kept);
  auto c = tiny();
  c.augment = false;
  c.batch_size = static_cast<int>(data.train.size());
  const auto full = run_bootstrap(c, data);
  CHECK(full.rows[0].loss_cont == 0);
  CHECK(full.forest.tree(1).empty());
  c.no_cl = true;
  const auto plain = run_bootstrap(c, data);
  CHECK(full.nets.online.parameters().checksum() == plain.nets.online.parameters().checksum());
}

TEST_CASE("classification loss falls on a separable two-class set") {
  const auto data = toy(2, 64, 31, 1);
  auto c = tiny();
  c.epochs = 7;  // 56 steps
  c.no_cl = true;
  const auto st = run_bootstrap(c, data);
  CHECK(st.t == 56);
  for (const auto& r : st.rows) CHECK(std::isfinite(r.loss_class));
  CHECK(st.rows.back().loss_class < st.rows.front().loss_class);
}

TEST_CASE("ablation switches run") {
  const auto data = toy();
  for (const char* flag : {"gt_masks", "two_stage", "no_cam", "random_negatives", "no_smt"}) {
    auto c = tiny();
    c.set(flag, "true");
    CAPTURE(flag);
    const auto st = run_bootstrap(c, data);
    CHECK(st.rows.size() == 1);
    CHECK(std::isfinite(st.rows[0].val.map));
  }
}

TEST_CASE("evaluation helpers") {
  const auto data = toy();
  auto c = tiny();
  const auto st = run_bootstrap(c, data);
  const auto scores = predict(st.nets.online, data.val, c);
  CHECK(scores.rows == static_cast<int>(data.val.size()));
  c.eval_masks = "zero";
  const auto plain = predict(st.nets.online, data.val, c);
  CHECK(plain.labels == scores.labels);
  const Real k = mean_positive_count(scores);
  CHECK(k > 0);
  CHECK(k < 4);
  const auto q = cam_quality(st.nets.online, data.val, c);
  CHECK(q.combined.true_pos == q.stage3.true_pos + q.stage4.true_pos);
  CHECK(q.combined.f1 >= 0);
  CHECK(q.combined.f1 <= 1);
}

TEST_CASE("run_bootstrap preconditions") {
  auto data = toy();
  TrainState st(tiny(), data);
  auto other = toy(4, 32);
  CHECK_THROWS_AS(run_bootstrap(st, other), ContractError);
  data.single_positive = false;
  CHECK_THROWS_AS(run_bootstrap(st, data), ContractError);
}
