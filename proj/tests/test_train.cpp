#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <filesystem>
#include <fstream>

#include "waveinst/train.hpp"

using namespace waveinst;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("waveinst_train_" + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

RunConfig tiny_run(int epochs = 2) {
  RunConfig c = parse_run_config(R"(
model:
  num_instances: 8
  backbone_widths: [4, 8, 8, 16]
  pyramid_width: 8
  fused_width: 8
  mask_width: 8
  kernel_dim: 8
  dysample_groups: 2
  dwt_widths: [4, 4, 8]
optimizer: {kind: adamw, lr: 0.003, weight_decay: 0.0}
schedule: {kind: constant, milestones: []}
augment: none
batch_size: 2
train_data:
  kind: synth
  count: 2
  synth: {height: 32, width: 32, trunk_width: [3, 6], branch_length: [4, 8]}
)");
  c.epochs = epochs;
  return c;
}

Dataset tiny_data(const RunConfig& c) { return load_dataset(c.train_data, c.categories); }

std::vector<double> loss_trace(const TrainResult& r) {
  std::vector<double> t;
  for (const auto& s : r.steps) t.push_back(s.loss.total);
  return t;
}

}  // namespace

TEST(RunConfig, DefaultsFollowTheBaseRecipe) {
  const auto c = parse_run_config("");
  EXPECT_EQ(c.optimizer.kind, "sgd");
  EXPECT_DOUBLE_EQ(c.optimizer.lr, 0.005);
  EXPECT_DOUBLE_EQ(c.optimizer.momentum, 0.9);
  EXPECT_DOUBLE_EQ(c.optimizer.weight_decay, 1e-4);
  EXPECT_EQ(c.schedule.milestones, (std::vector<int>{24, 33}));
  EXPECT_EQ(c.epochs, 36);
  EXPECT_DOUBLE_EQ(c.optimizer.clip_norm, 10.0);
  EXPECT_EQ(c.categories, default_categories());
}

TEST(RunConfig, YamlTypesAndRoundTrip) {
  const auto c = parse_run_config(R"(
seed: 42
epochs: 5
optimizer: {kind: adamw, lr: 1e-4, weight_decay: 0.05}
schedule: {kind: cosine, milestones: []}
model: {use_dwt: false, fusion: "add"}
augment:
  - {name: brightness, probability: 0.5, low: -0.1, high: 0.1}
frozen_stages: [backbone.stem]
)");
  EXPECT_EQ(c.seed, 42u);
  EXPECT_DOUBLE_EQ(c.optimizer.lr, 1e-4);
  EXPECT_FALSE(c.model.use_dwt);
  ASSERT_EQ(c.augment.ops.size(), 1u);
  EXPECT_EQ(c.frozen_stages, (std::vector<std::string>{"backbone.stem"}));
  const auto back = parse_run_config(to_yaml(c.to_json()));
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.fingerprint(), c.fingerprint());
}

TEST(RunConfig, FingerprintTracksContent) {
  auto a = tiny_run(), b = tiny_run();
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  EXPECT_EQ(a.fingerprint().size(), 16u);
  b.optimizer.lr *= 2;
  EXPECT_NE(a.fingerprint(), b.fingerprint());
}

TEST(RunConfig, InvalidConfigsAreRejected) {
  EXPECT_THROW(parse_run_config("epochs: 0"), ConfigError);
  EXPECT_THROW(parse_run_config("optimizer: {lr: 0}"), ConfigError);
  EXPECT_THROW(parse_run_config("optimizer: {kind: rmsprop}"), ConfigError);
  EXPECT_THROW(parse_run_config("schedule: {milestones: [33, 24]}"), ConfigError);
  EXPECT_THROW(parse_run_config("schedule: {milestones: [24, 36]}"), ConfigError);
  EXPECT_NO_THROW(parse_run_config("schedule: {kind: cosine}\nepochs: 10"));  // milestones only bind the step schedule
  EXPECT_THROW(parse_run_config("learning_rate: 0.1"), ConfigError);
  EXPECT_THROW(parse_run_config("optimizer: {lrr: 0.1}"), ConfigError);
  EXPECT_THROW(parse_run_config("train_data: {synth: {hight: 64}}"), ConfigError);
  EXPECT_THROW(parse_run_config("augment: [{name: blur}]"), ConfigError);
  EXPECT_THROW(parse_run_config("categories: [trunk]\nmodel: {num_classes: 2}"), ConfigError);
  EXPECT_THROW(parse_run_config("epochs: [1"), ConfigError);
  EXPECT_EQ(parse_run_config("categories: [tree]").model.num_classes, 1);
}

TEST(Schedule, PaperStepRecipe) {
  const auto c = parse_run_config("");
  const int spe = 3;
  const LrSchedule s(c.optimizer, c.schedule, c.epochs, spe);
  ASSERT_EQ(s.total_steps(), 36 * spe);
  for (int step = 0; step < s.total_steps(); ++step) {
    const int epoch = step / spe + 1;
    const double expect = epoch <= 24 ? 0.005 : epoch <= 33 ? 0.0005 : 0.00005;
    EXPECT_NEAR(s.at(step), expect, 1e-15) << "epoch " << epoch;
  }
}

TEST(Schedule, CosineEndpointsAndMonotone) {
  auto c = parse_run_config("optimizer: {kind: adamw, lr: 0.001}\nschedule: {kind: cosine, milestones: []}\nepochs: 10");
  const LrSchedule s(c.optimizer, c.schedule, c.epochs, 7);
  EXPECT_DOUBLE_EQ(s.at(0), 0.001);
  EXPECT_NEAR(s.at(s.total_steps() - 1), 0.0, 1e-18);
  const int last = s.total_steps() - 1;
  for (int i = 1; i <= last; ++i) {
    EXPECT_LE(s.at(i), s.at(i - 1));
    EXPECT_NEAR(s.at(i), 0.0005 * (1 + std::cos(std::numbers::pi * i / last)), 1e-15);
  }
}

TEST(Schedule, WarmupRampsLinearly) {
  auto c = parse_run_config("schedule: {kind: constant, milestones: [], warmup_steps: 4}");
  const LrSchedule s(c.optimizer, c.schedule, c.epochs, 2);
  EXPECT_DOUBLE_EQ(s.at(0), 0.005 / 4);
  EXPECT_DOUBLE_EQ(s.at(3), 0.005);
  EXPECT_DOUBLE_EQ(s.at(10), 0.005);
}

TEST(Optimizer, SgdMatchesHandComputation) {
  ParameterSet<float> ps;
  auto w = ps.add("w", Tensor<float>({2}, std::vector<float>{1.0f, -2.0f}));
  OptimizerConfig oc;
  oc.momentum = 0.5;
  oc.weight_decay = 0.1;
  Optimizer opt(ps, oc, {});
  w.mutable_grad() = Tensor<float>({2}, std::vector<float>{0.5f, 0.5f});
  opt.step(0.1);
  // d = g + wd p = (0.6, 0.3); p -= lr d
  EXPECT_FLOAT_EQ(w.value()[0], 0.94f);
  EXPECT_FLOAT_EQ(w.value()[1], -2.03f);
  opt.step(0.1);  // buf = 0.5 buf + (g + wd p)
  EXPECT_FLOAT_EQ(w.value()[0], 0.94f - 0.1f * (0.5f * 0.6f + 0.5f + 0.094f));
}

TEST(Optimizer, AdamWFirstStepIsSignStep) {
  ParameterSet<float> ps;
  auto w = ps.add("w", Tensor<float>({3}, std::vector<float>{1.0f, 1.0f, 1.0f}));
  OptimizerConfig oc;
  oc.kind = "adamw";
  oc.weight_decay = 0.0;
  Optimizer opt(ps, oc, {});
  w.mutable_grad() = Tensor<float>({3}, std::vector<float>{3.0f, -0.01f, 0.0f});
  opt.step(0.01);
  EXPECT_NEAR(w.value()[0], 0.99f, 1e-6);
  EXPECT_NEAR(w.value()[1], 1.01f, 1e-5);
  EXPECT_EQ(w.value()[2], 1.0f);
}

TEST(Optimizer, UnknownKindAndZeroLr) {
  ParameterSet<float> ps;
  ps.add("w", Tensor<float>({1}));
  OptimizerConfig oc;
  oc.kind = "lbfgs";
  EXPECT_THROW(Optimizer(ps, oc, {}), ConfigError);

  const auto c = tiny_run();
  Model m(c.model, 1);
  std::vector<Tensor<float>> before;
  for (auto& [_, v] : m.params().items()) before.push_back(v.value());
  Optimizer opt(m.params(), c.optimizer, {});
  const auto data = tiny_data(c);
  for (const auto& s : data.scenes) {
    m.params().zero_grad();
    backward(composite_loss(m.forward(Var<float>(s.image)), make_targets(s), c.loss).total);
    opt.step(0.0);
  }
  std::size_t k = 0;
  for (auto& [name, v] : m.params().items()) EXPECT_EQ(v.value().vec(), before[k++].vec()) << name;
}

TEST(Optimizer, FrozenPrefixesMatchWholeComponents) {
  EXPECT_TRUE(in_frozen_stage("backbone.stem.weight", {"backbone.stem"}));
  EXPECT_TRUE(in_frozen_stage("backbone.stage1.block1.conv1.bias", {"backbone.stage1"}));
  EXPECT_FALSE(in_frozen_stage("backbone.stage10.x", {"backbone.stage1"}));
  EXPECT_FALSE(in_frozen_stage("backbone.stage2.block1.conv1.bias", {"backbone.stem", "backbone.stage1"}));
}

TEST(Train, FrozenStagesUnchangedWithPretrainedSnapshot) {
  TempDir tmp("frozen");
  auto c = tiny_run(5);
  {
    Model m(c.model, 77);
    Checkpoint ck;
    capture_params(m.params(), ck);
    ck.config = c.to_json();
    save_checkpoint(tmp.path / "pre.ckpt", ck);
  }
  c.pretrained = (tmp.path / "pre.ckpt").string();
  c.frozen_stages = {"backbone.stem", "backbone.stage1"};
  c.train_data.count = 4;  // 2 steps per epoch, 10 steps total
  const auto data = tiny_data(c);
  const auto r = train(c, data);
  EXPECT_EQ(r.steps.size(), 10u);
  Model pre(c.model, 77);
  int frozen = 0, moved = 0;
  for (auto& [name, v] : r.model->params().items()) {
    const auto& orig = pre.params().get(name).value().vec();
    if (in_frozen_stage(name, c.frozen_stages)) {
      EXPECT_EQ(v.value().vec(), orig) << name;
      ++frozen;
    } else {
      moved += v.value().vec() != orig;
    }
  }
  EXPECT_GT(frozen, 0);
  EXPECT_GT(moved, 10);
}

TEST(Train, FrozenStagesIgnoredWithoutSnapshot) {
  auto c = tiny_run(1);
  c.frozen_stages = {"backbone.stem"};
  const auto r = train(c, tiny_data(c));
  ASSERT_EQ(r.notices.size(), 1u);
  EXPECT_NE(r.notices[0].find("ignored"), std::string::npos);
}

TEST(Train, TwoSceneOverfitDropsLossTenfold) {
  auto c = tiny_run(200);
  c.eval.every = 1000;
  const auto r = train(c, tiny_data(c));
  const auto t = loss_trace(r);
  ASSERT_EQ(t.size(), 200u);
  EXPECT_LT(t.back(), 0.1 * t.front()) << "first " << t.front() << " last " << t.back();
}

TEST(Train, DeterministicAndResumeReproducesTrace) {
  TempDir tmp("resume");
  auto c = tiny_run(4);
  c.augment = AugmentPolicy::standard();
  c.train_data.count = 3;
  const auto data = tiny_data(c);
  const auto full = train(c, data);
  const auto again = train(c, data);
  EXPECT_EQ(loss_trace(full), loss_trace(again));

  TrainOptions first;
  first.run_dir = tmp.path;
  first.stop_after_epoch = 2;
  const auto a = train(c, data, nullptr, first);
  EXPECT_EQ(a.last.epoch, 2);
  TrainOptions second;
  second.run_dir = tmp.path;
  second.resume = tmp.path / "last.ckpt";
  const auto b = train(c, data, nullptr, second);
  auto joined = loss_trace(a);
  const auto tail = loss_trace(b);
  joined.insert(joined.end(), tail.begin(), tail.end());
  ASSERT_EQ(joined.size(), loss_trace(full).size());
  for (std::size_t i = 0; i < joined.size(); ++i) EXPECT_NEAR(joined[i], loss_trace(full)[i], 1e-9) << "step " << i;
  EXPECT_EQ(b.last.history.size(), 4u);
  EXPECT_EQ(b.last.epoch, 4);
}

TEST(Train, ResumeRefusesForeignCheckpointUnlessForced) {
  TempDir tmp("foreign");
  auto c = tiny_run(2);
  const auto data = tiny_data(c);
  TrainOptions o;
  o.run_dir = tmp.path;
  o.stop_after_epoch = 1;
  train(c, data, nullptr, o);
  auto other = c;
  other.optimizer.lr = 0.001;
  TrainOptions r;
  r.resume = tmp.path / "last.ckpt";
  EXPECT_THROW(train(other, data, nullptr, r), ConfigError);
  r.force = true;
  EXPECT_EQ(train(other, data, nullptr, r).last.epoch, 2);
}

TEST(Train, RunDirectoryLayoutAndLog) {
  TempDir tmp("layout");
  auto c = tiny_run(2);
  const auto data = tiny_data(c);
  TrainOptions o;
  o.run_dir = tmp.path;
  train(c, data, nullptr, o);
  for (const char* f : {"config.yaml", "train_log.jsonl", "last.ckpt", "best.ckpt"})
    EXPECT_TRUE(fs::exists(tmp.path / f)) << f;
  EXPECT_EQ(load_run_config((tmp.path / "config.yaml").string()).fingerprint(), c.fingerprint());
  std::ifstream in(tmp.path / "train_log.jsonl");
  std::string line;
  int steps = 0, epochs = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    if (j["type"] == "step") {
      ++steps;
      const auto& l = j["loss"];
      const double sum = l["cls"].get<double>() + l["obj"].get<double>() + l["dice"].get<double>() + l["pix"].get<double>();
      EXPECT_NEAR(sum, l["total"].get<double>(), 1e-6);
      EXPECT_TRUE(j.contains("lr") && j.contains("grad_norm") && j.contains("clipped"));
    } else if (j["type"] == "epoch") {
      ++epochs;
      EXPECT_TRUE(j["summary"].contains("mAP"));
    }
  }
  EXPECT_EQ(steps, 2);
  EXPECT_EQ(epochs, 2);
}

TEST(Train, ClippingIsLoggedWhenTriggered) {
  auto c = tiny_run(1);
  c.optimizer.clip_norm = 1e-6;
  const auto r = train(c, tiny_data(c));
  ASSERT_FALSE(r.steps.empty());
  for (const auto& s : r.steps) EXPECT_TRUE(s.clipped);
  EXPECT_EQ(r.last.history[0]["clipped_steps"], 1);
}

TEST(Train, NonFiniteLossAbortsNamingTheBatch) {
  TempDir tmp("nan");
  auto c = tiny_run(1);
  auto data = tiny_data(c);
  data.scenes[1].image(0, 3, 3) = std::nanf("");
  TrainOptions o;
  o.run_dir = tmp.path;
  try {
    train(c, data, nullptr, o);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("image id 1 "), std::string::npos) << e.what();
  }
  ASSERT_TRUE(fs::exists(tmp.path / "nan_batch.json"));
  std::ifstream in(tmp.path / "nan_batch.json");
  EXPECT_EQ(nlohmann::json::parse(in)["image_id"], 1);
}

TEST(Train, RejectsEmptyOrMismatchedData) {
  auto c = tiny_run(1);
  Dataset empty;
  EXPECT_THROW(train(c, empty), InputError);
  auto data = tiny_data(c);
  data.categories = {"tree", "limb"};
  EXPECT_THROW(train(c, data), ConfigError);
}

TEST(Checkpoint, RoundTripForwardIsBitIdentical) {
  TempDir tmp("ckpt");
  auto c = tiny_run(1);
  const auto data = tiny_data(c);
  TrainOptions o;
  o.run_dir = tmp.path;
  const auto r = train(c, data, nullptr, o);
  const auto loaded = model_from_checkpoint(load_checkpoint(tmp.path / "last.ckpt"));
  NoGradGuard ng;
  const Var<float> x(data.scenes[0].image);
  const auto a = r.model->forward(x), b = loaded->forward(x);
  EXPECT_EQ(a.masks.value().vec(), b.masks.value().vec());
  EXPECT_EQ(a.logits.value().vec(), b.logits.value().vec());
  EXPECT_EQ(a.objectness.value().vec(), b.objectness.value().vec());
}

TEST(Checkpoint, GarbageIsRejected) {
  TempDir tmp("garbage");
  std::ofstream(tmp.path / "x.ckpt") << "not cbor";
  EXPECT_THROW(load_checkpoint(tmp.path / "x.ckpt"), InputError);
  EXPECT_THROW(load_checkpoint(tmp.path / "missing.ckpt"), InputError);
}

TEST(Evaluate, OracleScoresPerfect) {
  SynthConfig s;
  const auto d = generate_dataset(s, 5);
  const auto m = evaluate_oracle(d);
  EXPECT_DOUBLE_EQ(m.mAP, 100.0);
  EXPECT_DOUBLE_EQ(m.AP50, 100.0);
  EXPECT_DOUBLE_EQ(m.AR, 100.0);
}

TEST(Evaluate, EmptyMismatchedAndRepeatable) {
  auto c = tiny_run(1);
  Model m(c.model, 3);
  Dataset empty;
  EXPECT_THROW(evaluate(m, empty, c.categories, c.eval), InputError);
  EXPECT_THROW(evaluate_oracle(empty), InputError);
  auto data = tiny_data(c);
  auto wrong = data;
  wrong.categories = {"trunk", "leaf"};
  EXPECT_THROW(evaluate(m, wrong, c.categories, c.eval), ConfigError);
  const auto r1 = evaluation_report(evaluate(m, data, c.categories, c.eval), c.categories, 0).dump(2);
  const auto r2 = evaluation_report(evaluate(m, data, c.categories, c.eval), c.categories, 0).dump(2);
  EXPECT_EQ(r1, r2);
}

TEST(Evaluate, PredictHandlesSizesNotDivisibleBy32) {
  auto c = tiny_run(1);
  Model m(c.model, 3);
  Tensor<float> img({3, 40, 50}, 0.3f);
  c.eval.score_threshold = 0.0;
  const auto dets = predict(m, img, 0.0);
  ASSERT_EQ(dets.size(), 8u);
  EXPECT_EQ(dets[0].mask.height, 40);
  EXPECT_EQ(dets[0].mask.width, 50);
}

TEST(Data, PadSceneKeepsContent) {
  SceneAnnotation s;
  s.image = Tensor<float>({3, 5, 7}, 0.25f);
  BinaryMask m(5, 7);
  m.at(4, 6) = 1;
  s.instances.push_back({1, m});
  const auto p = pad_scene(s, 4);
  EXPECT_EQ(p.height(), 8);
  EXPECT_EQ(p.width(), 8);
  EXPECT_EQ(p.image(2, 4, 6), 0.25f);
  EXPECT_EQ(p.image(0, 7, 7), 0.0f);
  EXPECT_EQ(p.instances[0].mask.at(4, 6), 1);
  EXPECT_EQ(p.instances[0].mask.area(), 1u);
}

TEST(Data, SynthDataRequiresTrunkBranchCategories) {
  DataConfig d;
  EXPECT_THROW(load_dataset(d, {"tree"}), ConfigError);
  d.kind = "lidar";
  EXPECT_THROW(load_dataset(d, default_categories()), ConfigError);
}
