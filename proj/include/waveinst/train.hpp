#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "waveinst/coco_io.hpp"
#include "waveinst/config.hpp"
#include "waveinst/loss.hpp"
#include "waveinst/metrics.hpp"
#include "waveinst/model.hpp"

namespace waveinst {

struct TrainingError : Error {
  using Error::Error;
};

using Model = WaveInst<float>;

// ---- learning-rate schedule ----

/// Closed-form learning rate per optimisation step. Step decay multiplies by
/// `factor` once per milestone passed (a milestone of 24 means epochs 1-24
/// use the base rate). Cosine anneals from the base rate at step 0 to 0 at
/// the final step.
class LrSchedule {
 public:
  LrSchedule(const OptimizerConfig& opt, const ScheduleConfig& sched, int epochs, int steps_per_epoch)
      : base_(opt.lr), sched_(sched), epochs_(epochs), steps_per_epoch_(std::max(1, steps_per_epoch)) {}

  int total_steps() const { return epochs_ * steps_per_epoch_; }

  double at(int step) const {
    const int epoch = step / steps_per_epoch_;  // 0-based
    double lr = base_;
    if (sched_.kind == "step") {
      for (int m : sched_.milestones)
        if (epoch >= m) lr *= sched_.factor;
    } else if (sched_.kind == "cosine") {
      const int last = std::max(1, total_steps() - 1);
      lr = 0.5 * base_ * (1 + std::cos(std::numbers::pi * std::min(step, last) / last));
    }
    if (sched_.warmup_steps > 0 && step < sched_.warmup_steps) lr *= static_cast<double>(step + 1) / sched_.warmup_steps;
    return lr;
  }

 private:
  double base_;
  ScheduleConfig sched_;
  int epochs_, steps_per_epoch_;
};

// ---- optimizer ----

inline bool in_frozen_stage(const std::string& name, const std::vector<std::string>& frozen) {
  for (const auto& p : frozen)
    if (name == p || name.rfind(p + ".", 0) == 0) return true;
  return false;
}

/// SGD with momentum (coupled L2 decay) or AdamW (decoupled decay) over the
/// trainable subset of a parameter set.
class Optimizer {
 public:
  Optimizer(ParameterSet<float>& ps, const OptimizerConfig& cfg, const std::vector<std::string>& frozen)
      : cfg_(cfg) {
    if (cfg.kind != "sgd" && cfg.kind != "adamw") throw ConfigError("unknown optimizer kind '" + cfg.kind + "'");
    for (auto& [name, v] : ps.items()) {
      if (in_frozen_stage(name, frozen)) {
        frozen_.push_back(name);
        continue;
      }
      slots_.push_back({name, v, Tensor<float>(v.shape()), cfg.kind == "adamw" ? Tensor<float>(v.shape()) : Tensor<float>()});
    }
  }

  const OptimizerConfig& config() const { return cfg_; }
  const std::vector<std::string>& frozen() const { return frozen_; }
  std::size_t trainable_tensors() const { return slots_.size(); }
  long long steps() const { return steps_; }

  /// Global L2 norm of the trainable gradients.
  double grad_norm() const {
    double s = 0;
    for (const auto& sl : slots_)
      if (sl.var.has_grad())
        for (float g : sl.var.grad().vec()) s += static_cast<double>(g) * g;
    return std::sqrt(s);
  }

  void scale_grads(float f) {
    for (auto& sl : slots_)
      if (sl.var.has_grad())
        for (float& g : sl.var.mutable_grad().vec()) g *= f;
  }

  void step(double lr) {
    ++steps_;
    const float lrf = static_cast<float>(lr), wd = static_cast<float>(cfg_.weight_decay);
    for (auto& sl : slots_) {
      auto& p = sl.var.mutable_value().vec();
      const bool has = sl.var.has_grad();
      const float* g = has ? sl.var.grad().data() : nullptr;
      auto& m = sl.m.vec();
      if (cfg_.kind == "sgd") {
        const float mu = static_cast<float>(cfg_.momentum);
        for (std::size_t i = 0; i < p.size(); ++i) {
          const float d = (g ? g[i] : 0.0f) + wd * p[i];
          m[i] = steps_ == 1 ? d : mu * m[i] + d;
          p[i] -= lrf * m[i];
        }
      } else {
        auto& v = sl.v.vec();
        const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
        const double c1 = 1 - std::pow(cfg_.beta1, static_cast<double>(steps_));
        const double c2 = 1 - std::pow(cfg_.beta2, static_cast<double>(steps_));
        const float step_size = static_cast<float>(lr / c1), root_c2 = static_cast<float>(std::sqrt(c2));
        const float eps = static_cast<float>(cfg_.eps);
        for (std::size_t i = 0; i < p.size(); ++i) {
          const float gi = g ? g[i] : 0.0f;
          p[i] -= lrf * wd * p[i];
          m[i] = b1 * m[i] + (1 - b1) * gi;
          v[i] = b2 * v[i] + (1 - b2) * gi * gi;
          p[i] -= step_size * m[i] / (std::sqrt(v[i]) / root_c2 + eps);
        }
      }
    }
  }

  nlohmann::json state() const;
  void load_state(const nlohmann::json& j);

 private:
  struct Slot {
    std::string name;
    Var<float> var;
    Tensor<float> m, v;
  };
  OptimizerConfig cfg_;
  std::vector<Slot> slots_;
  std::vector<std::string> frozen_;
  long long steps_ = 0;
};

// ---- checkpoints ----

namespace detail {

inline nlohmann::json::binary_t pack(const Tensor<float>& t) {
  std::vector<std::uint8_t> bytes(t.size() * sizeof(float));
  if (!bytes.empty()) std::memcpy(bytes.data(), t.data(), bytes.size());
  return nlohmann::json::binary_t(std::move(bytes));
}

inline void unpack(const nlohmann::json& j, Tensor<float>& t, const std::string& what) {
  const auto& b = j.get_binary();
  if (b.size() != t.size() * sizeof(float)) throw InputError("checkpoint: size mismatch for " + what);
  if (!b.empty()) std::memcpy(t.data(), b.data(), b.size());
}

}  // namespace detail

inline nlohmann::json Optimizer::state() const {
  nlohmann::json j{{"kind", cfg_.kind}, {"steps", steps_}, {"slots", nlohmann::json::object()}};
  for (const auto& sl : slots_) {
    auto& e = j["slots"][sl.name];
    e["m"] = detail::pack(sl.m);
    if (cfg_.kind == "adamw") e["v"] = detail::pack(sl.v);
  }
  return j;
}

inline void Optimizer::load_state(const nlohmann::json& j) {
  if (j.at("kind").get<std::string>() != cfg_.kind) throw ConfigError("checkpoint: optimizer kind differs");
  steps_ = j.at("steps").get<long long>();
  for (auto& sl : slots_) {
    if (!j.at("slots").contains(sl.name)) throw InputError("checkpoint: no optimizer state for " + sl.name);
    const auto& e = j["slots"][sl.name];
    detail::unpack(e.at("m"), sl.m, sl.name);
    if (cfg_.kind == "adamw") detail::unpack(e.at("v"), sl.v, sl.name);
  }
}

struct Checkpoint {
  nlohmann::json config;  // RunConfig::to_json()
  std::string fingerprint;
  int epoch = 0;  // completed epochs
  long long step = 0;
  nlohmann::json params = nlohmann::json::object();  // name -> {shape, data}
  nlohmann::json optimizer;
  nlohmann::json history = nlohmann::json::array();  // one entry per completed epoch
  double best_map = -1;
};

inline void capture_params(const ParameterSet<float>& ps, Checkpoint& ck) {
  ck.params = nlohmann::json::object();
  for (const auto& [name, v] : ps.items()) ck.params[name] = {{"shape", v.shape()}, {"data", detail::pack(v.value())}};
}

/// Copies matching tensors into `ps`. With `strict`, names and shapes must
/// match exactly; otherwise unknown or reshaped entries are skipped.
/// Returns the number of tensors copied.
inline int restore_params(ParameterSet<float>& ps, const nlohmann::json& params, bool strict = true) {
  int copied = 0;
  for (auto& [name, v] : ps.items()) {
    if (!params.contains(name)) {
      if (strict) throw InputError("checkpoint: missing parameter " + name);
      continue;
    }
    const auto& e = params[name];
    if (e.at("shape").get<Shape>() != v.shape()) {
      if (strict) throw InputError("checkpoint: shape mismatch for " + name);
      continue;
    }
    detail::unpack(e.at("data"), v.mutable_value(), name);
    ++copied;
  }
  if (strict && params.size() != ps.size()) throw InputError("checkpoint: parameter count differs from the model");
  return copied;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  nlohmann::json j{{"format", "waveinst-checkpoint"},
                   {"version", 1},
                   {"config", ck.config},
                   {"fingerprint", ck.fingerprint},
                   {"epoch", ck.epoch},
                   {"step", ck.step},
                   {"params", ck.params},
                   {"optimizer", ck.optimizer},
                   {"history", ck.history},
                   {"best_map", ck.best_map}};
  const auto bytes = nlohmann::json::to_cbor(j);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  nlohmann::json j;
  try {
    j = nlohmann::json::from_cbor(bytes);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path.string() + ": not a checkpoint (" + e.what() + ")");
  }
  if (!j.is_object() || j.value("format", "") != "waveinst-checkpoint")
    throw InputError(path.string() + ": not a checkpoint");
  Checkpoint ck;
  ck.config = j.at("config");
  ck.fingerprint = j.at("fingerprint").get<std::string>();
  ck.epoch = j.at("epoch").get<int>();
  ck.step = j.at("step").get<long long>();
  ck.params = j.at("params");
  ck.optimizer = j.at("optimizer");
  ck.history = j.at("history");
  ck.best_map = j.at("best_map").get<double>();
  return ck;
}

inline std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& ck) {
  const auto cfg = RunConfig::from_json(ck.config);
  auto model = std::make_unique<Model>(cfg.model, cfg.seed);
  restore_params(model->params(), ck.params);
  return model;
}

// ---- data ----

/// Zero-pads image and masks at the bottom and right to a multiple of `m`.
inline SceneAnnotation pad_scene(const SceneAnnotation& s, int m) {
  const int H = s.height(), W = s.width();
  const int h = (H + m - 1) / m * m, w = (W + m - 1) / m * m;
  if (h == H && w == W) return s;
  SceneAnnotation out = s;
  out.image = Tensor<float>({3, h, w});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) out.image(c, y, x) = s.image(c, y, x);
  for (auto& g : out.instances) {
    BinaryMask pm(h, w);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) pm.at(y, x) = g.mask.at(y, x);
    g.mask = std::move(pm);
  }
  return out;
}

inline Dataset load_dataset(const DataConfig& d, const std::vector<std::string>& categories,
                            LoadReport* report = nullptr) {
  if (d.kind == "synth") {
    if (categories != default_categories())
      throw ConfigError("synthetic data provides the categories {trunk, branch}; the run configures " +
                        std::to_string(categories.size()) + " others");
    return generate_dataset(d.synth, d.count, d.first_index);
  }
  if (d.kind == "coco") {
    auto r = load_coco(d.annotations, d.images, categories);
    if (report) *report = r.report;
    return std::move(r.dataset);
  }
  throw ConfigError("unknown data kind '" + d.kind + "'");
}

inline std::vector<InstanceTarget<float>> make_targets(const SceneAnnotation& s) {
  std::vector<InstanceTarget<float>> t;
  t.reserve(s.instances.size());
  for (const auto& g : s.instances) t.push_back({g.category, downsample_area<float>(g.mask, 2)});
  return t;
}

// ---- inference and evaluation ----

/// Runs the network on one image of any size (padded internally to a
/// multiple of 32) and returns detections cropped to the image.
inline std::vector<Detection> predict(const Model& model, const Tensor<float>& image, double score_threshold) {
  NoGradGuard ng;
  SceneAnnotation tmp;
  tmp.image = image;
  const auto padded = pad_scene(tmp, 32);
  const auto preds = model.forward(Var<float>(padded.image));
  auto dets = postprocess(preds, score_threshold, padded.height(), padded.width());
  const int H = image.dim(1), W = image.dim(2);
  if (padded.height() != H || padded.width() != W)
    for (auto& d : dets) {
      BinaryMask m(H, W);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) m.at(y, x) = d.mask.at(y, x);
      d.mask = std::move(m);
    }
  return dets;
}

inline void require_evaluable(const Dataset& data, const std::vector<std::string>& categories) {
  if (data.empty()) throw InputError("evaluation dataset is empty");
  if (data.categories != categories)
    throw ConfigError("dataset categories do not match the model's category set");
}

inline CocoMetrics evaluate(const Model& model, const Dataset& data, const std::vector<std::string>& categories,
                            const EvalConfig& cfg) {
  require_evaluable(data, categories);
  EvalAccumulator acc(cfg.max_detections);
  for (const auto& s : data.scenes) acc.add_image(predict(model, s.image, cfg.score_threshold), s.instances);
  return acc.summarize();
}

/// Sanity path: ground truths scored as detections with confidence 1.
inline CocoMetrics evaluate_oracle(const Dataset& data) {
  if (data.empty()) throw InputError("evaluation dataset is empty");
  EvalAccumulator acc;
  for (const auto& s : data.scenes) {
    std::vector<Detection> dets;
    for (const auto& g : s.instances) dets.push_back({g.category, 1.0, g.mask});
    acc.add_image(dets, s.instances);
  }
  return acc.summarize();
}

inline nlohmann::ordered_json evaluation_report(const CocoMetrics& m, const std::vector<std::string>& categories,
                                                int checkpoint_epoch) {
  auto j = m.to_json(categories);
  j["checkpoint_epoch"] = checkpoint_epoch;
  return j;
}

// ---- training ----

struct TrainOptions {
  std::filesystem::path run_dir;  // empty: no files written
  std::filesystem::path resume;   // checkpoint to continue from
  bool force = false;             // resume despite a fingerprint mismatch
  int stop_after_epoch = 0;       // > 0: return after this many completed epochs
  std::ostream* progress = nullptr;
};

struct StepRecord {
  int epoch = 0;
  long long step = 0;
  std::vector<int> batch;  // image ids
  double lr = 0;
  LossBreakdown loss;
  double grad_norm = 0;
  bool clipped = false;
};

struct TrainResult {
  Checkpoint last;
  std::vector<StepRecord> steps;  // steps run in this call
  std::unique_ptr<Model> model;
  std::vector<std::string> notices;
};

inline nlohmann::json step_json(const StepRecord& r) {
  return {{"type", "step"},
          {"epoch", r.epoch},
          {"step", r.step},
          {"batch", r.batch},
          {"lr", r.lr},
          {"loss", {{"cls", r.loss.cls}, {"obj", r.loss.obj}, {"dice", r.loss.dice}, {"pix", r.loss.pix}, {"total", r.loss.total}}},
          {"grad_norm", r.grad_norm},
          {"clipped", r.clipped}};
}

/// Trains from `cfg` on `train_set`, evaluating on `val_set` (or the
/// training set) after epochs. Deterministic given the config: image order
/// and augmentation draw from streams keyed by (seed, epoch, image).
inline TrainResult train(const RunConfig& cfg, const Dataset& train_set, const Dataset* val_set = nullptr,
                         const TrainOptions& opt = {}) {
  cfg.validate();
  if (train_set.empty()) throw InputError("training dataset is empty");
  if (train_set.categories != cfg.categories)
    throw ConfigError("training data categories do not match the configured set");
  const Dataset& eval_set = val_set ? *val_set : train_set;
  require_evaluable(eval_set, cfg.categories);
  for (const auto& s : train_set.scenes) s.validate(static_cast<int>(cfg.categories.size()));

  TrainResult res;
  res.model = std::make_unique<Model>(cfg.model, cfg.seed);
  auto& model = *res.model;
  std::vector<std::string> frozen = cfg.frozen_stages;
  if (!cfg.pretrained.empty()) {
    const auto pre = load_checkpoint(cfg.pretrained);
    const int n = restore_params(model.params(), pre.params, false);
    res.notices.push_back("initialised " + std::to_string(n) + " tensors from " + cfg.pretrained);
  } else if (!frozen.empty()) {
    res.notices.push_back("frozen_stages ignored: no pretrained snapshot supplied");
    frozen.clear();
  }
  Optimizer optim(model.params(), cfg.optimizer, frozen);

  std::vector<SceneAnnotation> scenes;
  for (const auto& s : train_set.scenes) scenes.push_back(pad_scene(s, 32));
  const int n = static_cast<int>(scenes.size());
  const int steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const LrSchedule schedule(cfg.optimizer, cfg.schedule, cfg.epochs, steps_per_epoch);

  Checkpoint& ck = res.last;
  ck.config = cfg.to_json();
  ck.fingerprint = cfg.fingerprint();
  if (!opt.resume.empty()) {
    const auto prev = load_checkpoint(opt.resume);
    if (prev.fingerprint != ck.fingerprint && !opt.force)
      throw ConfigError("checkpoint " + opt.resume.string() + " was written by a different config (fingerprint " +
                        prev.fingerprint + " vs " + ck.fingerprint + "); pass force to resume anyway");
    restore_params(model.params(), prev.params);
    optim.load_state(prev.optimizer);
    ck.epoch = prev.epoch;
    ck.step = prev.step;
    ck.history = prev.history;
    ck.best_map = prev.best_map;
  }

  std::ofstream log;
  if (!opt.run_dir.empty()) {
    std::filesystem::create_directories(opt.run_dir);
    std::ofstream(opt.run_dir / "config.yaml") << to_yaml(cfg.to_json());
    log.open(opt.run_dir / "train_log.jsonl", opt.resume.empty() ? std::ios::trunc : std::ios::app);
  }
  auto note = [&](const std::string& msg) {
    if (opt.progress) *opt.progress << msg << '\n';
    if (log) log << nlohmann::json{{"type", "notice"}, {"message", msg}}.dump() << '\n';
  };
  for (const auto& m : res.notices) note(m);

  const float inv_batch = 1.0f / static_cast<float>(cfg.batch_size);
  for (int epoch = ck.epoch; epoch < cfg.epochs; ++epoch) {
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(mix_seed(cfg.seed, {0x5b, static_cast<std::uint64_t>(epoch)}));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0;
    int clipped = 0;
    for (int b = 0; b < steps_per_epoch; ++b) {
      StepRecord rec;
      rec.epoch = epoch + 1;
      rec.step = ck.step;
      rec.lr = schedule.at(static_cast<int>(ck.step));
      const int lo = b * cfg.batch_size, hi = std::min(n, lo + cfg.batch_size);
      model.params().zero_grad();
      for (int k = lo; k < hi; ++k) {
        const auto& scene = scenes[order[k]];
        rec.batch.push_back(scene.image_id);
        Rng aug_rng(mix_seed(cfg.seed, {0xa6, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(order[k])}));
        const auto view = augment(scene, cfg.augment, aug_rng);
        const auto preds = model.forward(Var<float>(view.image));
        auto loss = composite_loss(preds, make_targets(view), cfg.loss);
        auto abort_batch = [&](const std::string& what) {
          nlohmann::json dump{{"epoch", epoch + 1},
                              {"step", ck.step},
                              {"batch", rec.batch},
                              {"image_id", scene.image_id},
                              {"problem", what},
                              {"loss", {{"cls", loss.terms.cls}, {"obj", loss.terms.obj}, {"dice", loss.terms.dice}, {"pix", loss.terms.pix}}}};
          if (!opt.run_dir.empty()) std::ofstream(opt.run_dir / "nan_batch.json") << dump.dump(2) << '\n';
          throw TrainingError(what + " at epoch " + std::to_string(epoch + 1) + ", step " + std::to_string(ck.step) +
                              ", image id " + std::to_string(scene.image_id) + " (batch " + dump["batch"].dump() + ")");
        };
        if (!std::isfinite(loss.terms.total)) abort_batch("non-finite loss");
        backward(loss.total, inv_batch);
        if (!std::isfinite(optim.grad_norm())) abort_batch("non-finite gradient");
        const double s = 1.0 / cfg.batch_size;
        rec.loss.cls += s * loss.terms.cls;
        rec.loss.obj += s * loss.terms.obj;
        rec.loss.dice += s * loss.terms.dice;
        rec.loss.pix += s * loss.terms.pix;
      }
      rec.loss.total = rec.loss.cls + rec.loss.obj + rec.loss.dice + rec.loss.pix;
      rec.grad_norm = optim.grad_norm();
      if (cfg.optimizer.clip_norm > 0 && rec.grad_norm > cfg.optimizer.clip_norm) {
        optim.scale_grads(static_cast<float>(cfg.optimizer.clip_norm / (rec.grad_norm + 1e-6)));
        rec.clipped = true;
        ++clipped;
      }
      optim.step(rec.lr);
      model.params().zero_grad();
      ++ck.step;
      epoch_loss += rec.loss.total;
      if (log) log << step_json(rec).dump() << '\n';
      res.steps.push_back(std::move(rec));
    }

    ck.epoch = epoch + 1;
    nlohmann::json entry{{"epoch", ck.epoch}, {"mean_loss", epoch_loss / steps_per_epoch}, {"clipped_steps", clipped}};
    const bool do_eval = ck.epoch % cfg.eval.every == 0 || ck.epoch == cfg.epochs;
    bool best = false;
    if (do_eval) {
      const auto m = evaluate(model, eval_set, cfg.categories, cfg.eval);
      entry["mAP"] = m.mAP;
      entry["AP50"] = m.AP50;
      entry["AP75"] = m.AP75;
      entry["AR"] = m.AR;
      best = m.mAP > ck.best_map;
      if (best) ck.best_map = m.mAP;
    }
    ck.history.push_back(entry);
    capture_params(model.params(), ck);
    ck.optimizer = optim.state();
    if (!opt.run_dir.empty()) {
      save_checkpoint(opt.run_dir / "last.ckpt", ck);
      if (best) save_checkpoint(opt.run_dir / "best.ckpt", ck);
    }
    if (log) log << nlohmann::json{{"type", "epoch"}, {"summary", entry}}.dump() << '\n';
    if (opt.progress) *opt.progress << entry.dump() << '\n';
    if (opt.stop_after_epoch > 0 && ck.epoch >= opt.stop_after_epoch) break;
  }
  if (ck.params.empty()) {  // nothing left to run after resume
    capture_params(model.params(), ck);
    ck.optimizer = optim.state();
  }
  return res;
}

}  // namespace waveinst
