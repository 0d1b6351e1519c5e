#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <yaml-cpp/yaml.h>

#include <json.hpp>

#include "waveinst/augment.hpp"
#include "waveinst/loss.hpp"
#include "waveinst/model.hpp"
#include "waveinst/synth.hpp"

namespace waveinst {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, num_classes, num_instances, backbone_widths,
                                                blocks_per_stage, pyramid_width, fused_width, mask_width, kernel_dim,
                                                dysample_groups, use_dysample, use_dwt, fusion, wavelet, dwt_widths)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LossWeights, cls, obj, dice, pix, match_alpha, focal_alpha,
                                                focal_gamma)

struct OptimizerConfig {
  std::string kind = "sgd";  // sgd | adamw
  double lr = 0.005;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double clip_norm = 10.0;  // global gradient norm; 0 disables
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(OptimizerConfig, kind, lr, momentum, weight_decay, beta1, beta2, eps,
                                                clip_norm)

struct ScheduleConfig {
  std::string kind = "step";          // step | cosine | constant
  std::vector<int> milestones{24, 33};  // step: decay after these epochs
  double factor = 0.1;
  int warmup_steps = 0;  // linear ramp from 0
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ScheduleConfig, kind, milestones, factor, warmup_steps)

struct DataConfig {
  std::string kind = "synth";  // synth | coco
  SynthConfig synth;
  int count = 20;
  int first_index = 0;
  std::string annotations, images;  // coco
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DataConfig, kind, synth, count, first_index, annotations, images)

struct EvalConfig {
  double score_threshold = 0.05;
  int every = 1;  // epochs between evaluations; the last epoch is always evaluated
  int max_detections = 100;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalConfig, score_threshold, every, max_detections)

inline void to_json(nlohmann::json& j, const AugmentPolicy& p) { j = p.ops; }
inline void from_json(const nlohmann::json& j, AugmentPolicy& p) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "standard")
      p = AugmentPolicy::standard();
    else if (s == "none")
      p = AugmentPolicy::identity();
    else
      throw ConfigError("augment: expected 'standard', 'none' or a list of transforms, got '" + s + "'");
    return;
  }
  p.ops = j.get<std::vector<AugmentOp>>();
}

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& section) {
  if (!j.is_object()) throw ConfigError(section + ": expected a mapping");
  for (const auto& [k, _] : j.items())
    if (!allowed.count(k)) throw ConfigError(section + ": unknown key '" + k + "'");
}

inline std::set<std::string> keys_of(const nlohmann::json& defaults) {
  std::set<std::string> s;
  for (const auto& [k, _] : defaults.items()) s.insert(k);
  return s;
}

template <typename C>
C parse_section(const nlohmann::json& j, const std::string& section) {
  check_keys(j, keys_of(nlohmann::json(C{})), section);
  try {
    return j.get<C>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(section + ": " + e.what());
  }
}

}  // namespace detail

/// Everything a training or evaluation run depends on.
struct RunConfig {
  std::vector<std::string> categories = default_categories();
  ModelConfig model;
  LossWeights loss;
  OptimizerConfig optimizer;
  ScheduleConfig schedule;
  int batch_size = 2;
  int epochs = 36;
  std::uint64_t seed = 0;
  std::vector<std::string> frozen_stages;  // parameter-name prefixes, honoured with `pretrained`
  std::string pretrained;                 // checkpoint used for initialisation
  AugmentPolicy augment = AugmentPolicy::standard();
  DataConfig train_data;
  std::optional<DataConfig> val_data;
  EvalConfig eval;

  void validate() const {
    if (categories.empty()) throw ConfigError("config: at least one category required");
    if (model.num_classes != static_cast<int>(categories.size()))
      throw ConfigError("config: model.num_classes (" + std::to_string(model.num_classes) + ") differs from " +
                        std::to_string(categories.size()) + " categories");
    model.validate();
    loss.validate();
    augment.validate();
    if (optimizer.kind != "sgd" && optimizer.kind != "adamw")
      throw ConfigError("config: unknown optimizer kind '" + optimizer.kind + "'");
    if (!(optimizer.lr > 0)) throw ConfigError("config: lr must be > 0");
    if (optimizer.clip_norm < 0 || optimizer.weight_decay < 0) throw ConfigError("config: negative clip or decay");
    if (epochs < 1) throw ConfigError("config: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
    if (schedule.kind != "step" && schedule.kind != "cosine" && schedule.kind != "constant")
      throw ConfigError("config: unknown schedule kind '" + schedule.kind + "'");
    for (std::size_t i = 0; schedule.kind == "step" && i < schedule.milestones.size(); ++i) {
      if (i && schedule.milestones[i] <= schedule.milestones[i - 1])
        throw ConfigError("config: decay epochs must be strictly increasing");
      if (schedule.milestones[i] < 1 || schedule.milestones[i] >= epochs)
        throw ConfigError("config: decay epoch " + std::to_string(schedule.milestones[i]) + " outside [1, epochs)");
    }
    if (schedule.warmup_steps < 0) throw ConfigError("config: warmup_steps must be >= 0");
    for (const auto* d : {&train_data, val_data ? &*val_data : nullptr}) {
      if (!d) continue;
      if (d->kind == "synth") {
        d->synth.validate();
        if (d->count < 1) throw ConfigError("config: data.count must be >= 1");
      } else if (d->kind != "coco") {
        throw ConfigError("config: unknown data kind '" + d->kind + "'");
      }
    }
    if (eval.every < 1 || eval.max_detections < 1) throw ConfigError("config: eval.every and max_detections >= 1");
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"categories", categories}, {"model", model},         {"loss", loss},
                     {"optimizer", optimizer},   {"schedule", schedule},   {"batch_size", batch_size},
                     {"epochs", epochs},         {"seed", seed},           {"frozen_stages", frozen_stages},
                     {"pretrained", pretrained}, {"augment", augment},     {"train_data", train_data},
                     {"eval", eval}};
    if (val_data) j["val_data"] = *val_data;
    return j;
  }

  static RunConfig from_json(const nlohmann::json& j) {
    detail::check_keys(j,
                       {"categories", "model", "loss", "optimizer", "schedule", "batch_size", "epochs", "seed",
                        "frozen_stages", "pretrained", "augment", "train_data", "val_data", "eval"},
                       "config");
    RunConfig c;
    try {
      c.categories = j.value("categories", c.categories);
      c.model.num_classes = static_cast<int>(c.categories.size());
      if (j.contains("model")) {
        auto m = nlohmann::json(c.model);
        m.update(j["model"]);
        c.model = detail::parse_section<ModelConfig>(m, "model");
      }
      if (j.contains("loss")) c.loss = detail::parse_section<LossWeights>(j["loss"], "loss");
      if (j.contains("optimizer")) c.optimizer = detail::parse_section<OptimizerConfig>(j["optimizer"], "optimizer");
      if (j.contains("schedule")) c.schedule = detail::parse_section<ScheduleConfig>(j["schedule"], "schedule");
      if (j.contains("train_data")) c.train_data = detail::parse_section<DataConfig>(j["train_data"], "train_data");
      if (j.contains("val_data") && !j["val_data"].is_null())
        c.val_data = detail::parse_section<DataConfig>(j["val_data"], "val_data");
      if (j.contains("eval")) c.eval = detail::parse_section<EvalConfig>(j["eval"], "eval");
      for (const char* s : {"train_data", "val_data"})
        if (j.contains(s) && j[s].is_object() && j[s].contains("synth"))
          detail::check_keys(j[s]["synth"], detail::keys_of(nlohmann::json(SynthConfig{})), std::string(s) + ".synth");
      c.batch_size = j.value("batch_size", c.batch_size);
      c.epochs = j.value("epochs", c.epochs);
      c.seed = j.value("seed", c.seed);
      c.frozen_stages = j.value("frozen_stages", c.frozen_stages);
      c.pretrained = j.value("pretrained", c.pretrained);
      if (j.contains("augment")) c.augment = j["augment"].get<AugmentPolicy>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
  }

  /// FNV-1a of the canonical JSON form; identifies runs for resume checks.
  std::string fingerprint() const {
    const std::string s = to_json().dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) h = (h ^ ch) * 0x100000001b3ULL;
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
  }
};

// ---- YAML bridge ----

inline nlohmann::json yaml_to_json(const YAML::Node& n) {
  switch (n.Type()) {
    case YAML::NodeType::Null:
    case YAML::NodeType::Undefined:
      return nullptr;
    case YAML::NodeType::Sequence: {
      auto a = nlohmann::json::array();
      for (const auto& e : n) a.push_back(yaml_to_json(e));
      return a;
    }
    case YAML::NodeType::Map: {
      auto o = nlohmann::json::object();
      for (const auto& kv : n) o[kv.first.as<std::string>()] = yaml_to_json(kv.second);
      return o;
    }
    case YAML::NodeType::Scalar:
      break;
  }
  const std::string s = n.Scalar();
  if (n.Tag() == "!") return s;  // quoted
  long long i;
  if (YAML::convert<long long>::decode(n, i)) return i;
  double d;
  if (YAML::convert<double>::decode(n, d)) return d;
  bool b;
  if (YAML::convert<bool>::decode(n, b)) return b;
  return s;
}

inline void emit_yaml(YAML::Emitter& out, const nlohmann::json& j) {
  if (j.is_object()) {
    out << YAML::BeginMap;
    for (const auto& [k, v] : j.items()) {
      out << YAML::Key << k << YAML::Value;
      emit_yaml(out, v);
    }
    out << YAML::EndMap;
  } else if (j.is_array()) {
    const bool flat = std::all_of(j.begin(), j.end(), [](const auto& e) { return e.is_primitive(); });
    out << (flat ? YAML::Flow : YAML::Block) << YAML::BeginSeq;
    for (const auto& e : j) emit_yaml(out, e);
    out << YAML::EndSeq;
  } else if (j.is_string()) {
    out << YAML::DoubleQuoted << j.get<std::string>();
  } else if (j.is_null()) {
    out << YAML::Null;
  } else {
    out << j.dump();  // numbers and booleans round-trip through their JSON text
  }
}

inline std::string to_yaml(const nlohmann::json& j) {
  YAML::Emitter out;
  emit_yaml(out, j);
  return std::string(out.c_str()) + "\n";
}

inline RunConfig parse_run_config(const std::string& yaml_text, const std::string& origin = "<string>") {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  if (root.IsNull()) return RunConfig::from_json(nlohmann::json::object());
  return RunConfig::from_json(yaml_to_json(root));
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path);
}

}  // namespace waveinst
