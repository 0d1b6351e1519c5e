// waveinst command-line front end.
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "waveinst/coco_io.hpp"
#include "waveinst/phenotype.hpp"
#include "waveinst/train.hpp"

namespace fs = std::filesystem;
using namespace waveinst;
using json = nlohmann::ordered_json;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool json_out = false;
  bool quiet = false;
};

void add_common(CLI::App* app, Common& c, bool out_required = true) {
  app->add_option("--config", c.config, "YAML run config")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "override the config seed");
  auto* o = app->add_option("--out", c.out, "output directory");
  if (out_required) o->required();
  app->add_flag("--json", c.json_out, "machine-readable result on stdout");
  app->add_flag("-q,--quiet", c.quiet, "no progress on stderr");
}

RunConfig run_config(const Common& c) {
  RunConfig cfg = c.config.empty() ? parse_run_config("") : load_run_config(c.config);
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.train_data.synth.seed = *c.seed;
    if (cfg.val_data) cfg.val_data->synth.seed = *c.seed;
  }
  return cfg;
}

void emit(const Common& c, const json& result, const std::string& human) {
  if (c.json_out)
    std::cout << result.dump(2) << '\n';
  else
    std::cout << human << '\n';
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  if (!out) throw Error("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

Dataset dataset_from_dir(const std::string& dir, const std::vector<std::string>& categories, std::ostream& log) {
  auto r = load_coco(fs::path(dir) / "annotations.json", fs::path(dir) / "images", categories);
  for (const auto& m : r.report.messages) log << "warning: " << m << '\n';
  return std::move(r.dataset);
}

std::ostream& progress_stream(const Common& c) {
  static std::ostream null(nullptr);
  return c.quiet ? null : std::cerr;
}

// ---- subcommands ----

int cmd_synth(const Common& c, std::optional<int> count) {
  const auto cfg = run_config(c);
  fs::create_directories(c.out);
  json manifest{{"generator", "waveinst-synth"}, {"version", 1}, {"splits", json::array()}};
  std::vector<std::pair<std::string, DataConfig>> splits{{"train", cfg.train_data}};
  if (cfg.val_data) splits.emplace_back("val", *cfg.val_data);
  json result{{"out", c.out}, {"splits", json::object()}};
  for (auto& [name, d] : splits) {
    if (d.kind != "synth") throw ConfigError("synth: split '" + name + "' is not synthetic");
    if (count) d.count = *count;
    const auto data = generate_dataset(d.synth, d.count, d.first_index);
    export_coco(data, fs::path(c.out) / name);
    std::size_t instances = 0;
    for (const auto& s : data.scenes) instances += s.instances.size();
    manifest["splits"].push_back({{"name", name},
                                  {"config", nlohmann::json(d.synth)},
                                  {"seed", d.synth.seed},
                                  {"first_index", d.first_index},
                                  {"count", d.count},
                                  {"instances", instances}});
    result["splits"][name] = {{"images", d.count}, {"instances", instances}};
  }
  write_json(fs::path(c.out) / "manifest.json", manifest);
  emit(c, result, "wrote " + std::to_string(splits.size()) + " split(s) to " + c.out);
  return 0;
}

int cmd_train(const Common& c, const std::string& data_dir, const std::string& val_dir, const std::string& resume,
              bool force, std::optional<int> epochs) {
  auto cfg = run_config(c);
  if (epochs) {
    cfg.epochs = *epochs;
    cfg.validate();
  }
  auto& log = progress_stream(c);
  const Dataset train_set =
      data_dir.empty() ? load_dataset(cfg.train_data, cfg.categories) : dataset_from_dir(data_dir, cfg.categories, log);
  std::optional<Dataset> val;
  if (!val_dir.empty())
    val = dataset_from_dir(val_dir, cfg.categories, log);
  else if (cfg.val_data)
    val = load_dataset(*cfg.val_data, cfg.categories);
  TrainOptions opt;
  opt.run_dir = c.out;
  opt.resume = resume;
  opt.force = force;
  opt.progress = &log;
  const auto r = train(cfg, train_set, val ? &*val : nullptr, opt);
  const auto& last = r.last.history.back();
  json result{{"run_dir", c.out},
              {"epochs", r.last.epoch},
              {"steps", r.last.step},
              {"best_mAP", r.last.best_map},
              {"last", last},
              {"fingerprint", r.last.fingerprint}};
  emit(c, result, "trained " + std::to_string(r.last.epoch) + " epochs; best mAP " + std::to_string(r.last.best_map));
  return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& data_dir, bool oracle) {
  auto& log = progress_stream(c);
  std::optional<Checkpoint> ck;
  RunConfig cfg;
  if (!checkpoint.empty()) {
    ck = load_checkpoint(checkpoint);
    cfg = RunConfig::from_json(ck->config);
  } else if (!oracle) {
    throw ConfigError("eval: --checkpoint is required unless --oracle is given");
  } else {
    cfg = run_config(c);
  }
  Dataset data;
  if (!data_dir.empty())
    data = dataset_from_dir(data_dir, cfg.categories, log);
  else
    data = load_dataset(cfg.val_data ? *cfg.val_data : cfg.train_data, cfg.categories);
  CocoMetrics m;
  if (oracle) {
    m = evaluate_oracle(data);
  } else {
    const auto model = model_from_checkpoint(*ck);
    m = evaluate(*model, data, cfg.categories, cfg.eval);
  }
  const auto report = evaluation_report(m, cfg.categories, ck ? ck->epoch : 0);
  fs::create_directories(c.out);
  write_json(fs::path(c.out) / "metrics.json", report);
  emit(c, report,
       "mAP " + std::to_string(m.mAP) + "  AP50 " + std::to_string(m.AP50) + "  AP75 " + std::to_string(m.AP75) +
           "  AR " + std::to_string(m.AR));
  return 0;
}

std::vector<Detection> detect(const Model& model, const std::string& image, double threshold) {
  return predict(model, read_image(image), threshold);
}

int cmd_infer(const Common& c, const std::string& checkpoint, const std::vector<std::string>& images,
              std::optional<double> threshold, bool overlay) {
  const auto ck = load_checkpoint(checkpoint);
  const auto cfg = RunConfig::from_json(ck.config);
  const auto model = model_from_checkpoint(ck);
  fs::create_directories(c.out);
  json result = json::array();
  for (const auto& path : images) {
    const auto img = read_image(path);
    const auto dets = predict(*model, img, threshold.value_or(cfg.eval.score_threshold));
    const std::string stem = fs::path(path).stem().string();
    json entry{{"image", path}, {"detections", json::array()}};
    for (std::size_t k = 0; k < dets.size(); ++k) {
      const auto name = stem + "_" + std::to_string(k) + "_" + cfg.categories[dets[k].category] + ".png";
      write_mask_png((fs::path(c.out) / name).string(), dets[k].mask);
      entry["detections"].push_back({{"category", cfg.categories[dets[k].category]},
                                     {"score", dets[k].score},
                                     {"area", dets[k].mask.area()},
                                     {"mask", name}});
    }
    if (overlay) {
      const auto name = stem + "_overlay.png";
      write_overlay((fs::path(c.out) / name).string(), img, dets);
      entry["overlay"] = name;
    }
    result.push_back(entry);
  }
  write_json(fs::path(c.out) / "detections.json", result);
  emit(c, result, "wrote detections for " + std::to_string(images.size()) + " image(s) to " + c.out);
  return 0;
}

BinaryMask read_mask(const std::string& path) {
  const auto img = read_image(path);
  BinaryMask m(img.dim(1), img.dim(2));
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) m.at(y, x) = img(0, y, x) + img(1, y, x) + img(2, y, x) > 1.5f;
  return m;
}

int cmd_measure(const Common& c, const std::vector<std::string>& masks, const std::vector<std::string>& images,
                const std::string& checkpoint, const std::string& tag, bool no_filter) {
  std::vector<MeasurementRow> rows;
  auto& log = progress_stream(c);
  for (std::size_t i = 0; i < masks.size(); ++i) {
    const auto m = read_mask(masks[i]);
    if (m.empty()) {
      log << "warning: " << masks[i] << " is empty; skipped\n";
      continue;
    }
    rows.push_back({static_cast<int>(i), 0, measure_mask(m, !no_filter, tag), std::nullopt, std::nullopt});
  }
  if (!images.empty()) {
    if (checkpoint.empty()) throw ConfigError("measure: --image needs --checkpoint");
    const auto ck = load_checkpoint(checkpoint);
    const auto cfg = RunConfig::from_json(ck.config);
    const auto model = model_from_checkpoint(ck);
    for (std::size_t i = 0; i < images.size(); ++i) {
      const auto dets = detect(*model, images[i], cfg.eval.score_threshold);
      int k = 0;
      for (const auto& d : dets)
        if (d.category == 0 && !d.mask.empty()) rows.push_back({static_cast<int>(i), k++, measure_mask(d.mask, !no_filter, tag), std::nullopt, std::nullopt});
    }
  }
  fs::create_directories(c.out);
  const auto csv = measurements_csv(rows);
  std::ofstream(fs::path(c.out) / "measurements.csv") << csv;
  json result = json::array();
  for (const auto& r : rows)
    result.push_back({{"image_id", r.image_id}, {"instance_id", r.instance_id}, {"pixel_width", r.m.pixel_width},
                      {"pixel_height", r.m.pixel_height}, {"tag", r.m.tag}});
  emit(c, result, csv);
  return 0;
}

int cmd_fit_growth(const Common& c, const std::string& input) {
  std::ifstream in(input);
  if (!in) throw InputError("cannot open " + input);
  const auto samples = samples_from_rows(parse_measurements_csv(in));
  const auto model = fit_growth(samples);
  fs::create_directories(c.out);
  const auto j = model.to_json();
  write_json(fs::path(c.out) / "growth_model.json", j);
  std::string human;
  for (const auto& [tag, m] : model.tags)
    human += tag + ": DBH R2 " + std::to_string(m.dbh.r2) + ", height R2 " + std::to_string(m.height.r2) + "\n";
  emit(c, j, human);
  return 0;
}

int cmd_predict_growth(const Common& c, const std::string& checkpoint, const std::string& model_path,
                       const std::string& tag, const std::vector<std::string>& images) {
  std::ifstream in(model_path);
  if (!in) throw InputError("cannot open growth model " + model_path);
  nlohmann::json mj;
  try {
    mj = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(model_path + ": malformed JSON at byte " + std::to_string(e.byte), e.byte);
  }
  const auto growth = GrowthModel::from_json(mj);
  growth.at(tag);  // refuse unseen tags before any inference
  const auto ck = load_checkpoint(checkpoint);
  const auto cfg = RunConfig::from_json(ck.config);
  const auto model = model_from_checkpoint(ck);
  json result = json::array();
  std::string human;
  for (const auto& path : images) {
    const auto preds = predict_growth(detect(*model, path, cfg.eval.score_threshold), growth, tag);
    if (preds.empty()) progress_stream(c) << "warning: no trunk instances found in " << path << '\n';
    json entry{{"image", path}, {"tag", tag}, {"trunks", json::array()}};
    for (const auto& p : preds) {
      entry["trunks"].push_back({{"instance", p.instance},
                                 {"score", p.score},
                                 {"pixel_width", p.measurement.pixel_width},
                                 {"pixel_height", p.measurement.pixel_height},
                                 {"dbh_cm", p.dbh_cm},
                                 {"height_m", p.height_m}});
      human += path + " #" + std::to_string(p.instance) + ": DBH " + std::to_string(p.dbh_cm) + " cm, height " +
               std::to_string(p.height_m) + " m\n";
    }
    result.push_back(entry);
  }
  fs::create_directories(c.out);
  write_json(fs::path(c.out) / "growth_predictions.json", result);
  emit(c, result, human.empty() ? "no trunk instances" : human);
  return 0;
}

const char* error_kind(const std::exception& e) {
  if (dynamic_cast<const ParseError*>(&e)) return "parse_error";
  if (dynamic_cast<const waveinst::ConfigError*>(&e)) return "config_error";
  if (dynamic_cast<const InputError*>(&e)) return "input_error";
  if (dynamic_cast<const TrainingError*>(&e)) return "training_error";
  if (dynamic_cast<const FitError*>(&e)) return "fit_error";
  if (dynamic_cast<const MeasurementError*>(&e)) return "measurement_error";
  return "error";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Wavelet-enhanced instance segmentation for tree trunks and branches"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  Common c;
  std::optional<int> count, epochs;
  std::string data_dir, val_dir, resume, checkpoint, model_path, tag, input;
  std::vector<std::string> images, masks;
  std::optional<double> threshold;
  bool force = false, oracle = false, overlay = false, no_filter = false;

  auto* synth = app.add_subcommand("synth", "emit a synthetic dataset and its manifest");
  add_common(synth, c);
  synth->add_option("--count", count, "images per split");

  auto* tr = app.add_subcommand("train", "train a model");
  add_common(tr, c);
  tr->add_option("--data", data_dir, "COCO directory (annotations.json + images/) to train on");
  tr->add_option("--val", val_dir, "COCO directory to evaluate on after epochs");
  tr->add_option("--resume", resume, "checkpoint to continue from")->check(CLI::ExistingFile);
  tr->add_flag("--force", force, "resume even if the checkpoint came from another config");
  tr->add_option("--epochs", epochs, "override the configured epoch count");

  auto* ev = app.add_subcommand("eval", "COCO mask metrics for a checkpoint");
  add_common(ev, c);
  ev->add_option("--checkpoint", checkpoint)->check(CLI::ExistingFile);
  ev->add_option("--data", data_dir, "COCO directory; default is the checkpoint's configured data");
  ev->add_flag("--oracle", oracle, "score ground truth as predictions");

  auto* inf = app.add_subcommand("infer", "write instance masks for images");
  add_common(inf, c);
  inf->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  inf->add_option("--image", images)->required()->check(CLI::ExistingFile);
  inf->add_option("--threshold", threshold, "score threshold");
  inf->add_flag("--overlay", overlay, "also write an overlay PNG per image");

  auto* meas = app.add_subcommand("measure", "trunk pixel width and height");
  add_common(meas, c);
  meas->add_option("--mask", masks, "binary mask PNG")->check(CLI::ExistingFile);
  meas->add_option("--image", images, "image to segment first (needs --checkpoint)")->check(CLI::ExistingFile);
  meas->add_option("--checkpoint", checkpoint)->check(CLI::ExistingFile);
  meas->add_option("--tag", tag, "capture-distance tag")->required();
  meas->add_flag("--no-component-filter", no_filter, "measure the raw mask");

  auto* fit = app.add_subcommand("fit-growth", "fit DBH and height regressions per tag");
  add_common(fit, c);
  fit->add_option("--input", input, "measurements CSV with dbh_cm and height_m")->required()->check(CLI::ExistingFile);

  auto* pg = app.add_subcommand("predict-growth", "DBH and height from a single image");
  add_common(pg, c);
  pg->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  pg->add_option("--model", model_path, "growth model JSON")->required()->check(CLI::ExistingFile);
  pg->add_option("--tag", tag)->required();
  pg->add_option("--image", images)->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*synth) return cmd_synth(c, count);
    if (*tr) return cmd_train(c, data_dir, val_dir, resume, force, epochs);
    if (*ev) return cmd_eval(c, checkpoint, data_dir, oracle);
    if (*inf) return cmd_infer(c, checkpoint, images, threshold, overlay);
    if (*meas) return cmd_measure(c, masks, images, checkpoint, tag, no_filter);
    if (*fit) return cmd_fit_growth(c, input);
    if (*pg) return cmd_predict_growth(c, checkpoint, model_path, tag, images);
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"error", {{"kind", error_kind(e)}, {"message", e.what()}}}}.dump() << '\n';
    return 1;
  }
  return 2;
}
