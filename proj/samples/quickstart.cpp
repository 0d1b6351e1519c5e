// Library use without the CLI: build a synthetic split, train briefly,
// segment one scene and turn its trunk masks into growth estimates.
#include <iostream>

#include "waveinst/phenotype.hpp"
#include "waveinst/train.hpp"

using namespace waveinst;

int main() {
  RunConfig cfg = parse_run_config(R"(
model: {backbone_widths: [4, 8, 8, 16], pyramid_width: 8, fused_width: 8, mask_width: 8,
        num_instances: 8, dysample_groups: 2, dwt_widths: [4, 4, 8]}
optimizer: {kind: adamw, lr: 0.003}
schedule: {kind: constant}
augment: none
epochs: 5
train_data: {kind: synth, count: 6, synth: {height: 32, width: 32, trunk_width: [4, 7]}}
)");
  const Dataset data = load_dataset(cfg.train_data, cfg.categories);

  TrainOptions opt;
  opt.progress = &std::cerr;
  const TrainResult run = train(cfg, data, nullptr, opt);

  const CocoMetrics m = evaluate(*run.model, data, cfg.categories, cfg.eval);
  std::cout << m.to_json(cfg.categories).dump(2) << "\n";

  GrowthModel growth;
  growth.tags["near"] = {LinearFit{0.45, 1.0, 1.0, 0}, LinearFit{0.03, 0.5, 1.0, 0}};
  const auto dets = predict(*run.model, data.scenes[0].image, 0.3);
  for (const auto& p : predict_growth(dets, growth, "near"))
    std::cout << "trunk " << p.instance << ": width " << p.measurement.pixel_width << " px -> DBH " << p.dbh_cm
              << " cm, height " << p.height_m << " m\n";
}
