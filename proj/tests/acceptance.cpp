// End-to-end acceptance run: one PASS/FAIL line per criterion.
// Usage: acceptance [criterion numbers...]   (default: all)
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "test_util.hpp"
#include "waveinst/gradcheck.hpp"
#include "waveinst/phenotype.hpp"
#include "waveinst/train.hpp"
#include "waveinst/wavelet.hpp"

using namespace waveinst;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
  bool asserted = true;  // false: reported only
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

Outcome fail_with_time(Outcome o, double secs, double limit) {
  if (secs >= limit) {
    o.pass = false;
    o.detail += "; exceeded " + fmt(limit) + " s";
  }
  return o;
}

// ---- 1: wavelet reconstruction and energy ----
Outcome wavelet_oracle() {
  Rng rng(101);
  std::uniform_int_distribution<int> half(1, 16), ch(1, 4);
  double worst_rec = 0, worst_energy = 0;
  for (int t = 0; t < 100; ++t) {
    auto x = wtest::random_tensor({ch(rng), 2 * half(rng), 2 * half(rng)}, rng, -5, 5);
    const auto s = dwt2d(x, WaveletFamily::Haar);
    worst_rec = std::max(worst_rec, max_abs_diff(idwt2d(s, WaveletFamily::Haar), x));
    double e = 0;
    for (double v : x.vec()) e += v * v;
    worst_energy = std::max(worst_energy, std::abs(s.energy() - e) / e);
  }
  return {worst_rec < 1e-5 && worst_energy < 1e-5,
          "max reconstruction error " + fmt(worst_rec) + ", max relative energy error " + fmt(worst_energy)};
}

// ---- 2: Hungarian vs exhaustive ----
// Best total over all one-to-one assignments of size min(N, K), each summed
// in ascending prediction order like hungarian_match.
double exhaustive_best(const Tensor<double>& s) {
  const int N = s.dim(0), K = s.dim(1);
  const int L = std::max(N, K);
  std::vector<int> perm(L);
  for (int i = 0; i < L; ++i) perm[i] = i;
  double best = -1e300;
  do {
    double t = 0;
    for (int i = 0; i < N; ++i) {
      // N <= K: prediction i takes column perm[i]; N > K: row perm[k] takes column k
      int k = -1;
      if (N <= K) {
        k = perm[i];
      } else {
        for (int c = 0; c < K; ++c)
          if (perm[c] == i) k = c;
      }
      if (k >= 0) t += s(i, k);
    }
    best = std::max(best, t);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

Outcome assignment_oracle() {
  Rng rng(202);
  std::uniform_int_distribution<int> dim(1, 6);
  int mismatches = 0;
  for (int t = 0; t < 1000; ++t) {
    auto s = wtest::random_tensor({dim(rng), dim(rng)}, rng, 0, 1);
    const auto m = hungarian_match(s);
    const bool size_ok = m.pairs.size() == static_cast<std::size_t>(std::min(s.dim(0), s.dim(1)));
    if (!size_ok || m.total_score != exhaustive_best(s)) ++mismatches;
  }
  return {mismatches == 0, std::to_string(mismatches) + "/1000 totals differ from the exhaustive maximum"};
}

// ---- 3: loss unit oracles ----
Outcome loss_oracles() {
  Tensor<double> a({1, 4}, std::vector<double>{1, 1, 0, 0}), b({1, 4}, std::vector<double>{0, 1, 1, 0});
  const double dice = dice_score(a, b);
  const double cost = pair_score(0.5, 0.8, 0.8);
  const double focal = focal_term(0.0, true, 0.25, 2.0).first;

  Rng rng(303);
  ParameterSet<double> ps;
  InstancePredictions<double> p;
  p.logits = ps.add("logits", wtest::random_tensor({6, 2}, rng, -3, 3));
  p.objectness = ps.add("objectness", wtest::random_tensor({6, 1}, rng, -3, 3));
  p.masks = ps.add("masks", wtest::random_tensor({6, 8, 8}, rng, -4, 4));
  std::vector<InstanceTarget<double>> targets;
  std::bernoulli_distribution on(0.3);
  for (int k = 0; k < 3; ++k) {
    InstanceTarget<double> g{k % 2, Tensor<double>({8, 8})};
    for (auto& v : g.mask.vec()) v = on(rng) ? 1.0 : 0.0;
    g.mask[0] = 1.0;
    targets.push_back(std::move(g));
  }
  const auto r = composite_loss(p, targets, LossWeights{});
  const auto& t = r.terms;
  const double recombine = std::abs(t.cls + t.obj + t.dice + t.pix - t.total);

  const bool pass = dice == 0.5 && std::abs(cost - 0.7282) <= 1e-3 && std::abs(focal - 0.04332) <= 1e-4 &&
                    recombine <= 1e-6;
  return {pass, "dice " + fmt(dice, 17) + ", cost " + fmt(cost, 6) + ", focal " + fmt(focal, 6) +
                    ", breakdown residual " + fmt(recombine)};
}

// ---- 4: gradient audit ----
ModelConfig tiny_model() {
  ModelConfig c;
  c.num_classes = 2;
  c.num_instances = 10;
  c.backbone_widths = {4, 6, 8, 16};
  c.pyramid_width = 6;
  c.fused_width = 6;
  c.mask_width = 4;
  c.kernel_dim = 4;
  c.dysample_groups = 2;
  c.dwt_widths = {2, 2, 2};
  return c;
}

std::vector<InstanceTarget<double>> audit_targets() {
  std::vector<InstanceTarget<double>> targets;
  for (int k = 0; k < 3; ++k) {
    InstanceTarget<double> t{k % 2, Tensor<double>({16, 16})};
    for (int y = 2 * k; y < 2 * k + 6; ++y)
      for (int x = 3; x < 3 + 4 * (k + 1); ++x) t.mask(y, x) = 1.0;
    targets.push_back(std::move(t));
  }
  return targets;
}

// Finite differences on one draw. For gradient flow, a tensor behind a ReLU
// bottleneck fed by a global pool can be inactive for a whole batch, so a
// tensor counts as disconnected only if it stays zero on every one of
// several independent parameter/batch draws.
Outcome gradient_audit() {
  constexpr int kDraws = 4;
  const auto targets = audit_targets();
  std::map<std::string, bool> reached;
  GradCheckReport fd;
  std::size_t tensors = 0;
  for (int draw = 0; draw < kDraws; ++draw) {
    WaveInst<double> model(tiny_model(), 404 + draw);
    Rng rng(mix_seed(404, {static_cast<std::uint64_t>(draw)}));
    wtest::randomize(model.params(), rng, 0.1);
    std::vector<Var<double>> images;
    for (int b = 0; b < 2; ++b) images.emplace_back(wtest::random_tensor({3, 32, 32}, rng, 0, 1));
    auto loss = [&] {
      std::vector<Var<double>> terms;
      for (const auto& img : images) terms.push_back(composite_loss(model.forward(img), targets, LossWeights{}).total);
      return ops::add_all(terms);
    };
    tensors = model.params().size();
    if (draw == 0) fd = check_gradients(model.params(), loss, 2, rng);
    model.params().zero_grad();
    backward(loss());
    for (auto& [name, p] : model.params().items()) reached[name] |= p.has_grad() && p.grad().abs_max() > 0;
  }
  double max_abs = 0, max_grad = 0;
  for (const auto& e : fd.entries) {
    max_abs = std::max(max_abs, std::abs(e.analytic - e.numeric));
    max_grad = std::max(max_grad, std::abs(e.analytic));
  }
  std::vector<std::string> never;
  for (const auto& [name, ok] : reached)
    if (!ok) never.push_back(name);
  std::string detail = std::to_string(tensors) + " tensors, " + std::to_string(fd.entries.size()) +
                       " finite-difference entries, worst relative error " + fmt(fd.worst) + " (max |diff| " + fmt(max_abs) +
                       ", max |grad| " + fmt(max_grad) + "), " +
                       std::to_string(fd.zero_grad_tensors.size()) + " inactive on the first draw, " +
                       std::to_string(never.size()) + " zero on all " + std::to_string(kDraws) + " draws";
  for (const auto& z : never) detail += "; " + z;
  return {fd.worst <= 1e-4 && never.empty(), detail};
}

// ---- 5: DySample degeneracy and offset bound ----
Outcome dysample_checks() {
  Rng rng(505);
  double worst_bilinear = 0;
  {
    ParameterSet<double> ps;
    DySample<double> up(ps, "up", 16, 2, 4);
    wtest::randomize(ps, rng, 0.5);
    for (auto& v : up.offset.weight.mutable_value().vec()) v = 0;
    for (auto& v : up.offset.bias.mutable_value().vec()) v = 0;
    for (int t = 0; t < 20; ++t) {
      auto x = Var<double>(wtest::random_tensor({16, 7, 9}, rng, -2, 2));
      worst_bilinear = std::max(worst_bilinear, max_abs_diff(up(x).value(), ops::resize_bilinear(x, 14, 18).value()));
    }
  }
  int violations = 0;
  {
    ParameterSet<double> ps;
    DySample<double> up(ps, "up", 8, 2, 2);
    wtest::randomize(ps, rng, 1.0);
    for (int t = 0; t < 50; ++t) {
      SamplingField<double> f;
      up(Var<double>(wtest::random_tensor({8, 5, 6}, rng, -3, 3)), &f);
      for (std::size_t i = 0; i < f.modulated.size(); ++i)
        if (std::abs(f.modulated[i]) > 0.5 * std::abs(f.raw_offsets[i])) ++violations;
    }
  }
  return {worst_bilinear < 1e-6 && violations == 0,
          "max |zero-offset - bilinear| " + fmt(worst_bilinear) + ", bound violations " + std::to_string(violations)};
}

// ---- 6: AGFM betweenness ----
Outcome agfm_convexity() {
  ParameterSet<float> ps;
  Rng rng(606);
  GatedFusion<float> agfm(ps, 16, rng);
  wtest::randomize(ps, rng, 0.5);
  long violations = 0, checked = 0;
  for (int t = 0; t < 100; ++t) {
    auto out = agfm(Var<float>(wtest::random_tensor<float>({16, 6, 6}, rng, -3, 3)),
                    Var<float>(wtest::random_tensor<float>({16, 6, 6}, rng, -3, 3)));
    const auto &f = out.fpn_enhanced.value(), &d = out.dwt_enhanced.value(), &e = out.fused.value();
    for (std::size_t i = 0; i < e.size(); ++i, ++checked) {
      const float tol = 4 * std::numeric_limits<float>::epsilon() * std::max(std::abs(f[i]), std::abs(d[i]));
      if (e[i] < std::min(f[i], d[i]) - tol || e[i] > std::max(f[i], d[i]) + tol) ++violations;
    }
  }
  return {violations == 0, std::to_string(violations) + " violations in " + std::to_string(checked) + " elements"};
}

// ---- 7: metrics oracle ----
BinaryMask rect_mask(int h, int w, int x0, int y0, int rw, int rh) {
  BinaryMask m(h, w);
  for (int y = y0; y < y0 + rh; ++y)
    for (int x = x0; x < x0 + rw; ++x) m.at(y, x) = 1;
  return m;
}

Outcome metrics_oracle() {
  std::ifstream in(std::string(WAVEINST_FIXTURE_DIR) + "/metrics_fixture.json");
  if (!in) return {false, "metrics fixture missing"};
  const auto j = nlohmann::json::parse(in);
  const int h = j["height"], w = j["width"];
  auto from_rects = [&](const nlohmann::json& rects) {
    BinaryMask m(h, w);
    for (const auto& r : rects) {
      const auto part = rect_mask(h, w, r[0], r[1], r[2], r[3]);
      for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] |= part.data[i];
    }
    return m;
  };
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<GroundTruth>> gts;
  for (const auto& im : j["images"]) {
    auto& d = dets.emplace_back();
    auto& g = gts.emplace_back();
    for (const auto& x : im["dets"]) d.push_back({x["category"], x["score"], from_rects(x["rects"])});
    for (const auto& x : im["gts"]) g.push_back({x["category"], from_rects(x["rects"])});
  }
  const auto m = coco_map(dets, gts);
  const auto& e = j["expected"];
  bool pass = dets.size() == 5;
  for (const char* k : {"mAP", "AP50", "AP75", "AR"}) {
    const double got = k == std::string("mAP") ? m.mAP : k == std::string("AP50") ? m.AP50
                                                     : k == std::string("AP75") ? m.AP75
                                                                                : m.AR;
    pass = pass && std::abs(got - e[k].get<double>()) <= 1e-9;
  }
  const auto single = coco_map({{{0, 0.9, rect_mask(10, 10, 0, 0, 6, 3)}}}, {{{0, rect_mask(10, 10, 0, 0, 6, 5)}}});
  pass = pass && single.mAP == 30.0 && single.AP50 == 100.0 && single.AP75 == 0.0;
  return {pass, "fixture mAP " + fmt(m.mAP, 10) + " AP50 " + fmt(m.AP50, 10) + " AP75 " + fmt(m.AP75, 10) + " AR " +
                    fmt(m.AR, 10) + "; IoU 0.6 case " + fmt(single.mAP) + "/" + fmt(single.AP50) + "/" +
                    fmt(single.AP75)};
}

// ---- 8: overfit ----
// Kept for the end-to-end growth check in criterion 10.
std::unique_ptr<Model> g_overfit_model;
SynthConfig g_overfit_synth;
int g_overfit_count = 0;

Outcome overfit() {
  // branches thinner than one half-resolution mask pixel cannot be
  // represented, so this split draws them 3-5 px wide
  const auto cfg = parse_run_config(R"(
epochs: 300
batch_size: 2
augment: none
optimizer: {kind: adamw, lr: 0.001, weight_decay: 0.0001}
schedule: {kind: cosine, milestones: [], warmup_steps: 50}
train_data: {kind: synth, count: 20, synth: {height: 64, width: 64, branch_width: [3, 5], branch_length: [10, 20]}}
eval: {every: 50, score_threshold: 0.05}
)");
  const auto data = load_dataset(cfg.train_data, cfg.categories);
  TrainOptions opt;
  auto run = train(cfg, data, nullptr, opt);
  const auto m = evaluate(*run.model, data, cfg.categories, cfg.eval);
  g_overfit_model = std::move(run.model);
  g_overfit_synth = cfg.train_data.synth;
  g_overfit_count = cfg.train_data.count;
  return {m.mAP >= 90.0 && m.AP50 == 100.0,
          "after " + std::to_string(cfg.epochs) + " epochs on " + std::to_string(data.size()) + " scenes: mAP " +
              fmt(m.mAP) + ", AP50 " + fmt(m.AP50)};
}

// ---- 9: ablation direction ----
Outcome ablation() {
  constexpr int kEpochs = 8;
  auto run = [&](bool with_branch, std::uint64_t seed) {
    auto cfg = parse_run_config(R"(
batch_size: 2
augment: none
optimizer: {kind: adamw, lr: 0.001, weight_decay: 0.0001}
schedule: {kind: cosine, milestones: [], warmup_steps: 50}
train_data: {kind: synth, count: 200, synth: {height: 64, width: 64, seed: 9}}
)");
    cfg.epochs = kEpochs;
    cfg.eval.every = kEpochs;
    cfg.seed = seed;
    cfg.model.use_dwt = with_branch;
    const auto data = load_dataset(cfg.train_data, cfg.categories);
    const auto r = train(cfg, data, nullptr, TrainOptions{});
    return evaluate(*r.model, data, cfg.categories, cfg.eval).mAP;
  };
  std::vector<double> full, base;
  for (std::uint64_t seed : {1, 2, 3}) {
    full.push_back(run(true, seed));
    base.push_back(run(false, seed));
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[1];
  };
  const double mf = median(full), mb = median(base);
  std::string detail = "median mAP with DWT+AGFM " + fmt(mf) + " vs no branch " + fmt(mb) + " (seeds:";
  for (int i = 0; i < 3; ++i) detail += " " + fmt(full[i]) + "/" + fmt(base[i]);
  detail += "; " + std::to_string(kEpochs) + " epochs)";
  return {mf >= mb, detail, false};
}

// ---- 10: growth regression ----
Outcome growth_regression() {
  Rng rng(1010);
  std::uniform_real_distribution<double> width(8, 60), height(80, 400);
  std::vector<GrowthSample> clean, noisy;
  const std::vector<std::tuple<std::string, double, double, double, double>> tags{
      {"near", 0.42, 1.1, 0.035, 0.4}, {"mid", 0.61, 0.7, 0.05, 0.2}, {"far", 0.95, 0.3, 0.08, 0.1}};
  for (const auto& [tag, a, b, c, d] : tags)
    for (int i = 0; i < 60; ++i) {
      const double w = width(rng), h = height(rng);
      const double dbh = a * w + b, ht = c * h + d;
      clean.push_back({tag, w, h, dbh, ht});
      std::normal_distribution<double> n1(0, 0.05 * dbh), n2(0, 0.05 * ht);
      noisy.push_back({tag, w, h, dbh + n1(rng), ht + n2(rng)});
    }
  const auto gc = fit_growth(clean), gn = fit_growth(noisy);
  bool pass = true;
  std::string detail = "noiseless R2";
  for (const auto& [tag, m] : gc.tags) {
    pass = pass && m.dbh.r2 == 1.0 && m.height.r2 == 1.0;
    detail += " " + tag + " " + fmt(m.dbh.r2, 17) + "/" + fmt(m.height.r2, 17);
  }
  detail += "; 5% noise R2";
  for (const auto& [tag, m] : gn.tags) {
    pass = pass && m.dbh.r2 >= 0.9 && m.height.r2 >= 0.9;
    detail += " " + tag + " " + fmt(m.dbh.r2) + "/" + fmt(m.height.r2);
  }

  // through the mask measurer: upright rectangles of known size
  std::vector<GrowthSample> measured;
  for (int w = 3; w <= 21; w += 2)
    for (int hgt : {30, 45}) {
      BinaryMask m(64, 40);
      for (int y = 60 - hgt; y < 60; ++y)
        for (int x = 5; x < 5 + w; ++x) m.at(y, x) = 1;
      const auto tm = measure_mask(m, true, "near");
      if (tm.pixel_width != w || tm.pixel_height != hgt) pass = false;
      measured.push_back({"near", tm.pixel_width, tm.pixel_height, 0.42 * w + 1.1, 0.035 * hgt + 0.4});
    }
  const auto gm = fit_growth(measured).at("near");
  pass = pass && gm.dbh.r2 == 1.0 && gm.height.r2 == 1.0;
  detail += "; measured masks R2 " + fmt(gm.dbh.r2, 17) + "/" + fmt(gm.height.r2, 17);

  // identity DBH model on the overfit checkpoint: predicted DBH is the
  // measured pixel width of the predicted trunk mask
  if (!g_overfit_model) return {pass, detail + "; end-to-end check skipped (needs criterion 8 in this run)"};
  GrowthModel identity;
  identity.tags["px"] = {LinearFit{1, 0, 1, 0}, LinearFit{1, 0, 1, 0}};
  int checked = 0, within = 0, occluded = 0, unmatched = 0;
  for (int i = 0; i < g_overfit_count; ++i) {
    const auto sc = generate_scene_with_geometry(g_overfit_synth, i);
    const auto dets = predict(*g_overfit_model, sc.scene.image, 0.5);
    const auto preds = predict_growth(dets, identity, "px");
    for (std::size_t k = 0; k < sc.scene.instances.size(); ++k) {
      const auto& gt = sc.scene.instances[k];
      if (gt.category != 0) continue;
      const double true_w = sc.geometry[k].width;
      if (std::abs(measure_mask(gt.mask).pixel_width - true_w) > 1.0) {
        ++occluded;
        continue;
      }
      const GrowthPrediction* best = nullptr;
      double best_iou = 0.5;
      for (const auto& p : preds)
        if (const double iou = mask_iou(dets[p.instance].mask, gt.mask); iou >= best_iou) best = &p, best_iou = iou;
      if (!best) {
        ++unmatched;
        continue;
      }
      ++checked;
      within += std::abs(best->dbh_cm - true_w) <= 1.0;
    }
  }
  pass = pass && checked > 0 && within == checked && unmatched == 0;
  detail += "; end-to-end DBH within 1 px on " + std::to_string(within) + "/" + std::to_string(checked) +
            " trunks (" + std::to_string(unmatched) + " unmatched, " + std::to_string(occluded) +
            " excluded: occluded in the measurement band)";
  return {pass, detail};
}

// ---- 11: CLI determinism ----
std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

Outcome cli_determinism() {
  const fs::path root = fs::temp_directory_path() / ("waveinst_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  {
    std::ofstream cfg(root / "run.yaml");
    cfg << "categories: [trunk, branch]\n"
           "model: {backbone_widths: [4, 8, 8, 16], pyramid_width: 8, fused_width: 8, mask_width: 8,\n"
           "        num_instances: 8, dysample_groups: 2, dwt_widths: [4, 4, 8]}\n"
           "optimizer: {kind: adamw, lr: 0.003}\n"
           "schedule: {kind: constant}\n"
           "augment: standard\n"
           "epochs: 3\n"
           "batch_size: 2\n"
           "train_data: {kind: synth, count: 4, synth: {height: 32, width: 32, trunk_width: [3, 6]}}\n";
  }
  const std::string cli = WAVEINST_CLI;
  auto sh = [&](const std::string& args) {
    const std::string cmd = "\"" + cli + "\" " + args + " -q > /dev/null 2>> \"" + (root / "stderr.txt").string() + "\"";
    return std::system(cmd.c_str());
  };
  std::vector<std::string> metrics;
  for (int rep = 0; rep < 2; ++rep) {
    const auto dir = root / ("rep" + std::to_string(rep));
    const std::string d = "\"" + dir.string() + "\"", c = "\"" + (root / "run.yaml").string() + "\"";
    if (sh("synth --config " + c + " --seed 17 --out " + d + "/data") != 0 ||
        sh("train --config " + c + " --seed 17 --data " + d + "/data/train --out " + d + "/run") != 0 ||
        sh("eval --checkpoint " + d + "/run/last.ckpt --data " + d + "/data/train --out " + d + "/eval") != 0)
      return {false, "CLI run failed: " + slurp(root / "stderr.txt")};
    metrics.push_back(slurp(dir / "eval" / "metrics.json"));
  }
  const bool same = !metrics[0].empty() && metrics[0] == metrics[1];
  const bool same_ckpt = slurp(root / "rep0/run/last.ckpt") == slurp(root / "rep1/run/last.ckpt");
  fs::remove_all(root);
  return {same && same_ckpt, std::string("metrics JSON ") + (same ? "byte-identical" : "differs") + " (" +
                                 std::to_string(metrics[0].size()) + " bytes), checkpoints " +
                                 (same_ckpt ? "identical" : "differ")};
}

struct Criterion {
  int id;
  const char* name;
  double limit_s;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "wavelet reconstruction/energy", 5, wavelet_oracle},
      {2, "hungarian vs exhaustive", 30, assignment_oracle},
      {3, "dice/cost/focal/breakdown", 1e9, loss_oracles},
      {4, "gradient audit", 600, gradient_audit},
      {5, "dysample degeneracy/bound", 1e9, dysample_checks},
      {6, "agfm convexity", 1e9, agfm_convexity},
      {7, "metrics oracle", 1e9, metrics_oracle},
      {8, "overfit sanity", 3600, overfit},
      {9, "ablation direction", 4 * 3600, ablation},
      {10, "growth regression", 1e9, growth_regression},
      {11, "CLI determinism", 1e9, cli_determinism},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    o = fail_with_time(o, secs, c.limit_s);
    std::cout << "criterion " << std::setw(2) << c.id << " " << (o.pass ? "PASS" : "FAIL") << "  " << c.name << ": "
              << o.detail << " [" << fmt(secs, 3) << " s" << (o.asserted ? "" : ", reported only") << "]" << std::endl;
    if (!o.pass && o.asserted) ++failures;
  }
  return failures == 0 ? 0 : 1;
}
