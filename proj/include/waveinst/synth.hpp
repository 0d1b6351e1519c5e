#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "waveinst/nn.hpp"
#include "waveinst/scene.hpp"

namespace waveinst {

struct Range {
  double lo = 0, hi = 0;
};

struct IntRange {
  int lo = 0, hi = 0;
};

inline void to_json(nlohmann::json& j, const Range& r) { j = {r.lo, r.hi}; }
inline void from_json(const nlohmann::json& j, Range& r) {
  r.lo = j.at(0).get<double>();
  r.hi = j.at(1).get<double>();
}
inline void to_json(nlohmann::json& j, const IntRange& r) { j = {r.lo, r.hi}; }
inline void from_json(const nlohmann::json& j, IntRange& r) {
  r.lo = j.at(0).get<int>();
  r.hi = j.at(1).get<int>();
}

/// Synthetic trunk-scene generator settings. Category 0 is trunk, 1 branch.
struct SynthConfig {
  int height = 64, width = 64;
  IntRange trunks{1, 3};
  Range trunk_width{4, 9};  // horizontal width per row, pixels
  Range curvature{0, 3};    // peak lateral bow, pixels
  Range tilt_deg{-8, 8};
  IntRange branches_per_trunk{0, 2};
  Range branch_width{1, 2};
  Range branch_length{8, 18};
  double occluder_density = 0.5;  // expected occluders per scene
  Range occluder_radius{2, 5};
  double texture = 0.15;
  double min_visibility = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (height <= 0 || width <= 0 || height % 32 || width % 32)
      throw ConfigError("synth: image size must be a positive multiple of 32, got " + std::to_string(height) + "x" +
                        std::to_string(width));
    auto check = [](const char* name, double lo, double hi, double floor) {
      if (!(lo <= hi) || lo < floor) throw ConfigError(std::string("synth: bad range for ") + name);
    };
    check("trunks", trunks.lo, trunks.hi, 0);
    check("trunk_width", trunk_width.lo, trunk_width.hi, 1);
    check("curvature", curvature.lo, curvature.hi, 0);
    check("tilt_deg", tilt_deg.lo, tilt_deg.hi, -45);
    if (tilt_deg.hi > 45) throw ConfigError("synth: |tilt| must stay within 45 degrees");
    check("branches_per_trunk", branches_per_trunk.lo, branches_per_trunk.hi, 0);
    check("branch_width", branch_width.lo, branch_width.hi, 0.5);
    check("branch_length", branch_length.lo, branch_length.hi, 1);
    check("occluder_radius", occluder_radius.lo, occluder_radius.hi, 0.5);
    if (trunk_width.hi + 2 >= width) throw ConfigError("synth: trunks wider than the image");
    if (occluder_density < 0 || texture < 0) throw ConfigError("synth: density and texture must be >= 0");
    if (min_visibility < 0 || min_visibility > 1) throw ConfigError("synth: min_visibility must lie in [0, 1]");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SynthConfig, height, width, trunks, trunk_width, curvature, tilt_deg,
                                                branches_per_trunk, branch_width, branch_length, occluder_density,
                                                occluder_radius, texture, min_visibility, seed)

/// Generator-side record of one emitted instance.
struct InstanceGeometry {
  int category = 0;
  double width = 0;       // trunk: per-row width; branch: stroke width
  int top = 0, bottom = 0;  // row extent of the unoccluded shape
  std::size_t full_area = 0, visible_area = 0;
};

struct SynthScene {
  SceneAnnotation scene;
  std::vector<InstanceGeometry> geometry;  // parallel to scene.instances
};

namespace detail {

struct Shape2d {
  int category = 0;
  BinaryMask mask;
  InstanceGeometry geo;
  std::array<float, 3> color{};
  double stripe_phase = 0, centre = 0;
};

inline double seg_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax, dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(px - (ax + t * dx), py - (ay + t * dy));
}

}  // namespace detail

/// Renders scene `index`: textured background, tilted and bowed trunk
/// ribbons, thin branch strokes leaving the trunk edges, and leaf-like
/// occluders. Instances that keep less than `min_visibility` of their area
/// after occlusion are dropped; emitted masks are the visible parts.
/// Output depends only on (cfg, index).
inline SynthScene generate_scene_with_geometry(const SynthConfig& cfg, int index) {
  cfg.validate();
  Rng rng(mix_seed(cfg.seed, {0x5e7e, static_cast<std::uint64_t>(index)}));
  const int H = cfg.height, W = cfg.width;
  auto uni = [&](double lo, double hi) { return lo == hi ? lo : std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto uint = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  const double pi = std::numbers::pi;

  // background: vertical gradient plus smooth value noise
  SynthScene out;
  auto& img = out.scene.image;
  img = Tensor<float>({3, H, W});
  const std::array<double, 3> top_c{uni(0.5, 0.65), uni(0.6, 0.75), uni(0.7, 0.9)};
  const std::array<double, 3> bot_c{uni(0.25, 0.4), uni(0.4, 0.55), uni(0.15, 0.3)};
  const int gh = H / 8 + 2, gw = W / 8 + 2;
  std::vector<double> coarse(static_cast<std::size_t>(gh) * gw);
  for (auto& v : coarse) v = uni(-1, 1);
  std::normal_distribution<double> fine(0.0, 1.0);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double fy = y / 8.0, fx = x / 8.0;
      const int iy = static_cast<int>(fy), ix = static_cast<int>(fx);
      const double ty = fy - iy, tx = fx - ix;
      auto at = [&](int a, int b) { return coarse[static_cast<std::size_t>(a) * gw + b]; };
      const double n = (1 - ty) * ((1 - tx) * at(iy, ix) + tx * at(iy, ix + 1)) +
                       ty * ((1 - tx) * at(iy + 1, ix) + tx * at(iy + 1, ix + 1));
      const double grain = cfg.texture * (n + 0.3 * fine(rng));
      const double t = static_cast<double>(y) / std::max(1, H - 1);
      for (int c = 0; c < 3; ++c) img(c, y, x) = static_cast<float>((1 - t) * top_c[c] + t * bot_c[c] + grain);
    }

  std::vector<detail::Shape2d> trunks, branches;
  const int n_trunks = uint(cfg.trunks.lo, cfg.trunks.hi);
  for (int t = 0; t < n_trunks; ++t) {
    detail::Shape2d s;
    s.category = 0;
    const double w = uni(cfg.trunk_width.lo, cfg.trunk_width.hi);
    double bow = uni(cfg.curvature.lo, cfg.curvature.hi) * (uni(0, 1) < 0.5 ? -1 : 1);
    double slope = std::tan(uni(cfg.tilt_deg.lo, cfg.tilt_deg.hi) * pi / 180);
    const int top = static_cast<int>(std::floor(uni(0, 0.3) * H));
    const int bottom = H - 1;
    const int rows = bottom - top + 1;
    auto disp = [&](int y) {
      return slope * (y - bottom) + bow * std::sin(pi * (y - top) / std::max(1, rows - 1));
    };
    double dmin = 0, dmax = 0;
    for (int y = top; y <= bottom; ++y) {
      dmin = std::min(dmin, disp(y));
      dmax = std::max(dmax, disp(y));
    }
    double lo = w / 2 + 1 - dmin, hi = W - w / 2 - 1 - dmax;
    if (lo > hi) {
      slope = bow = 0;
      dmin = dmax = 0;
      lo = w / 2 + 1;
      hi = W - w / 2 - 1;
    }
    const double x0 = uni(lo, hi);
    s.mask = BinaryMask(H, W);
    std::vector<double> centre(H, 0.0);
    for (int y = top; y <= bottom; ++y) {
      centre[y] = x0 + disp(y);
      for (int x = 0; x < W; ++x) {
        const double px = x + 0.5;
        if (px >= centre[y] - w / 2 && px < centre[y] + w / 2) s.mask.at(y, x) = 1;
      }
    }
    s.geo = {0, w, top, bottom, s.mask.area(), 0};
    s.color = {static_cast<float>(uni(0.38, 0.52)), static_cast<float>(uni(0.26, 0.36)),
               static_cast<float>(uni(0.14, 0.24))};
    s.stripe_phase = uni(0, 2 * pi);
    s.centre = x0;

    const int n_br = uint(cfg.branches_per_trunk.lo, cfg.branches_per_trunk.hi);
    for (int b = 0; b < n_br; ++b) {
      detail::Shape2d br;
      br.category = 1;
      const int ya = std::clamp(top + static_cast<int>(uni(0.1, 0.6) * rows), top, bottom);
      const double side = uni(0, 1) < 0.5 ? -1 : 1;
      const double theta = uni(15, 60) * pi / 180;
      const double len = uni(cfg.branch_length.lo, cfg.branch_length.hi);
      const double bw = uni(cfg.branch_width.lo, cfg.branch_width.hi);
      const double ax = centre[ya] + side * (w / 2 - 1), ay = ya + 0.5;
      const double bx = ax + side * len * std::cos(theta), by = ay - len * std::sin(theta);
      br.mask = BinaryMask(H, W);
      const int y0 = std::max(0, static_cast<int>(std::floor(std::min(ay, by) - bw))),
                y1 = std::min(H - 1, static_cast<int>(std::ceil(std::max(ay, by) + bw)));
      const int x0b = std::max(0, static_cast<int>(std::floor(std::min(ax, bx) - bw))),
                x1b = std::min(W - 1, static_cast<int>(std::ceil(std::max(ax, bx) + bw)));
      for (int y = y0; y <= y1; ++y)
        for (int x = x0b; x <= x1b; ++x)
          if (detail::seg_distance(x + 0.5, y + 0.5, ax, ay, bx, by) <= bw / 2) br.mask.at(y, x) = 1;
      int btop = H, bbot = -1;
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          if (br.mask.at(y, x)) {
            btop = std::min(btop, y);
            bbot = std::max(bbot, y);
          }
      br.geo = {1, bw, btop, bbot, br.mask.area(), 0};
      br.color = {static_cast<float>(s.color[0] * 0.85), static_cast<float>(s.color[1] * 0.85),
                  static_cast<float>(s.color[2] * 0.85)};
      if (br.geo.full_area >= 4) branches.push_back(std::move(br));
    }
    trunks.push_back(std::move(s));
  }

  // ownership: branches below trunks, occluders on top
  std::vector<int> owner(static_cast<std::size_t>(H) * W, -1);
  std::vector<detail::Shape2d*> layers;
  for (auto& b : branches) layers.push_back(&b);
  for (auto& t : trunks) layers.push_back(&t);
  for (std::size_t l = 0; l < layers.size(); ++l)
    for (std::size_t i = 0; i < owner.size(); ++i)
      if (layers[l]->mask.data[i]) owner[i] = static_cast<int>(l);

  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const int o = owner[static_cast<std::size_t>(y) * W + x];
      if (o < 0) continue;
      const auto& s = *layers[o];
      const double bark = s.category == 0 ? 0.12 * std::sin(2 * pi * (x - s.centre) / 3.0 + s.stripe_phase) : 0.0;
      const double grain = 0.15 * cfg.texture * fine(rng);
      for (int c = 0; c < 3; ++c) img(c, y, x) = static_cast<float>(s.color[c] * (1 + bark) + grain);
    }

  std::poisson_distribution<int> n_occ(cfg.occluder_density);
  const int occluders = cfg.occluder_density > 0 ? n_occ(rng) : 0;
  for (int k = 0; k < occluders; ++k) {
    const double cx = uni(0, W), cy = uni(0, H);
    const double rx = uni(cfg.occluder_radius.lo, cfg.occluder_radius.hi);
    const double ry = uni(cfg.occluder_radius.lo, cfg.occluder_radius.hi);
    const std::array<double, 3> leaf{uni(0.1, 0.25), uni(0.4, 0.6), uni(0.08, 0.2)};
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
        if (dx * dx + dy * dy > 1) continue;
        owner[static_cast<std::size_t>(y) * W + x] = -1;
        const double shade = 1 + 0.2 * cfg.texture * fine(rng);
        for (int c = 0; c < 3; ++c) img(c, y, x) = static_cast<float>(leaf[c] * shade);
      }
  }
  for (auto& v : img.vec()) v = std::clamp(v, 0.0f, 1.0f);

  // visibility filter; trunks listed before branches
  std::vector<int> order;
  for (std::size_t l = branches.size(); l < layers.size(); ++l) order.push_back(static_cast<int>(l));
  for (std::size_t l = 0; l < branches.size(); ++l) order.push_back(static_cast<int>(l));
  out.scene.image_id = index;
  for (int l : order) {
    auto& s = *layers[l];
    BinaryMask vis(H, W);
    for (std::size_t i = 0; i < owner.size(); ++i) vis.data[i] = owner[i] == l;
    s.geo.visible_area = vis.area();
    if (s.geo.visible_area == 0 ||
        static_cast<double>(s.geo.visible_area) < cfg.min_visibility * static_cast<double>(s.geo.full_area))
      continue;
    out.scene.instances.push_back({s.category, std::move(vis)});
    out.geometry.push_back(s.geo);
  }
  return out;
}

inline SceneAnnotation generate_scene(const SynthConfig& cfg, int index) {
  return generate_scene_with_geometry(cfg, index).scene;
}

inline Dataset generate_dataset(const SynthConfig& cfg, int count, int first_index = 0) {
  Dataset d;
  for (int i = 0; i < count; ++i) d.scenes.push_back(generate_scene(cfg, first_index + i));
  return d;
}

}  // namespace waveinst
