#pragma once

#include <string>
#include <vector>

#include "waveinst/nn.hpp"
#include "waveinst/wavelet.hpp"

namespace waveinst {

template <typename T>
struct FeatureMap {
  Var<T> data;
  int stride = 1;

  int channels() const { return data.dim(0); }
  int height() const { return data.dim(1); }
  int width() const { return data.dim(2); }
};

/// Three pyramid levels at strides 8/16/32 (C3-C5 from the backbone or
/// P3-P5 after the FPN).
template <typename T>
struct PyramidFeatures {
  FeatureMap<T> l3, l4, l5;
};

template <typename T>
struct FusedFeatures {
  FeatureMap<T> fpn, dwt, en;
  Var<T> gate;  // 1 x H x W; undefined when fusion is not gated
};

template <typename T>
struct ResidualBlock {
  Conv2d<T> conv1, conv2, shortcut;
  bool project = false;

  ResidualBlock() = default;
  ResidualBlock(ParameterSet<T>& ps, const std::string& name, int in, int out, int stride, Rng& rng)
      : conv1(ps, name + ".conv1", in, out, 3, stride, 1, &rng),
        conv2(ps, name + ".conv2", out, out, 3, 1, 1, &rng, 0.5),
        project(in != out || stride != 1) {
    if (project) shortcut = Conv2d<T>(ps, name + ".shortcut", in, out, 1, stride, 0, &rng);
  }

  Var<T> operator()(const Var<T>& x) const {
    Var<T> y = conv2(ops::relu(conv1(x)));
    return ops::relu(ops::add(y, project ? shortcut(x) : x));
  }
};

/// Residual CNN with an aggressive stem (stride-2 7x7 conv, stride-2 max
/// pool) and four stages; stages 2-4 halve resolution and emit C3-C5.
template <typename T>
struct Backbone {
  Conv2d<T> stem;
  std::vector<std::vector<ResidualBlock<T>>> stages;

  Backbone() = default;
  Backbone(ParameterSet<T>& ps, const std::vector<int>& widths, int blocks_per_stage, Rng& rng) {
    if (widths.size() != 4) throw ConfigError("backbone needs exactly four stage widths");
    stem = Conv2d<T>(ps, "backbone.stem", 3, widths[0], 7, 2, 3, &rng);
    int in = widths[0];
    for (int s = 0; s < 4; ++s) {
      std::vector<ResidualBlock<T>> blocks;
      for (int b = 0; b < blocks_per_stage; ++b) {
        const int stride = (b == 0 && s > 0) ? 2 : 1;
        blocks.emplace_back(ps, "backbone.stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1), in,
                            widths[s], stride, rng);
        in = widths[s];
      }
      stages.push_back(std::move(blocks));
    }
  }

  PyramidFeatures<T> operator()(const Var<T>& image) const {
    if (image.dim(1) % 32 || image.dim(2) % 32)
      throw InputError("backbone: image " + shape_str(image.shape()) + " must be divisible by 32");
    Var<T> x = ops::max_pool2d(ops::relu(stem(image)), 3, 2, 1);
    std::vector<Var<T>> outs;
    for (const auto& stage : stages) {
      for (const auto& b : stage) x = b(x);
      outs.push_back(x);
    }
    return {{outs[1], 8}, {outs[2], 16}, {outs[3], 32}};
  }
};

/// Pyramid pooling on the deepest level: adaptive pools at several bin
/// sizes, 1x1 conv each, upsampled and concatenated with the input, then a
/// 1x1 conv to the pyramid width.
template <typename T>
struct PyramidPooling {
  std::vector<int> bins;
  std::vector<Conv2d<T>> branch;
  Conv2d<T> out;

  PyramidPooling() = default;
  PyramidPooling(ParameterSet<T>& ps, const std::string& name, int in, int width, Rng& rng,
                 std::vector<int> bin_sizes = {1, 2, 3, 6})
      : bins(std::move(bin_sizes)) {
    const int reduced = std::max(1, in / static_cast<int>(bins.size()));
    for (int b : bins)
      branch.emplace_back(ps, name + ".pool" + std::to_string(b), in, reduced, 1, 1, 0, &rng);
    out = Conv2d<T>(ps, name + ".out", in + reduced * static_cast<int>(bins.size()), width, 1, 1, 0, &rng);
  }

  Var<T> operator()(const Var<T>& c5) const {
    const int H = c5.dim(1), W = c5.dim(2);
    std::vector<Var<T>> parts{c5};
    for (std::size_t i = 0; i < bins.size(); ++i) {
      Var<T> p = ops::relu(branch[i](ops::adaptive_avg_pool2d(c5, bins[i], bins[i])));
      parts.push_back(ops::resize_bilinear(p, H, W));
    }
    return out(ops::concat(parts));
  }
};

/// Top-down FPN with the PPM as the C5 lateral.
template <typename T>
struct Fpn {
  PyramidPooling<T> ppm;
  Conv2d<T> lat3, lat4, smooth3, smooth4, smooth5;

  Fpn() = default;
  Fpn(ParameterSet<T>& ps, int c3, int c4, int c5, int width, Rng& rng)
      : ppm(ps, "encoder.ppm", c5, width, rng),
        lat3(ps, "encoder.lat3", c3, width, 1, 1, 0, &rng),
        lat4(ps, "encoder.lat4", c4, width, 1, 1, 0, &rng),
        smooth3(ps, "encoder.smooth3", width, width, 3, 1, 1, &rng),
        smooth4(ps, "encoder.smooth4", width, width, 3, 1, 1, &rng),
        smooth5(ps, "encoder.smooth5", width, width, 3, 1, 1, &rng) {}

  PyramidFeatures<T> operator()(const PyramidFeatures<T>& c) const {
    Var<T> inner5 = ppm(c.l5.data);
    Var<T> l4 = lat4(c.l4.data);
    Var<T> inner4 = ops::add(l4, ops::resize_bilinear(inner5, l4.dim(1), l4.dim(2)));
    Var<T> l3 = lat3(c.l3.data);
    Var<T> inner3 = ops::add(l3, ops::resize_bilinear(inner4, l3.dim(1), l3.dim(2)));
    return {{smooth3(inner3), c.l3.stride}, {smooth4(inner4), c.l4.stride}, {smooth5(inner5), c.l5.stride}};
  }
};

/// Upsamples P4/P5 to P3's size, concatenates and compresses with a 1x1 conv.
template <typename T>
struct PyramidFusion {
  Conv2d<T> compress;

  PyramidFusion() = default;
  PyramidFusion(ParameterSet<T>& ps, int width, int out_width, Rng& rng)
      : compress(ps, "encoder.fuse", 3 * width, out_width, 1, 1, 0, &rng) {}

  FeatureMap<T> operator()(const PyramidFeatures<T>& p) const {
    const int H = p.l3.height(), W = p.l3.width();
    Var<T> cat = ops::concat<T>(
        {p.l3.data, ops::resize_bilinear(p.l4.data, H, W), ops::resize_bilinear(p.l5.data, H, W)});
    return {compress(cat), p.l3.stride};
  }
};

/// Squeeze-and-excitation channel attention.
template <typename T>
struct SqueezeExcite {
  Linear<T> reduce, expand;
  int channels = 0;

  SqueezeExcite() = default;
  SqueezeExcite(ParameterSet<T>& ps, const std::string& name, int ch, int reduction, Rng& rng)
      : reduce(ps, name + ".reduce", ch, std::max(1, ch / reduction), &rng),
        expand(ps, name + ".expand", std::max(1, ch / reduction), ch, &rng),
        channels(ch) {}

  Var<T> excitation(const Var<T>& x) const {
    Var<T> s = ops::reshape(ops::global_avg_pool(x), {1, channels});
    Var<T> e = ops::sigmoid(expand(ops::relu(reduce(s))));
    return ops::reshape(e, {channels, 1, 1});
  }

  Var<T> operator()(const Var<T>& x) const { return ops::mul(x, excitation(x)); }
};

template <typename T>
struct GatedFusionOutput {
  Var<T> fused, gate, fpn_enhanced, dwt_enhanced;
};

/// Adaptive gated fusion: SE on each branch, a 1x1 conv + sigmoid over the
/// concatenation gives a spatial gate G, fused = G*fpn + (1-G)*dwt.
template <typename T>
struct GatedFusion {
  SqueezeExcite<T> se_fpn, se_dwt;
  Conv2d<T> gate_conv;

  GatedFusion() = default;
  GatedFusion(ParameterSet<T>& ps, int ch, Rng& rng, int reduction = 4)
      : se_fpn(ps, "encoder.agfm.se_fpn", ch, reduction, rng),
        se_dwt(ps, "encoder.agfm.se_dwt", ch, reduction, rng),
        gate_conv(ps, "encoder.agfm.gate", 2 * ch, 1, 1, 1, 0, &rng, 0.1) {}

  GatedFusionOutput<T> operator()(const Var<T>& fpn, const Var<T>& dwt) const {
    if (fpn.shape() != dwt.shape())
      throw InputError("agfm: branch shapes differ " + shape_str(fpn.shape()) + " vs " + shape_str(dwt.shape()));
    Var<T> f = se_fpn(fpn);
    Var<T> d = se_dwt(dwt);
    Var<T> g = ops::sigmoid(gate_conv(ops::concat<T>({f, d})));
    Var<T> fused = ops::add(ops::mul(f, g), ops::mul(d, ops::one_minus(g)));
    return {fused, g, f, d};
  }
};

}  // namespace waveinst
