#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "waveinst/encoder.hpp"

namespace waveinst {

/// Two constant channels holding normalised x then y coordinates, each
/// linearly spaced over [-1, 1]; a length-1 axis holds -1.
template <typename T>
Tensor<T> coord_channels(int H, int W) {
  Tensor<T> c({2, H, W});
  auto lin = [](int i, int n) { return n == 1 ? T(-1) : T(-1) + T(2) * T(i) / T(n - 1); };
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      c(0, y, x) = lin(x, W);
      c(1, y, x) = lin(y, H);
    }
  return c;
}

template <typename T>
Var<T> coordconv_augment(const Var<T>& f) {
  return ops::concat<T>({f, Var<T>(coord_channels<T>(f.dim(1), f.dim(2)))});
}

/// Sampling state of one DySample call, exposed for inspection.
template <typename T>
struct SamplingField {
  Tensor<T> raw_offsets;  // offset projection before modulation, 2gs^2 x H x W
  Tensor<T> modulated;    // O = raw * sigmoid(scope) * 0.5
  Tensor<T> rearranged;   // pixel-shuffled O, 2g x sH x sW
  Tensor<T> grid;         // regular upsampling grid in input pixel units
  Tensor<T> positions;    // grid + rearranged
};

/// Learned-offset upsampler: offsets come from a 1x1 projection scaled by a
/// sigmoid-gated scope, rearranged by pixel shuffle and added to the regular
/// bilinear grid; features are sampled bilinearly per channel group.
template <typename T>
struct DySample {
  Conv2d<T> offset, scope;
  int factor = 2, groups = 4;

  DySample() = default;
  DySample(ParameterSet<T>& ps, const std::string& name, int channels, int s, int g)
      : offset(ps, name + ".offset", channels, 2 * g * s * s, 1, 1, 0),
        scope(ps, name + ".scope", channels, 2 * g * s * s, 1, 1, 0),
        factor(s),
        groups(g) {
    if (g <= 0 || channels % g != 0)
      throw ConfigError("dysample: channels " + std::to_string(channels) + " not divisible by groups " +
                        std::to_string(g));
    if (s < 2) throw ConfigError("dysample: upsample factor must be >= 2");
  }

  static Tensor<T> base_grid(int H, int W, int s, int g) {
    Tensor<T> grid({2 * g, H * s, W * s});
    for (int c = 0; c < 2 * g; ++c)
      for (int i = 0; i < H * s; ++i)
        for (int j = 0; j < W * s; ++j)
          grid(c, i, j) = c < g ? T((j + 0.5) / s - 0.5) : T((i + 0.5) / s - 0.5);
    return grid;
  }

  Var<T> operator()(const Var<T>& x, SamplingField<T>* field = nullptr) const {
    if (x.dim(0) % groups != 0)
      throw ConfigError("dysample: input channels " + std::to_string(x.dim(0)) + " not divisible by groups");
    const int H = x.dim(1), W = x.dim(2);
    Var<T> raw = offset(x);
    Var<T> modulated = ops::scale(ops::mul(raw, ops::sigmoid(scope(x))), T(0.5));
    Var<T> rearranged = ops::pixel_shuffle(modulated, factor);
    Var<T> grid(base_grid(H, W, factor, groups));
    Var<T> positions = ops::add(grid, rearranged);
    if (field) *field = {raw.value(), modulated.value(), rearranged.value(), grid.value(), positions.value()};
    return ops::grid_sample(x, positions, groups);
  }
};

template <typename T>
struct InstanceHeadOutput {
  Var<T> activation;  // N x h x w, in (0, 1)
  Var<T> weights;     // N x hw, rows sum to 1
  Var<T> features;    // N x C aggregated instance features
  Var<T> logits;      // N x classes
  Var<T> objectness;  // N x 1
  Var<T> kernels;     // N x D_k
};

/// Instance activation maps over the coordinate-augmented features; each
/// map's normalised weights aggregate the features into one vector per
/// instance, which three linear heads read.
template <typename T>
struct InstBranch {
  Conv2d<T> iam;
  Linear<T> cls, obj, kernel;
  int num_instances = 0;

  InstBranch() = default;
  InstBranch(ParameterSet<T>& ps, int in, int n, int classes, int kdim, Rng& rng) : num_instances(n) {
    iam = Conv2d<T>(ps, "decoder.inst.iam", in + 2, n, 3, 1, 1, &rng);
    const T prior = T(-std::log((1 - 0.01) / 0.01));
    iam.bias.mutable_value().fill(prior);
    cls = Linear<T>(ps, "decoder.inst.cls", in, classes, &rng, 0.1);
    cls.bias.mutable_value().fill(prior);
    obj = Linear<T>(ps, "decoder.inst.obj", in, 1, &rng, 0.1);
    kernel = Linear<T>(ps, "decoder.inst.kernel", in, kdim, &rng, 0.1);
  }

  static Var<T> aggregate(const Var<T>& weights, const Var<T>& f) {
    const int C = f.dim(0), hw = f.dim(1) * f.dim(2);
    return ops::matmul(weights, ops::transpose(ops::reshape(f, {C, hw})));
  }

  InstanceHeadOutput<T> operator()(const Var<T>& f) const {
    const int h = f.dim(1), w = f.dim(2);
    Var<T> act = ops::sigmoid(iam(coordconv_augment(f)));
    Var<T> weights = ops::row_normalize(ops::reshape(act, {num_instances, h * w}));
    Var<T> feats = aggregate(weights, f);
    return {act, weights, feats, cls(feats), obj(feats), kernel(feats)};
  }
};

/// Mask-feature branch: coord-augment, then two (3x3 conv, x2 upsample)
/// stages and a 1x1 projection to the kernel width. Output stride is
/// input stride / 4.
template <typename T>
struct DrMaskBranch {
  Conv2d<T> conv1, conv2, proj;
  DySample<T> up1, up2;
  bool dynamic = true;

  DrMaskBranch() = default;
  DrMaskBranch(ParameterSet<T>& ps, int in, int width, int kdim, int groups, bool use_dysample, Rng& rng)
      : conv1(ps, "decoder.mask.conv1", in + 2, width, 3, 1, 1, &rng),
        conv2(ps, "decoder.mask.conv2", width, width, 3, 1, 1, &rng),
        proj(ps, "decoder.mask.proj", width, kdim, 1, 1, 0, &rng),
        dynamic(use_dysample) {
    if (dynamic) {
      up1 = DySample<T>(ps, "decoder.mask.up1", width, 2, groups);
      up2 = DySample<T>(ps, "decoder.mask.up2", width, 2, groups);
    }
  }

  Var<T> upsample(const DySample<T>& up, const Var<T>& x) const {
    return dynamic ? up(x) : ops::resize_bilinear(x, 2 * x.dim(1), 2 * x.dim(2));
  }

  Var<T> operator()(const Var<T>& f) const {
    Var<T> x = upsample(up1, ops::relu(conv1(coordconv_augment(f))));
    x = upsample(up2, ops::relu(conv2(x)));
    return proj(x);
  }
};

/// masks[i] = sum_d kernels[i, d] * features[d]
template <typename T>
Var<T> assemble_masks(const Var<T>& kernels, const Var<T>& features) {
  if (kernels.shape().size() != 2 || features.shape().size() != 3 || kernels.dim(1) != features.dim(0))
    throw InputError("assemble_masks: kernels " + shape_str(kernels.shape()) + " incompatible with features " +
                     shape_str(features.shape()));
  const int N = kernels.dim(0), D = features.dim(0), H = features.dim(1), W = features.dim(2);
  return ops::reshape(ops::matmul(kernels, ops::reshape(features, {D, H * W})), {N, H, W});
}

}  // namespace waveinst
