#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "waveinst/decoder.hpp"
#include "waveinst/encoder.hpp"
#include "waveinst/mask.hpp"
#include "waveinst/wavelet.hpp"

namespace waveinst {

struct ModelConfig {
  int num_classes = 2;
  int num_instances = 100;
  std::vector<int> backbone_widths{32, 64, 128, 256};
  int blocks_per_stage = 1;
  int pyramid_width = 128;
  int fused_width = 128;
  int mask_width = 64;
  int kernel_dim = 128;
  int dysample_groups = 4;
  bool use_dysample = true;
  bool use_dwt = true;
  std::string fusion = "agfm";  // "agfm" or "add" (plain sum, DWT only)
  std::string wavelet = "haar";
  std::vector<int> dwt_widths{16, 32, 64};

  void validate() const {
    if (num_classes < 1 || num_instances < 1) throw ConfigError("model: classes and instances must be >= 1");
    if (fusion != "agfm" && fusion != "add") throw ConfigError("model: fusion must be 'agfm' or 'add'");
    if (use_dwt && dwt_widths.size() != 3) throw ConfigError("model: the DWT branch has three levels (stride 8)");
    if (mask_width % dysample_groups != 0) throw ConfigError("model: mask_width must be divisible by dysample_groups");
    parse_wavelet(wavelet);
  }
};

/// Raw per-image network outputs. Masks are pre-sigmoid at half the input
/// resolution.
template <typename T>
struct InstancePredictions {
  Var<T> activation;     // N x H/8 x W/8
  Var<T> logits;         // N x classes
  Var<T> objectness;     // N x 1
  Var<T> kernels;        // N x D_k
  Var<T> mask_features;  // D_k x H/2 x W/2
  Var<T> masks;          // N x H/2 x W/2
};

template <typename T>
class WaveInst {
 public:
  WaveInst(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const auto& bw = cfg_.backbone_widths;
    backbone_ = Backbone<T>(params_, bw, cfg_.blocks_per_stage, rng);
    fpn_ = Fpn<T>(params_, bw[1], bw[2], bw[3], cfg_.pyramid_width, rng);
    fuse_ = PyramidFusion<T>(params_, cfg_.pyramid_width, cfg_.fused_width, rng);
    if (cfg_.use_dwt) {
      dwt_ = DwtBranch<T>(params_, "dwt", 3, cfg_.dwt_widths, cfg_.fused_width, rng, parse_wavelet(cfg_.wavelet));
      if (cfg_.fusion == "agfm") agfm_ = GatedFusion<T>(params_, cfg_.fused_width, rng);
    }
    inst_ = InstBranch<T>(params_, cfg_.fused_width, cfg_.num_instances, cfg_.num_classes, cfg_.kernel_dim, rng);
    mask_ = DrMaskBranch<T>(params_, cfg_.fused_width, cfg_.mask_width, cfg_.kernel_dim, cfg_.dysample_groups,
                            cfg_.use_dysample, rng);
  }

  WaveInst(const WaveInst&) = delete;
  WaveInst& operator=(const WaveInst&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }

  const Backbone<T>& backbone() const { return backbone_; }
  const Fpn<T>& fpn() const { return fpn_; }
  const DwtBranch<T>& dwt_branch() const { return dwt_; }
  const GatedFusion<T>& agfm() const { return agfm_; }
  const InstBranch<T>& inst_branch() const { return inst_; }
  const DrMaskBranch<T>& mask_branch() const { return mask_; }

  FusedFeatures<T> encode(const Var<T>& image) const {
    check_image(image);
    auto pyramid = fpn_(backbone_(image));
    FeatureMap<T> f_fpn = fuse_(pyramid);
    FusedFeatures<T> out{f_fpn, {}, f_fpn, {}};
    if (!cfg_.use_dwt) return out;
    out.dwt = {dwt_(image), dwt_.stride()};
    if (cfg_.fusion == "agfm") {
      auto g = agfm_(f_fpn.data, out.dwt.data);
      out.en = {g.fused, 8};
      out.gate = g.gate;
    } else {
      out.en = {ops::add(f_fpn.data, out.dwt.data), 8};
    }
    return out;
  }

  InstancePredictions<T> forward(const Var<T>& image) const {
    auto feats = encode(image);
    auto inst = inst_(feats.en.data);
    Var<T> mf = mask_(feats.en.data);
    return {inst.activation, inst.logits, inst.objectness, inst.kernels, mf, assemble_masks(inst.kernels, mf)};
  }

 private:
  static void check_image(const Var<T>& image) {
    if (image.shape().size() != 3 || image.dim(0) != 3)
      throw InputError("model: expected a 3 x H x W image, got " + shape_str(image.shape()));
    if (image.dim(1) % 32 || image.dim(2) % 32)
      throw InputError("model: image " + shape_str(image.shape()) + " must be divisible by 32; pad it first");
  }

  ModelConfig cfg_;
  ParameterSet<T> params_;
  Backbone<T> backbone_;
  Fpn<T> fpn_;
  PyramidFusion<T> fuse_;
  DwtBranch<T> dwt_;
  GatedFusion<T> agfm_;
  InstBranch<T> inst_;
  DrMaskBranch<T> mask_;
};

/// Rescores each instance as sigmoid(max class logit) * sigmoid(objectness),
/// keeps those at or above the threshold, upsamples mask probabilities x2
/// (bilinear) to full resolution and binarises at 0.5. Output is ordered by
/// descending score, ties by instance index.
template <typename T>
std::vector<Detection> postprocess(const InstancePredictions<T>& preds, double score_threshold, int image_h,
                                   int image_w) {
  const auto& logits = preds.logits.value();
  const auto& obj = preds.objectness.value();
  const int N = logits.dim(0), C = logits.dim(1);
  const int mh = preds.masks.dim(1), mw = preds.masks.dim(2);
  std::vector<std::pair<double, int>> keep;
  std::vector<int> cats(N);
  for (int i = 0; i < N; ++i) {
    int best = 0;
    for (int c = 1; c < C; ++c)
      if (logits(i, c) > logits(i, best)) best = c;
    cats[i] = best;
    const double score = ops::sigmoid_scalar<double>(logits(i, best)) * ops::sigmoid_scalar<double>(obj(i, 0));
    if (score >= score_threshold) keep.emplace_back(score, i);
  }
  std::stable_sort(keep.begin(), keep.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  const auto ty = ops::detail::resize_taps(mh, image_h), tx = ops::detail::resize_taps(mw, image_w);
  const auto& masks = preds.masks.value();
  std::vector<Detection> out;
  out.reserve(keep.size());
  std::vector<double> prob(static_cast<std::size_t>(mh) * mw);
  for (auto [score, i] : keep) {
    for (int y = 0; y < mh; ++y)
      for (int x = 0; x < mw; ++x) prob[y * mw + x] = ops::sigmoid_scalar<double>(masks(i, y, x));
    Detection d{cats[i], score, BinaryMask(image_h, image_w)};
    for (int y = 0; y < image_h; ++y) {
      const auto& a = ty[y];
      for (int x = 0; x < image_w; ++x) {
        const auto& b = tx[x];
        const double v = a.w0 * (b.w0 * prob[a.i0 * mw + b.i0] + b.w1 * prob[a.i0 * mw + b.i1]) +
                         a.w1 * (b.w0 * prob[a.i1 * mw + b.i0] + b.w1 * prob[a.i1 * mw + b.i1]);
        d.mask.at(y, x) = v > 0.5 ? 1 : 0;
      }
    }
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace waveinst
