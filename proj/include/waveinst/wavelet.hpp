#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "waveinst/nn.hpp"

namespace waveinst {

enum class WaveletFamily { Haar, Db2 };

inline WaveletFamily parse_wavelet(const std::string& id) {
  if (id == "haar" || id == "db1") return WaveletFamily::Haar;
  if (id == "db2") return WaveletFamily::Db2;
  throw ConfigError("unsupported wavelet family '" + id + "' (supported: haar, db2)");
}

inline const char* wavelet_name(WaveletFamily w) { return w == WaveletFamily::Haar ? "haar" : "db2"; }

/// Orthonormal analysis low-pass filter; the high-pass is its quadrature mirror
/// g[k] = (-1)^k h[L-1-k].
inline std::vector<double> lowpass_filter(WaveletFamily w) {
  switch (w) {
    case WaveletFamily::Haar:
      return {M_SQRT1_2, M_SQRT1_2};
    case WaveletFamily::Db2: {
      const double s3 = std::sqrt(3.0), d = 4.0 * std::sqrt(2.0);
      return {(1 + s3) / d, (3 + s3) / d, (3 - s3) / d, (1 - s3) / d};
    }
  }
  throw ConfigError("unsupported wavelet family");
}

inline std::vector<double> highpass_filter(WaveletFamily w) {
  auto h = lowpass_filter(w);
  const std::size_t L = h.size();
  std::vector<double> g(L);
  for (std::size_t k = 0; k < L; ++k) g[k] = (k % 2 ? -1.0 : 1.0) * h[L - 1 - k];
  return g;
}

/// One decomposition level. H responds to horizontal edges (low-pass along
/// x, high-pass along y), V to vertical edges (high-pass along x, low-pass
/// along y), D is high-pass along both.
template <typename T>
struct SubbandSet {
  Tensor<T> A, H, V, D;

  const Shape& shape() const { return A.shape(); }
  T energy() const {
    T e = 0;
    for (const Tensor<T>* t : {&A, &H, &V, &D})
      for (T v : t->vec()) e += v * v;
    return e;
  }
};

namespace detail {

// Periodised analysis along one axis of a (rows x cols) plane with row/column
// strides. in has length n (even); out_lo/out_hi have length n/2.
template <typename T>
void analyse_1d(const T* in, std::size_t in_stride, int n, const std::vector<double>& h,
                const std::vector<double>& g, T* lo, T* hi, std::size_t out_stride) {
  const int half = n / 2;
  const int L = static_cast<int>(h.size());
  for (int i = 0; i < half; ++i) {
    double a = 0, d = 0;
    for (int k = 0; k < L; ++k) {
      const T v = in[static_cast<std::size_t>((2 * i + k) % n) * in_stride];
      a += h[k] * v;
      d += g[k] * v;
    }
    lo[i * out_stride] = T(a);
    hi[i * out_stride] = T(d);
  }
}

template <typename T>
void synthesise_1d(const T* lo, const T* hi, std::size_t in_stride, int half, const std::vector<double>& h,
                   const std::vector<double>& g, T* out, std::size_t out_stride) {
  const int n = 2 * half;
  const int L = static_cast<int>(h.size());
  std::vector<double> acc(n, 0.0);
  for (int i = 0; i < half; ++i) {
    const double a = lo[i * in_stride], d = hi[i * in_stride];
    for (int k = 0; k < L; ++k) acc[(2 * i + k) % n] += h[k] * a + g[k] * d;
  }
  for (int m = 0; m < n; ++m) out[m * out_stride] = T(acc[m]);
}

// Single-level transform of an even-sized C x H x W tensor into a packed
// 4C x H/2 x W/2 tensor ordered [A, H, V, D].
template <typename T>
Tensor<T> dwt_packed(const Tensor<T>& x, WaveletFamily w) {
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int h2 = H / 2, w2 = W / 2;
  const auto lo = lowpass_filter(w), hi = highpass_filter(w);
  Tensor<T> out({4 * C, h2, w2});
  std::vector<T> L(static_cast<std::size_t>(H) * w2), Hx(static_cast<std::size_t>(H) * w2);
  for (int c = 0; c < C; ++c) {
    const T* plane = x.data() + static_cast<std::size_t>(c) * H * W;
    for (int y = 0; y < H; ++y)
      analyse_1d(plane + static_cast<std::size_t>(y) * W, 1, W, lo, hi, L.data() + y * w2, Hx.data() + y * w2, 1);
    T* A = &out(c, 0, 0);
    T* Hb = &out(C + c, 0, 0);
    T* Vb = &out(2 * C + c, 0, 0);
    T* Db = &out(3 * C + c, 0, 0);
    for (int xx = 0; xx < w2; ++xx) {
      analyse_1d(L.data() + xx, w2, H, lo, hi, A + xx, Hb + xx, w2);
      analyse_1d(Hx.data() + xx, w2, H, lo, hi, Vb + xx, Db + xx, w2);
    }
  }
  return out;
}

template <typename T>
Tensor<T> idwt_packed(const Tensor<T>& packed, WaveletFamily w) {
  const int C = packed.dim(0) / 4, h2 = packed.dim(1), w2 = packed.dim(2);
  const int H = 2 * h2, W = 2 * w2;
  const auto lo = lowpass_filter(w), hi = highpass_filter(w);
  Tensor<T> out({C, H, W});
  std::vector<T> L(static_cast<std::size_t>(H) * w2), Hx(static_cast<std::size_t>(H) * w2);
  for (int c = 0; c < C; ++c) {
    const T* A = &packed(c, 0, 0);
    const T* Hb = &packed(C + c, 0, 0);
    const T* Vb = &packed(2 * C + c, 0, 0);
    const T* Db = &packed(3 * C + c, 0, 0);
    for (int xx = 0; xx < w2; ++xx) {
      synthesise_1d(A + xx, Hb + xx, w2, h2, lo, hi, L.data() + xx, w2);
      synthesise_1d(Vb + xx, Db + xx, w2, h2, lo, hi, Hx.data() + xx, w2);
    }
    T* plane = out.data() + static_cast<std::size_t>(c) * H * W;
    for (int y = 0; y < H; ++y)
      synthesise_1d(L.data() + y * w2, Hx.data() + y * w2, 1, w2, lo, hi, plane + static_cast<std::size_t>(y) * W, 1);
  }
  return out;
}

template <typename T>
Tensor<T> replicate_to_even(const Tensor<T>& x) {
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int He = H + (H % 2), We = W + (W % 2);
  if (He == H && We == W) return x;
  Tensor<T> y({C, He, We});
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < He; ++i)
      for (int j = 0; j < We; ++j) y(c, i, j) = x(c, std::min(i, H - 1), std::min(j, W - 1));
  return y;
}

}  // namespace detail

/// Single-level separable 2-D DWT of a C x H x W tensor. Odd dimensions are
/// extended by edge replication, giving ceil(H/2) x ceil(W/2) subbands.
template <typename T>
SubbandSet<T> dwt2d(const Tensor<T>& x, WaveletFamily w = WaveletFamily::Haar) {
  if (x.rank() != 3) throw InputError("dwt2d: expected C x H x W, got " + shape_str(x.shape()));
  if (x.dim(1) < 2 || x.dim(2) < 2) throw InputError("dwt2d: spatial dims must be >= 2, got " + shape_str(x.shape()));
  const Tensor<T> packed = detail::dwt_packed(detail::replicate_to_even(x), w);
  const int C = x.dim(0);
  const std::size_t band = packed.size() / 4;
  Shape s{C, packed.dim(1), packed.dim(2)};
  auto part = [&](int i) {
    return Tensor<T>(s, AlignedVector<T>(packed.vec().begin() + i * band, packed.vec().begin() + (i + 1) * band));
  };
  return {part(0), part(1), part(2), part(3)};
}

template <typename T>
Tensor<T> idwt2d(const SubbandSet<T>& s, WaveletFamily w = WaveletFamily::Haar) {
  if (s.A.rank() != 3 || s.A.shape() != s.H.shape() || s.A.shape() != s.V.shape() || s.A.shape() != s.D.shape())
    throw InputError("idwt2d: subband shapes disagree");
  Shape ps = s.A.shape();
  ps[0] *= 4;
  Tensor<T> packed(ps);
  std::size_t off = 0;
  for (const Tensor<T>* t : {&s.A, &s.H, &s.V, &s.D}) {
    std::copy(t->vec().begin(), t->vec().end(), packed.vec().begin() + off);
    off += t->size();
  }
  return detail::idwt_packed(packed, w);
}

/// Replicates edges so both spatial dims become multiples of `multiple`.
template <typename T>
Tensor<T> pad_to_multiple(const Tensor<T>& x, int multiple) {
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int Hp = (H + multiple - 1) / multiple * multiple, Wp = (W + multiple - 1) / multiple * multiple;
  if (Hp == H && Wp == W) return x;
  Tensor<T> y({C, Hp, Wp});
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < Hp; ++i)
      for (int j = 0; j < Wp; ++j) y(c, i, j) = x(c, std::min(i, H - 1), std::min(j, W - 1));
  return y;
}

namespace ops {

/// Differentiable single-level DWT of an even-sized map, packed [A, H, V, D].
/// The transform is orthogonal, so its adjoint is the inverse transform.
template <typename T>
Var<T> dwt(const Var<T>& x, WaveletFamily w) {
  detail::require_rank(x.shape(), 3, "dwt");
  if (x.dim(1) % 2 || x.dim(2) % 2 || x.dim(1) < 2 || x.dim(2) < 2)
    throw InputError("dwt: spatial dims must be even and >= 2, got " + shape_str(x.shape()));
  return Var<T>::make(waveinst::detail::dwt_packed(x.value(), w), {x}, [w](Node<T>& n) {
    if (auto* g = detail::grad_of(n, 0)) *g += waveinst::detail::idwt_packed(n.grad, w);
  });
}

}  // namespace ops

template <typename T>
struct DwtBlockOutput {
  Var<T> high;  // X_H, 3 * C_out channels
  Var<T> low;   // X_L, C_out channels
};

/// Wavelet decomposition followed by separate 3x3 conv + ReLU on the joint
/// detail bands (ordered D, H, V) and on the approximation band.
template <typename T>
struct DwtBlock {
  Conv2d<T> high_conv, low_conv;
  WaveletFamily family = WaveletFamily::Haar;
  int in_channels = 0, out_channels = 0;

  DwtBlock() = default;
  DwtBlock(ParameterSet<T>& ps, const std::string& name, int c_in, int c_out, Rng& rng,
           WaveletFamily w = WaveletFamily::Haar)
      : high_conv(ps, name + ".high", 3 * c_in, 3 * c_out, 3, 1, 1, &rng),
        low_conv(ps, name + ".low", c_in, c_out, 3, 1, 1, &rng),
        family(w),
        in_channels(c_in),
        out_channels(c_out) {}

  DwtBlockOutput<T> operator()(const Var<T>& x) const {
    if (x.dim(0) != in_channels)
      throw InputError("dwt_block: expected " + std::to_string(in_channels) + " channels, got " + shape_str(x.shape()));
    const int C = in_channels;
    Var<T> bands = ops::dwt(x, family);
    Var<T> a = ops::slice(bands, 0, C);
    Var<T> h = ops::slice(bands, C, 2 * C);
    Var<T> v = ops::slice(bands, 2 * C, 3 * C);
    Var<T> d = ops::slice(bands, 3 * C, 4 * C);
    Var<T> detail_bands = ops::concat<T>({d, h, v});
    return {ops::relu(high_conv(detail_bands)), ops::relu(low_conv(a))};
  }
};

/// Multi-scale refinement of joint detail features with a residual path:
/// out = ReLU(conv1x1(concat(conv3x3(b1), conv5x5(b2), avgpool3x3(b3)))) + x.
template <typename T>
struct HfeBlock {
  Conv2d<T> conv3, conv5, fuse;
  int channels = 0;

  HfeBlock() = default;
  HfeBlock(ParameterSet<T>& ps, const std::string& name, int ch, Rng& rng) : channels(ch) {
    if (ch % 3 != 0) throw InputError("hfe_block: channel count " + std::to_string(ch) + " not divisible by 3");
    const int k = ch / 3;
    conv3 = Conv2d<T>(ps, name + ".conv3", k, k, 3, 1, 1, &rng);
    conv5 = Conv2d<T>(ps, name + ".conv5", k, k, 5, 1, 2, &rng);
    fuse = Conv2d<T>(ps, name + ".fuse", ch, ch, 1, 1, 0, &rng);
  }

  Var<T> operator()(const Var<T>& x) const {
    if (x.dim(0) % 3 != 0 || x.dim(0) != channels)
      throw InputError("hfe_block: expected " + std::to_string(channels) + " channels (divisible by 3), got " +
                       shape_str(x.shape()));
    const int k = channels / 3;
    Var<T> b1 = conv3(ops::slice(x, 0, k));
    Var<T> b2 = conv5(ops::slice(x, k, 2 * k));
    Var<T> b3 = ops::avg_pool2d(ops::slice(x, 2 * k, 3 * k), 3, 1, 1);
    return ops::add(ops::relu(fuse(ops::concat<T>({b1, b2, b3}))), x);
  }
};

/// Cascade of DWT + HFE levels running beside the backbone. Level l+1
/// decomposes the processed bands of level l, concat(X_L, X'_H); the last
/// level's bands are projected to the fused width, landing at stride 2^levels.
template <typename T>
struct DwtBranch {
  std::vector<DwtBlock<T>> blocks;
  std::vector<HfeBlock<T>> hfes;
  Conv2d<T> proj;

  DwtBranch() = default;
  DwtBranch(ParameterSet<T>& ps, const std::string& name, int in_channels, const std::vector<int>& widths,
            int out_width, Rng& rng, WaveletFamily w = WaveletFamily::Haar) {
    if (widths.empty()) throw ConfigError("dwt branch needs at least one level");
    int c_in = in_channels;
    for (std::size_t l = 0; l < widths.size(); ++l) {
      const std::string lname = name + ".level" + std::to_string(l + 1);
      blocks.emplace_back(ps, lname + ".dwt", c_in, widths[l], rng, w);
      hfes.emplace_back(ps, lname + ".hfe", 3 * widths[l], rng);
      c_in = 4 * widths[l];
    }
    proj = Conv2d<T>(ps, name + ".proj", c_in, out_width, 1, 1, 0, &rng);
  }

  int levels() const { return static_cast<int>(blocks.size()); }
  int stride() const { return 1 << levels(); }

  Var<T> operator()(const Var<T>& image) const {
    const int m = stride();
    if (image.dim(1) % m || image.dim(2) % m)
      throw InputError("dwt branch: image " + shape_str(image.shape()) + " must be divisible by " + std::to_string(m) +
                       "; pad with pad_to_multiple()");
    Var<T> x = image;
    for (int l = 0; l < levels(); ++l) {
      auto out = blocks[l](x);
      Var<T> enhanced = hfes[l](out.high);
      x = ops::concat<T>({out.low, enhanced});
    }
    return proj(x);
  }
};

}  // namespace waveinst
