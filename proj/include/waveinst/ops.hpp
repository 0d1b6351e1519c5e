#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "waveinst/autograd.hpp"
#include "waveinst/tensor.hpp"

// Differentiable operators on rank-2 and rank-3 tensors. Feature maps are
// unbatched (C x H x W); batching happens one image at a time in the caller.
namespace waveinst::ops {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
Tensor<T>* grad_of(Node<T>& n, std::size_t i) {
  auto& p = n.parents[i];
  return p->requires_grad ? &p->grad_buffer() : nullptr;
}

inline int conv_out(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

template <typename T>
void im2col(const T* x, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* cols) {
  const std::size_t P = static_cast<std::size_t>(Ho) * Wo;
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* row = cols + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * P;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          T* dst = row + static_cast<std::size_t>(oy) * Wo;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + Wo, T(0));
            continue;
          }
          const T* src = x + (static_cast<std::size_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im(const T* cols, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* x) {
  const std::size_t P = static_cast<std::size_t>(Ho) * Wo;
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* row = cols + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * P;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          T* dst = x + (static_cast<std::size_t>(c) * H + iy) * W;
          const T* src = row + static_cast<std::size_t>(oy) * Wo;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
        }
      }
}

inline void require_rank(const Shape& s, std::size_t r, const char* op) {
  if (s.size() != r)
    throw InputError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(s));
}

// Bilinear source coordinate with half-pixel centers (corner-aligned = false).
struct LinearTap {
  int i0, i1;
  double w0, w1;
};

inline std::vector<LinearTap> resize_taps(int in, int out) {
  std::vector<LinearTap> taps(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = i0 < in - 1 ? i0 + 1 : i0;
    const double l1 = src - i0;
    taps[o] = {i0, i1, 1.0 - l1, l1};
  }
  return taps;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution

/// 2-D convolution of a C x H x W map with an O x C x k x k kernel (square),
/// zero padding. `bias` may be undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride = 1, int pad = 0) {
  detail::require_rank(x.shape(), 3, "conv2d");
  detail::require_rank(weight.shape(), 4, "conv2d weight");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int O = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != C || weight.dim(3) != k)
    throw InputError("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                     shape_str(x.shape()));
  const int Ho = detail::conv_out(H, k, stride, pad), Wo = detail::conv_out(W, k, stride, pad);
  if (Ho <= 0 || Wo <= 0) throw InputError("conv2d: input " + shape_str(x.shape()) + " too small");
  const int K = C * k * k;
  const int P = Ho * Wo;
  const bool direct = (k == 1 && stride == 1 && pad == 0);

  AlignedVector<T> cols;
  const T* colp = x.value().data();
  if (!direct) {
    cols.resize(static_cast<std::size_t>(K) * P);
    detail::im2col(x.value().data(), C, H, W, k, stride, pad, Ho, Wo, cols.data());
    colp = cols.data();
  }
  Tensor<T> out({O, Ho, Wo});
  detail::MapMat<T> Y(out.data(), O, P);
  detail::CMapMat<T> Wm(weight.value().data(), O, K);
  detail::CMapMat<T> X(colp, K, P);
  Y.noalias() = Wm * X;
  if (bias.defined()) {
    const T* b = bias.value().data();
    for (int o = 0; o < O; ++o) Y.row(o).array() += b[o];
  }

  std::vector<Var<T>> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  const bool has_bias = bias.defined();
  return Var<T>::make(
      std::move(out), std::move(parents),
      [C, H, W, O, k, K, P, Ho, Wo, stride, pad, direct, has_bias, cols = std::move(cols)](Node<T>& n) {
        detail::CMapMat<T> G(n.grad.data(), O, P);
        const Node<T>& xn = *n.parents[0];
        const Node<T>& wn = *n.parents[1];
        if (auto* gw = detail::grad_of(n, 1)) {
          detail::CMapMat<T> X(direct ? xn.value.data() : cols.data(), K, P);
          detail::MapMat<T> GW(gw->data(), O, K);
          GW.noalias() += G * X.transpose();
        }
        if (has_bias)
          if (auto* gb = detail::grad_of(n, 2))
            for (int o = 0; o < O; ++o) (*gb)[o] += G.row(o).sum();
        if (auto* gx = detail::grad_of(n, 0)) {
          detail::CMapMat<T> Wm(wn.value.data(), O, K);
          if (direct) {
            detail::MapMat<T> GX(gx->data(), K, P);
            GX.noalias() += Wm.transpose() * G;
          } else {
            AlignedVector<T> dcols(static_cast<std::size_t>(K) * P);
            detail::MapMat<T> DC(dcols.data(), K, P);
            DC.noalias() = Wm.transpose() * G;
            detail::col2im(dcols.data(), C, H, W, k, stride, pad, Ho, Wo, gx->data());
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Pointwise

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> y = x.value();
  for (auto& v : y.vec()) v = v > T(0) ? v : T(0);
  return Var<T>::make(std::move(y), {x}, [](Node<T>& n) {
    auto* gx = detail::grad_of(n, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < n.value.size(); ++i)
      if (n.value[i] > T(0)) (*gx)[i] += n.grad[i];
  });
}

template <typename T>
T sigmoid_scalar(T v) {
  return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> y = x.value();
  for (auto& v : y.vec()) v = sigmoid_scalar(v);
  return Var<T>::make(std::move(y), {x}, [](Node<T>& n) {
    auto* gx = detail::grad_of(n, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < n.value.size(); ++i) {
      const T s = n.value[i];
      (*gx)[i] += n.grad[i] * s * (T(1) - s);
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  Tensor<T> y = x.value();
  for (auto& v : y.vec()) v *= factor;
  return Var<T>::make(std::move(y), {x}, [factor](Node<T>& n) {
    if (auto* gx = detail::grad_of(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*gx)[i] += factor * n.grad[i];
  });
}

/// 1 - x
template <typename T>
Var<T> one_minus(const Var<T>& x) {
  Tensor<T> y = x.value();
  for (auto& v : y.vec()) v = T(1) - v;
  return Var<T>::make(std::move(y), {x}, [](Node<T>& n) {
    if (auto* gx = detail::grad_of(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*gx)[i] -= n.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Broadcasting binary ops. Operands share rank; each dimension must match or be 1.

namespace detail {

struct Broadcast {
  Shape out;
  std::vector<std::size_t> sa, sb;  // strides into a and b, 0 on broadcast dims
};

inline Broadcast broadcast_plan(const Shape& a, const Shape& b, const char* op) {
  if (a.size() != b.size())
    throw InputError(std::string(op) + ": rank mismatch " + shape_str(a) + " vs " + shape_str(b));
  const std::size_t r = a.size();
  Broadcast p;
  p.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (a[i] != b[i] && a[i] != 1 && b[i] != 1)
      throw InputError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                       " do not broadcast");
    p.out[i] = std::max(a[i], b[i]);
  }
  p.sa.assign(r, 0);
  p.sb.assign(r, 0);
  std::size_t ka = 1, kb = 1;
  for (std::size_t i = r; i-- > 0;) {
    p.sa[i] = a[i] == 1 ? 0 : ka;
    p.sb[i] = b[i] == 1 ? 0 : kb;
    ka *= a[i];
    kb *= b[i];
  }
  return p;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <typename F>
void for_each_broadcast(const Broadcast& p, F&& f) {
  const std::size_t r = p.out.size();
  const std::size_t total = numel(p.out);
  std::vector<int> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < total; ++o) {
    f(o, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ia += p.sa[d];
      ib += p.sb[d];
      if (++idx[d] < p.out[d]) break;
      ia -= p.sa[d] * p.out[d];
      ib -= p.sb[d] * p.out[d];
      idx[d] = 0;
    }
  }
}

}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.shape() == b.shape()) {
    Tensor<T> y = a.value();
    y += b.value();
    return Var<T>::make(std::move(y), {a, b}, [](Node<T>& n) {
      for (std::size_t k = 0; k < 2; ++k)
        if (auto* g = detail::grad_of(n, k)) *g += n.grad;
    });
  }
  auto plan = detail::broadcast_plan(a.shape(), b.shape(), "add");
  Tensor<T> y(plan.out);
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) { y[o] = pa[ia] + pb[ib]; });
  return Var<T>::make(std::move(y), {a, b}, [plan](Node<T>& n) {
    auto* ga = detail::grad_of(n, 0);
    auto* gb = detail::grad_of(n, 1);
    detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (ga) (*ga)[ia] += n.grad[o];
      if (gb) (*gb)[ib] += n.grad[o];
    });
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  auto plan = detail::broadcast_plan(a.shape(), b.shape(), "mul");
  Tensor<T> y(plan.out);
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) { y[o] = pa[ia] * pb[ib]; });
  return Var<T>::make(std::move(y), {a, b}, [plan](Node<T>& n) {
    auto* ga = detail::grad_of(n, 0);
    auto* gb = detail::grad_of(n, 1);
    const T* va = n.parents[0]->value.data();
    const T* vb = n.parents[1]->value.data();
    detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (ga) (*ga)[ia] += n.grad[o] * vb[ib];
      if (gb) (*gb)[ib] += n.grad[o] * va[ia];
    });
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Var<T> reshape(const Var<T>& x, Shape s) {
  Tensor<T> y = x.value().reshaped(std::move(s));
  return Var<T>::make(std::move(y), {x}, [](Node<T>& n) {
    if (auto* gx = detail::grad_of(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*gx)[i] += n.grad[i];
  });
}

/// Concatenation along the leading axis.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw InputError("concat: no inputs");
  Shape s = xs[0].shape();
  int lead = 0;
  for (const auto& x : xs) {
    Shape t = x.shape();
    if (t.size() != s.size() || !std::equal(t.begin() + 1, t.end(), s.begin() + 1))
      throw InputError("concat: incompatible shapes " + shape_str(s) + " and " + shape_str(t));
    lead += t[0];
  }
  s[0] = lead;
  Tensor<T> y(s);
  std::size_t off = 0;
  for (const auto& x : xs) {
    std::copy(x.value().vec().begin(), x.value().vec().end(), y.vec().begin() + off);
    off += x.value().size();
  }
  return Var<T>::make(std::move(y), xs, [](Node<T>& n) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < n.parents.size(); ++k) {
      const std::size_t sz = n.parents[k]->value.size();
      if (auto* g = detail::grad_of(n, k))
        for (std::size_t i = 0; i < sz; ++i) (*g)[i] += n.grad[off + i];
      off += sz;
    }
  });
}

/// Rows [begin, end) of the leading axis.
template <typename T>
Var<T> slice(const Var<T>& x, int begin, int end) {
  Shape s = x.shape();
  if (begin < 0 || end > s[0] || begin >= end) throw InputError("slice: bad range");
  const std::size_t inner = x.value().size() / s[0];
  s[0] = end - begin;
  const std::size_t off = inner * begin;
  Tensor<T> y(s, AlignedVector<T>(x.value().vec().begin() + off, x.value().vec().begin() + off + inner * (end - begin)));
  return Var<T>::make(std::move(y), {x}, [off](Node<T>& n) {
    if (auto* g = detail::grad_of(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[off + i] += n.grad[i];
  });
}

template <typename T>
Var<T> transpose(const Var<T>& x) {
  detail::require_rank(x.shape(), 2, "transpose");
  const int r = x.dim(0), c = x.dim(1);
  Tensor<T> y({c, r});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) y(j, i) = x.value()(i, j);
  return Var<T>::make(std::move(y), {x}, [r, c](Node<T>& n) {
    if (auto* g = detail::grad_of(n, 0))
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) (*g)(i, j) += n.grad(j, i);
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// (m x k) * (k x n)
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::require_rank(a.shape(), 2, "matmul");
  detail::require_rank(b.shape(), 2, "matmul");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw InputError("matmul: inner dimensions differ " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  Tensor<T> y({m, n});
  detail::MapMat<T>(y.data(), m, n).noalias() =
      detail::CMapMat<T>(a.value().data(), m, k) * detail::CMapMat<T>(b.value().data(), k, n);
  return Var<T>::make(std::move(y), {a, b}, [m, k, n](Node<T>& nd) {
    detail::CMapMat<T> G(nd.grad.data(), m, n);
    if (auto* ga = detail::grad_of(nd, 0))
      detail::MapMat<T>(ga->data(), m, k).noalias() += G * detail::CMapMat<T>(nd.parents[1]->value.data(), k, n).transpose();
    if (auto* gb = detail::grad_of(nd, 1))
      detail::MapMat<T>(gb->data(), k, n).noalias() += detail::CMapMat<T>(nd.parents[0]->value.data(), m, k).transpose() * G;
  });
}

/// x (n x in) -> x W^T + b with W (out x in), b (out).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  auto y = matmul(x, transpose(weight));
  if (!bias.defined()) return y;
  return add(y, reshape(bias, {1, bias.dim(0)}));
}

/// Normalizes each row of a non-negative matrix to unit sum.
template <typename T>
Var<T> row_normalize(const Var<T>& a, T eps = T(1e-12)) {
  detail::require_rank(a.shape(), 2, "row_normalize");
  const int r = a.dim(0), c = a.dim(1);
  Tensor<T> y = a.value();
  std::vector<T> sums(r);
  for (int i = 0; i < r; ++i) {
    T s = eps;
    for (int j = 0; j < c; ++j) s += y(i, j);
    sums[i] = s;
    for (int j = 0; j < c; ++j) y(i, j) /= s;
  }
  return Var<T>::make(std::move(y), {a}, [r, c, sums](Node<T>& n) {
    auto* g = detail::grad_of(n, 0);
    if (!g) return;
    for (int i = 0; i < r; ++i) {
      T dot = 0;
      for (int j = 0; j < c; ++j) dot += n.grad(i, j) * n.value(i, j);
      for (int j = 0; j < c; ++j) (*g)(i, j) += (n.grad(i, j) - dot) / sums[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum(const Var<T>& x) {
  Tensor<T> y({1}, std::vector<T>{x.value().sum()});
  return Var<T>::make(std::move(y), {x}, [](Node<T>& n) {
    if (auto* g = detail::grad_of(n, 0))
      for (auto& v : g->vec()) v += n.grad[0];
  });
}

/// Sum of x weighted elementwise by a constant tensor.
template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& w) {
  x.value().require_same_shape(w, "weighted_sum");
  T s = 0;
  for (std::size_t i = 0; i < w.size(); ++i) s += x.value()[i] * w[i];
  return Var<T>::make(Tensor<T>({1}, std::vector<T>{s}), {x}, [w](Node<T>& n) {
    if (auto* g = detail::grad_of(n, 0))
      for (std::size_t i = 0; i < w.size(); ++i) (*g)[i] += n.grad[0] * w[i];
  });
}

template <typename T>
Var<T> add_all(const std::vector<Var<T>>& xs) {
  Var<T> acc = xs.at(0);
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return acc;
}

// ---------------------------------------------------------------------------
// Pooling

template <typename T>
Var<T> max_pool2d(const Var<T>& x, int k, int stride, int pad) {
  detail::require_rank(x.shape(), 3, "max_pool2d");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int Ho = detail::conv_out(H, k, stride, pad), Wo = detail::conv_out(W, k, stride, pad);
  Tensor<T> y({C, Ho, Wo});
  std::vector<std::size_t> arg(y.size());
  const auto& xv = x.value();
  for (int c = 0; c < C; ++c)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t bi = 0;
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            const int iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
            if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
            const std::size_t idx = (static_cast<std::size_t>(c) * H + iy) * W + ix;
            if (xv[idx] > best) {
              best = xv[idx];
              bi = idx;
            }
          }
        const std::size_t o = (static_cast<std::size_t>(c) * Ho + oy) * Wo + ox;
        y[o] = best;
        arg[o] = bi;
      }
  return Var<T>::make(std::move(y), {x}, [arg = std::move(arg)](Node<T>& n) {
    if (auto* g = detail::grad_of(n, 0))
      for (std::size_t o = 0; o < arg.size(); ++o) (*g)[arg[o]] += n.grad[o];
  });
}

/// Average pooling; padded cells count toward the divisor.
template <typename T>
Var<T> avg_pool2d(const Var<T>& x, int k, int stride, int pad) {
  detail::require_rank(x.shape(), 3, "avg_pool2d");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int Ho = detail::conv_out(H, k, stride, pad), Wo = detail::conv_out(W, k, stride, pad);
  const T inv = T(1) / T(k * k);
  Tensor<T> y({C, Ho, Wo});
  const auto& xv = x.value();
  auto visit = [=](int c, int oy, int ox, auto&& f) {
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const int iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
        if (iy >= 0 && iy < H && ix >= 0 && ix < W) f((static_cast<std::size_t>(c) * H + iy) * W + ix);
      }
  };
  for (int c = 0; c < C; ++c)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        T s = 0;
        visit(c, oy, ox, [&](std::size_t i) { s += xv[i]; });
        y(c, oy, ox) = s * inv;
      }
  return Var<T>::make(std::move(y), {x}, [=](Node<T>& n) {
    auto* g = detail::grad_of(n, 0);
    if (!g) return;
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          const T v = n.grad(c, oy, ox) * inv;
          visit(c, oy, ox, [&](std::size_t i) { (*g)[i] += v; });
        }
  });
}

/// Adaptive average pooling to a fixed output grid (bins may overlap when
/// the output is larger than the input).
template <typename T>
Var<T> adaptive_avg_pool2d(const Var<T>& x, int oh, int ow) {
  detail::require_rank(x.shape(), 3, "adaptive_avg_pool2d");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  auto bins = [](int in, int out) {
    std::vector<std::pair<int, int>> b(out);
    for (int i = 0; i < out; ++i)
      b[i] = {static_cast<int>(std::floor(static_cast<double>(i) * in / out)),
              static_cast<int>(std::ceil(static_cast<double>(i + 1) * in / out))};
    return b;
  };
  const auto by = bins(H, oh), bx = bins(W, ow);
  Tensor<T> y({C, oh, ow});
  const auto& xv = x.value();
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        T s = 0;
        for (int yy = by[i].first; yy < by[i].second; ++yy)
          for (int xx = bx[j].first; xx < bx[j].second; ++xx) s += xv(c, yy, xx);
        y(c, i, j) = s / T((by[i].second - by[i].first) * (bx[j].second - bx[j].first));
      }
  return Var<T>::make(std::move(y), {x}, [=](Node<T>& n) {
    auto* g = detail::grad_of(n, 0);
    if (!g) return;
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          const T v = n.grad(c, i, j) / T((by[i].second - by[i].first) * (bx[j].second - bx[j].first));
          for (int yy = by[i].first; yy < by[i].second; ++yy)
            for (int xx = bx[j].first; xx < bx[j].second; ++xx) (*g)(c, yy, xx) += v;
        }
  });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  return adaptive_avg_pool2d(x, 1, 1);
}

// ---------------------------------------------------------------------------
// Resampling

/// Bilinear resize with half-pixel centers (corner-aligned = false) and
/// edge clamping.
template <typename T>
Var<T> resize_bilinear(const Var<T>& x, int oh, int ow) {
  detail::require_rank(x.shape(), 3, "resize_bilinear");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (oh == H && ow == W) return x;
  const auto ty = detail::resize_taps(H, oh), tx = detail::resize_taps(W, ow);
  Tensor<T> y({C, oh, ow});
  const auto& xv = x.value();
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < oh; ++i) {
      const auto& a = ty[i];
      for (int j = 0; j < ow; ++j) {
        const auto& b = tx[j];
        y(c, i, j) = T(a.w0 * (b.w0 * xv(c, a.i0, b.i0) + b.w1 * xv(c, a.i0, b.i1)) +
                       a.w1 * (b.w0 * xv(c, a.i1, b.i0) + b.w1 * xv(c, a.i1, b.i1)));
      }
    }
  return Var<T>::make(std::move(y), {x}, [=](Node<T>& n) {
    auto* g = detail::grad_of(n, 0);
    if (!g) return;
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < oh; ++i) {
        const auto& a = ty[i];
        for (int j = 0; j < ow; ++j) {
          const auto& b = tx[j];
          const T v = n.grad(c, i, j);
          (*g)(c, a.i0, b.i0) += T(a.w0 * b.w0) * v;
          (*g)(c, a.i0, b.i1) += T(a.w0 * b.w1) * v;
          (*g)(c, a.i1, b.i0) += T(a.w1 * b.w0) * v;
          (*g)(c, a.i1, b.i1) += T(a.w1 * b.w1) * v;
        }
      }
  });
}

/// Depth-to-space: (C*s*s) x H x W -> C x (s*H) x (s*W); input channel
/// c*s*s + i*s + j lands at output (c, y*s + i, x*s + j).
template <typename T>
Tensor<T> pixel_shuffle_tensor(const Tensor<T>& x, int s) {
  const int Cs = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (Cs % (s * s) != 0) throw InputError("pixel_shuffle: channels not divisible by s^2");
  const int C = Cs / (s * s);
  Tensor<T> y({C, H * s, W * s});
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < s; ++i)
      for (int j = 0; j < s; ++j)
        for (int yy = 0; yy < H; ++yy)
          for (int xx = 0; xx < W; ++xx) y(c, yy * s + i, xx * s + j) = x((c * s + i) * s + j, yy, xx);
  return y;
}

template <typename T>
Var<T> pixel_shuffle(const Var<T>& x, int s) {
  detail::require_rank(x.shape(), 3, "pixel_shuffle");
  const int H = x.dim(1), W = x.dim(2);
  Tensor<T> y = pixel_shuffle_tensor(x.value(), s);
  const int C = y.dim(0);
  return Var<T>::make(std::move(y), {x}, [=](Node<T>& n) {
    auto* g = detail::grad_of(n, 0);
    if (!g) return;
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < s; ++i)
        for (int j = 0; j < s; ++j)
          for (int yy = 0; yy < H; ++yy)
            for (int xx = 0; xx < W; ++xx) (*g)((c * s + i) * s + j, yy, xx) += n.grad(c, yy * s + i, xx * s + j);
  });
}

/// Grouped bilinear sampling. `pos` is 2g x Ho x Wo in input pixel units:
/// channels [0, g) hold x positions, [g, 2g) y positions; group j samples
/// feature channels [j*C/g, (j+1)*C/g). Positions clamp to the border.
template <typename T>
Var<T> grid_sample(const Var<T>& x, const Var<T>& pos, int groups) {
  detail::require_rank(x.shape(), 3, "grid_sample");
  detail::require_rank(pos.shape(), 3, "grid_sample positions");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int Ho = pos.dim(1), Wo = pos.dim(2);
  if (groups <= 0 || C % groups != 0 || pos.dim(0) != 2 * groups)
    throw ConfigError("grid_sample: channels " + std::to_string(C) + " incompatible with " +
                      std::to_string(groups) + " groups");
  const int cg = C / groups;
  struct Tap {
    int x0, x1, y0, y1;
    T wx, wy;
    bool inx, iny;  // false when the coordinate was clamped
  };
  std::vector<Tap> taps(static_cast<std::size_t>(groups) * Ho * Wo);
  const auto& pv = pos.value();
  auto make_tap = [](T p, int size, int& i0, int& i1, T& w, bool& inside) {
    inside = p >= T(0) && p <= T(size - 1);
    p = std::clamp(p, T(0), T(size - 1));
    i0 = std::min(static_cast<int>(std::floor(p)), size - 1);
    i1 = std::min(i0 + 1, size - 1);
    w = p - T(i0);
  };
  for (int gi = 0; gi < groups; ++gi)
    for (int i = 0; i < Ho; ++i)
      for (int j = 0; j < Wo; ++j) {
        Tap& t = taps[(static_cast<std::size_t>(gi) * Ho + i) * Wo + j];
        make_tap(pv(gi, i, j), W, t.x0, t.x1, t.wx, t.inx);
        make_tap(pv(groups + gi, i, j), H, t.y0, t.y1, t.wy, t.iny);
      }
  Tensor<T> y({C, Ho, Wo});
  const auto& xv = x.value();
  for (int c = 0; c < C; ++c) {
    const int gi = c / cg;
    for (int i = 0; i < Ho; ++i)
      for (int j = 0; j < Wo; ++j) {
        const Tap& t = taps[(static_cast<std::size_t>(gi) * Ho + i) * Wo + j];
        const T top = (T(1) - t.wx) * xv(c, t.y0, t.x0) + t.wx * xv(c, t.y0, t.x1);
        const T bot = (T(1) - t.wx) * xv(c, t.y1, t.x0) + t.wx * xv(c, t.y1, t.x1);
        y(c, i, j) = (T(1) - t.wy) * top + t.wy * bot;
      }
  }
  return Var<T>::make(std::move(y), {x, pos}, [=, taps = std::move(taps)](Node<T>& n) {
    auto* gx = detail::grad_of(n, 0);
    auto* gp = detail::grad_of(n, 1);
    const auto& xv = n.parents[0]->value;
    for (int c = 0; c < C; ++c) {
      const int gi = c / cg;
      for (int i = 0; i < Ho; ++i)
        for (int j = 0; j < Wo; ++j) {
          const Tap& t = taps[(static_cast<std::size_t>(gi) * Ho + i) * Wo + j];
          const T g = n.grad(c, i, j);
          if (gx) {
            (*gx)(c, t.y0, t.x0) += g * (T(1) - t.wy) * (T(1) - t.wx);
            (*gx)(c, t.y0, t.x1) += g * (T(1) - t.wy) * t.wx;
            (*gx)(c, t.y1, t.x0) += g * t.wy * (T(1) - t.wx);
            (*gx)(c, t.y1, t.x1) += g * t.wy * t.wx;
          }
          if (gp) {
            const T v00 = xv(c, t.y0, t.x0), v01 = xv(c, t.y0, t.x1);
            const T v10 = xv(c, t.y1, t.x0), v11 = xv(c, t.y1, t.x1);
            if (t.inx && t.x1 != t.x0)
              (*gp)(gi, i, j) += g * ((T(1) - t.wy) * (v01 - v00) + t.wy * (v11 - v10));
            if (t.iny && t.y1 != t.y0)
              (*gp)(groups + gi, i, j) += g * ((T(1) - t.wx) * (v10 - v00) + t.wx * (v11 - v01));
          }
        }
    }
  });
}

}  // namespace waveinst::ops
