#pragma once

#include <cmath>
#include <vector>

#include "waveinst/matching.hpp"
#include "waveinst/model.hpp"

namespace waveinst {

struct LossWeights {
  double cls = 2.0;
  double obj = 1.0;
  double dice = 2.0;
  double pix = 5.0;
  double match_alpha = 0.8;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;

  void validate() const {
    if (cls < 0 || obj < 0 || dice < 0 || pix < 0) throw ConfigError("loss weights must be non-negative");
    if (match_alpha < 0 || match_alpha > 1) throw ConfigError("matching alpha must lie in [0, 1]");
  }
};

template <typename T>
T softplus(T x) {
  return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

/// Sigmoid focal loss of one logit, with its derivative.
template <typename T>
std::pair<T, T> focal_term(T x, bool positive, T alpha, T gamma) {
  const T p = ops::sigmoid_scalar(x);
  if (positive) {
    const T w = std::pow(T(1) - p, gamma);
    const T ce = softplus(-x);
    return {alpha * w * ce, alpha * w * (-gamma * p * ce - (T(1) - p))};
  }
  const T w = std::pow(p, gamma);
  const T ce = softplus(x);
  return {(T(1) - alpha) * w * ce, (T(1) - alpha) * w * (gamma * (T(1) - p) * ce + p)};
}

/// Summed sigmoid focal loss over an N x C logit matrix. Rows listed in
/// `positive_class` (class index, or -1 for background) define targets.
template <typename T>
T focal_loss(const Tensor<T>& logits, const std::vector<int>& positive_class, T alpha, T gamma,
             Tensor<T>* grad = nullptr) {
  const int N = logits.dim(0), C = logits.dim(1);
  if (static_cast<int>(positive_class.size()) != N) throw InputError("focal_loss: one target per row required");
  if (grad) *grad = Tensor<T>(logits.shape());
  T total = 0;
  for (int i = 0; i < N; ++i)
    for (int c = 0; c < C; ++c) {
      auto [l, d] = focal_term(logits(i, c), positive_class[i] == c, alpha, gamma);
      total += l;
      if (grad) (*grad)(i, c) = d;
    }
  return total;
}

/// Binary cross-entropy with logits against a soft target, with derivative.
template <typename T>
std::pair<T, T> bce_term(T x, T target) {
  return {softplus(x) - target * x, ops::sigmoid_scalar(x) - target};
}

/// Weighted loss terms; total is their sum.
struct LossBreakdown {
  double cls = 0, obj = 0, dice = 0, pix = 0;
  double total = 0;
};

template <typename T>
struct LossResult {
  Var<T> total;
  LossBreakdown terms;
  MatchAssignment assignment;
};

/// Matches predictions to targets and evaluates
/// L = w_cls*focal + w_obj*objectness BCE + w_dice*dice + w_pix*pixel BCE.
/// Focal and dice terms are sums normalised by the object count; the BCE
/// terms are means. Objectness targets are the dice of the matched pair, 0
/// for unmatched predictions. The target is not detached, so the returned
/// gradient is the exact gradient of the reported total.
template <typename T>
LossResult<T> composite_loss(const InstancePredictions<T>& preds, const std::vector<InstanceTarget<T>>& targets,
                             const LossWeights& w) {
  w.validate();
  const auto& logits = preds.logits.value();
  const auto& obj = preds.objectness.value();
  const auto& masks = preds.masks.value();
  const int N = masks.dim(0), P = masks.dim(1) * masks.dim(2);
  const int K = static_cast<int>(targets.size());
  const T norm = T(std::max(K, 1));

  LossResult<T> res;
  if (K > 0) res.assignment = hungarian_match(matching_cost(logits, masks, targets, T(w.match_alpha)));

  std::vector<int> positive(N, -1);
  std::vector<T> obj_target(N, T(0));
  Tensor<T> g_logits, g_obj(obj.shape()), g_masks(masks.shape());

  // classification
  for (auto [i, k] : res.assignment.pairs) positive[i] = targets[k].category;
  const T l_cls = focal_loss(logits, positive, T(w.focal_alpha), T(w.focal_gamma), &g_logits) / norm;
  for (auto& v : g_logits.vec()) v *= T(w.cls) / norm;

  // dice and pixel terms over matched pairs
  T l_dice = 0, l_pix = 0;
  const std::size_t pix_count = res.assignment.pairs.size() * static_cast<std::size_t>(P);
  std::vector<T> prob(P);
  for (auto [i, k] : res.assignment.pairs) {
    const T* m = masks.data() + static_cast<std::size_t>(i) * P;
    const T* g = targets[k].mask.data();
    T* gm = g_masks.data() + static_cast<std::size_t>(i) * P;
    T mg = 0, mm = 0, gg = 0;
    for (int p = 0; p < P; ++p) {
      prob[p] = ops::sigmoid_scalar(m[p]);
      mg += prob[p] * g[p];
      mm += prob[p] * prob[p];
      gg += g[p] * g[p];
    }
    const T den = mm + gg;
    const T dice = den == T(0) ? T(1) : T(2) * mg / den;
    obj_target[i] = dice;
    l_dice += T(1) - dice;
    for (int p = 0; p < P; ++p) {
      const T ddice = den == T(0) ? T(0) : T(2) * g[p] / den - T(4) * mg * prob[p] / (den * den);
      const T dsig = prob[p] * (T(1) - prob[p]);
      auto [bl, bd] = bce_term(m[p], g[p]);
      l_pix += bl;
      gm[p] = (-T(w.dice) / norm - T(w.obj) * obj(i, 0) / T(N)) * ddice * dsig + T(w.pix) * bd / T(pix_count);
    }
  }
  l_dice /= norm;
  if (pix_count) l_pix /= T(pix_count);

  // objectness
  T l_obj = 0;
  for (int i = 0; i < N; ++i) {
    auto [l, d] = bce_term(obj(i, 0), obj_target[i]);
    l_obj += l;
    g_obj(i, 0) = T(w.obj) * d / T(N);
  }
  l_obj /= T(N);

  res.terms = {w.cls * double(l_cls), w.obj * double(l_obj), w.dice * double(l_dice), w.pix * double(l_pix), 0.0};
  res.terms.total = res.terms.cls + res.terms.obj + res.terms.dice + res.terms.pix;
  res.total = Var<T>::make(Tensor<T>({1}, std::vector<T>{T(res.terms.total)}),
                           {preds.logits, preds.objectness, preds.masks},
                           [g_logits = std::move(g_logits), g_obj = std::move(g_obj),
                            g_masks = std::move(g_masks)](Node<T>& n) {
                             const T s = n.grad[0];
                             const Tensor<T>* grads[3] = {&g_logits, &g_obj, &g_masks};
                             for (std::size_t k = 0; k < 3; ++k)
                               if (auto* g = ops::detail::grad_of(n, k))
                                 for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += s * (*grads[k])[i];
                           });
  return res;
}

}  // namespace waveinst
