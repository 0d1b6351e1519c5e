#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <set>

#include "test_util.hpp"
#include "waveinst/gradcheck.hpp"
#include "waveinst/loss.hpp"

using namespace waveinst;

namespace {

Tensor<double> mask_from(int h, int w, std::initializer_list<int> on) {
  Tensor<double> m({h, w});
  for (int i : on) m[i] = 1.0;
  return m;
}

// Exhaustive maximum over all one-to-one assignments of size min(N, K),
// summed in ascending prediction order like hungarian_match.
double brute_force_best(const Tensor<double>& s) {
  const int N = s.dim(0), K = s.dim(1);
  const int take = std::min(N, K);
  double best = -1e300;
  std::vector<int> gt_of(N, -1);
  std::vector<bool> used(K, false);
  std::function<void(int, int)> rec = [&](int i, int matched) {
    if (matched == take) {
      double t = 0;
      for (int p = 0; p < N; ++p)
        if (gt_of[p] >= 0) t += s(p, gt_of[p]);
      best = std::max(best, t);
      return;
    }
    if (i == N || N - i < take - matched) return;
    for (int k = 0; k < K; ++k) {
      if (used[k]) continue;
      used[k] = true;
      gt_of[i] = k;
      rec(i + 1, matched + 1);
      gt_of[i] = -1;
      used[k] = false;
    }
    rec(i + 1, matched);
  };
  rec(0, 0);
  return best;
}

InstancePredictions<double> make_preds(ParameterSet<double>& ps, int N, int C, int h, int w, Rng& rng) {
  InstancePredictions<double> p;
  p.logits = ps.add("logits", wtest::random_tensor({N, C}, rng, -3, 3));
  p.objectness = ps.add("objectness", wtest::random_tensor({N, 1}, rng, -3, 3));
  p.masks = ps.add("masks", wtest::random_tensor({N, h, w}, rng, -4, 4));
  return p;
}

std::vector<InstanceTarget<double>> random_targets(int K, int C, int h, int w, Rng& rng) {
  std::vector<InstanceTarget<double>> t;
  std::uniform_int_distribution<int> cat(0, C - 1);
  std::bernoulli_distribution on(0.3);
  for (int k = 0; k < K; ++k) {
    InstanceTarget<double> g{cat(rng), Tensor<double>({h, w})};
    for (auto& v : g.mask.vec()) v = on(rng) ? 1.0 : 0.0;
    g.mask[0] = 1.0;
    t.push_back(std::move(g));
  }
  return t;
}

}  // namespace

TEST(Dice, HandValues) {
  auto a = mask_from(1, 3, {0, 1}), b = mask_from(1, 3, {1, 2});
  EXPECT_EQ(dice_score(a, b), 0.5);
  EXPECT_EQ(dice_score(a, a), 1.0);
  EXPECT_EQ(dice_score(Tensor<double>({1, 3}, 0.3), Tensor<double>({1, 3})), 0.0);
  EXPECT_EQ(dice_score(Tensor<double>({2, 2}), Tensor<double>({2, 2})), 1.0);
  EXPECT_THROW(dice_score(Tensor<double>({2, 2}), Tensor<double>({2, 3})), InputError);
}

TEST(Dice, SymmetricAndBounded) {
  Rng rng(2);
  std::bernoulli_distribution on(0.4);
  for (int t = 0; t < 200; ++t) {
    Tensor<double> a({4, 4}), b({4, 4});
    for (auto& v : a.vec()) v = on(rng);
    for (auto& v : b.vec()) v = on(rng);
    const double d = dice_score(a, b);
    EXPECT_EQ(d, dice_score(b, a));
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 1.0);
  }
}

TEST(MatchingCost, PairScoreValues) {
  EXPECT_EQ(pair_score(1.0, 1.0, 0.8), 1.0);
  EXPECT_NEAR(pair_score(0.5, 0.8, 0.8), 0.7282, 1e-3);
  EXPECT_NEAR(pair_score(0.5, 0.8, 0.8), std::pow(0.5, 0.2) * std::pow(0.8, 0.8), 1e-15);
  EXPECT_EQ(pair_score(0.7, 0.0, 0.8), 0.0);
}

TEST(MatchingCost, MonotoneInProbabilityAndDice) {
  for (double p = 0.05; p < 1; p += 0.05)
    for (double d = 0.05; d < 1; d += 0.05) {
      EXPECT_LE(pair_score(p, d, 0.8), pair_score(p + 0.05, d, 0.8));
      EXPECT_LE(pair_score(p, d, 0.8), pair_score(p, d + 0.05, 0.8));
    }
}

TEST(MatchingCost, MatrixEntries) {
  Tensor<double> logits({2, 2}, std::vector<double>{0.0, 50.0, 50.0, 0.0});
  Tensor<double> masks({2, 1, 2}, std::vector<double>{50, -50, -50, 50});
  std::vector<InstanceTarget<double>> t{{1, mask_from(1, 2, {0})}, {0, mask_from(1, 2, {1})}};
  auto s = matching_cost(logits, masks, t, 0.8);
  EXPECT_NEAR(s(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(s(1, 1), 1.0, 1e-12);
  EXPECT_NEAR(s(0, 1), 0.0, 1e-12);
  t[0].mask = Tensor<double>({2, 2});
  EXPECT_THROW(matching_cost(logits, masks, t, 0.8), InputError);
}

TEST(Hungarian, SpecExample) {
  Tensor<double> s({2, 2}, std::vector<double>{0.9, 0.1, 0.2, 0.8});
  auto m = hungarian_match(s);
  EXPECT_EQ(m.pairs, (std::vector<std::pair<int, int>>{{0, 0}, {1, 1}}));
  EXPECT_NEAR(m.total_score, 1.7, 1e-12);
}

TEST(Hungarian, TiesResolveToIdentity) {
  for (auto [n, k] : {std::pair{3, 3}, std::pair{2, 4}, std::pair{4, 2}}) {
    auto m = hungarian_match(Tensor<double>({n, k}, 0.5));
    ASSERT_EQ(static_cast<int>(m.pairs.size()), std::min(n, k));
    for (int i = 0; i < std::min(n, k); ++i) EXPECT_EQ(m.pairs[i], (std::pair<int, int>{i, i}));
  }
}

TEST(Hungarian, DiagonalFavouringIsIdentity) {
  Tensor<double> s({4, 4}, 0.1);
  for (int i = 0; i < 4; ++i) s(i, i) = 0.9;
  auto m = hungarian_match(s);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(m.pairs[i], (std::pair<int, int>{i, i}));
}

TEST(Hungarian, MatchesExhaustiveSearch) {
  Rng rng(77);
  std::uniform_int_distribution<int> dim(1, 6);
  for (int t = 0; t < 300; ++t) {
    auto s = wtest::random_tensor({dim(rng), dim(rng)}, rng, 0, 1);
    auto m = hungarian_match(s);
    EXPECT_EQ(m.total_score, brute_force_best(s));
    ASSERT_EQ(m.pairs.size(), static_cast<std::size_t>(std::min(s.dim(0), s.dim(1))));
    std::set<int> preds, gts;
    for (auto [i, k] : m.pairs) {
      preds.insert(i);
      gts.insert(k);
    }
    EXPECT_EQ(preds.size(), m.pairs.size());
    EXPECT_EQ(gts.size(), m.pairs.size());
  }
}

TEST(Hungarian, ScalingKeepsAssignment) {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    auto s = wtest::random_tensor({5, 4}, rng, 0, 1);
    auto scaled = s;
    for (auto& v : scaled.vec()) v *= 3.5;
    auto a = hungarian_match(s), b = hungarian_match(scaled);
    EXPECT_EQ(a.pairs, b.pairs);
    EXPECT_NEAR(b.total_score, 3.5 * a.total_score, 1e-12);
  }
}

TEST(Hungarian, EdgeCases) {
  EXPECT_TRUE(hungarian_match(Tensor<double>({3, 0})).pairs.empty());
  Tensor<double> s({2, 2}, 0.5);
  s[1] = std::nan("");
  EXPECT_THROW(hungarian_match(s), InputError);
}

TEST(Focal, HandValues) {
  auto [l, d] = focal_term(0.0, true, 0.25, 2.0);
  EXPECT_NEAR(l, 0.25 * 0.25 * std::log(2.0), 1e-15);
  EXPECT_NEAR(l, 0.04332, 1e-4);
  EXPECT_LT(focal_term(30.0, true, 0.25, 2.0).first, 1e-12);
  // gamma 0, alpha 0.5: half the binary cross-entropy
  for (double x : {-2.0, -0.3, 0.7, 3.0}) {
    const double p = 1 / (1 + std::exp(-x));
    EXPECT_NEAR(focal_term(x, true, 0.5, 0.0).first, -0.5 * std::log(p), 1e-12);
    EXPECT_NEAR(focal_term(x, false, 0.5, 0.0).first, -0.5 * std::log(1 - p), 1e-12);
  }
}

TEST(Focal, DerivativeMatchesFiniteDifference) {
  for (bool pos : {true, false})
    for (double x : {-3.0, -0.5, 0.0, 1.2, 4.0}) {
      const double h = 1e-6;
      const double fd = (focal_term(x + h, pos, 0.25, 2.0).first - focal_term(x - h, pos, 0.25, 2.0).first) / (2 * h);
      EXPECT_NEAR(focal_term(x, pos, 0.25, 2.0).second, fd, 1e-8);
    }
}

TEST(CompositeLoss, BreakdownRecombinesAndScalesLinearly) {
  Rng rng(9);
  ParameterSet<double> ps;
  auto p = make_preds(ps, 6, 2, 4, 4, rng);
  auto t = random_targets(3, 2, 4, 4, rng);
  LossWeights w;
  auto r = composite_loss(p, t, w);
  const auto& b = r.terms;
  EXPECT_NEAR(b.cls + b.obj + b.dice + b.pix, b.total, 1e-6);
  EXPECT_NEAR(r.total.value()[0], b.total, 1e-12);
  EXPECT_GE(b.total, 0.0);
  w.dice *= 2;
  auto r2 = composite_loss(p, t, w);
  EXPECT_NEAR(r2.terms.dice, 2 * b.dice, 1e-12);
  EXPECT_EQ(r2.terms.cls, b.cls);
  EXPECT_EQ(r2.terms.obj, b.obj);
  EXPECT_EQ(r2.terms.pix, b.pix);
}

TEST(CompositeLoss, ZeroWeightsGiveZero) {
  Rng rng(10);
  ParameterSet<double> ps;
  auto p = make_preds(ps, 4, 2, 3, 3, rng);
  LossWeights w;
  w.cls = w.obj = w.dice = w.pix = 0;
  EXPECT_EQ(composite_loss(p, random_targets(2, 2, 3, 3, rng), w).terms.total, 0.0);
}

TEST(CompositeLoss, PerfectPredictionsApproachZero) {
  const int N = 4, h = 3, w = 3;
  auto t = std::vector<InstanceTarget<double>>{{1, mask_from(h, w, {0, 1, 4})}, {0, mask_from(h, w, {8})}};
  InstancePredictions<double> p;
  Tensor<double> logits({N, 2}, -40.0), obj({N, 1}, -40.0), masks({N, h, w}, -40.0);
  for (int k = 0; k < 2; ++k) {
    logits(k, t[k].category) = 40;
    obj(k, 0) = 40;
    for (int i = 0; i < h * w; ++i) masks[k * h * w + i] = t[k].mask[i] > 0 ? 40 : -40;
  }
  p.logits = Var<double>(logits);
  p.objectness = Var<double>(obj);
  p.masks = Var<double>(masks);
  auto r = composite_loss(p, t, LossWeights{});
  EXPECT_LT(r.terms.total, 1e-9);
  EXPECT_EQ(r.assignment.pairs, (std::vector<std::pair<int, int>>{{0, 0}, {1, 1}}));
}

TEST(CompositeLoss, NoTargetsStillDefined) {
  Rng rng(11);
  ParameterSet<double> ps;
  auto p = make_preds(ps, 5, 2, 3, 3, rng);
  auto r = composite_loss(p, {}, LossWeights{});
  EXPECT_GT(r.terms.cls, 0.0);
  EXPECT_GT(r.terms.obj, 0.0);
  EXPECT_EQ(r.terms.dice, 0.0);
  EXPECT_EQ(r.terms.pix, 0.0);
  EXPECT_TRUE(r.assignment.pairs.empty());
}

TEST(CompositeLoss, GradientMatchesFiniteDifferences) {
  Rng rng(12);
  ParameterSet<double> ps;
  auto p = make_preds(ps, 5, 3, 4, 4, rng);
  auto t = random_targets(3, 3, 4, 4, rng);
  // soft (area-averaged) targets are legal too
  t[2].mask[5] = 0.25;
  auto rep = check_gradients(ps, [&] { return composite_loss(p, t, LossWeights{}).total; }, 200, rng);
  EXPECT_TRUE(rep.passed(1e-4)) << "worst " << rep.worst;
}

TEST(CompositeLoss, RejectsInvalidWeights) {
  Rng rng(13);
  ParameterSet<double> ps;
  auto p = make_preds(ps, 2, 2, 2, 2, rng);
  LossWeights w;
  w.match_alpha = 1.5;
  EXPECT_THROW(composite_loss(p, {}, w), ConfigError);
  w = LossWeights{};
  w.pix = -1;
  EXPECT_THROW(composite_loss(p, {}, w), ConfigError);
}
