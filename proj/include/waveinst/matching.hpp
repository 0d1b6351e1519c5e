#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "waveinst/ops.hpp"
#include "waveinst/tensor.hpp"

namespace waveinst {

/// One ground-truth object at prediction-mask resolution. Mask values lie
/// in [0, 1] (area-averaged when downsampled).
template <typename T>
struct InstanceTarget {
  int category = 0;  // class index
  Tensor<T> mask;    // h x w
};

/// 2 sum(m g) / (sum m^2 + sum g^2); two empty masks score 1.
template <typename T>
T dice_score(const Tensor<T>& m, const Tensor<T>& g) {
  m.require_same_shape(g, "dice_score");
  T mg = 0, mm = 0, gg = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    mg += m[i] * g[i];
    mm += m[i] * m[i];
    gg += g[i] * g[i];
  }
  const T den = mm + gg;
  return den == T(0) ? T(1) : T(2) * mg / den;
}

/// Pairwise matching score p^(1-alpha) * dice^alpha, higher is better.
template <typename T>
T pair_score(T prob, T dice, T alpha) {
  return std::pow(prob, T(1) - alpha) * std::pow(dice, alpha);
}

/// N x K score matrix between predictions (class logits N x C, mask logits
/// N x h x w) and targets.
template <typename T>
Tensor<T> matching_cost(const Tensor<T>& class_logits, const Tensor<T>& mask_logits,
                        const std::vector<InstanceTarget<T>>& targets, T alpha) {
  const int N = mask_logits.dim(0);
  const int P = mask_logits.dim(1) * mask_logits.dim(2);
  const int K = static_cast<int>(targets.size());
  if (class_logits.dim(0) != N) throw InputError("matching_cost: logits and masks disagree on N");
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Mat M(N, P), G(K, P);
  for (int i = 0; i < N; ++i)
    for (int p = 0; p < P; ++p) M(i, p) = ops::sigmoid_scalar(mask_logits[static_cast<std::size_t>(i) * P + p]);
  for (int k = 0; k < K; ++k) {
    if (static_cast<int>(targets[k].mask.size()) != P)
      throw InputError("matching_cost: target mask " + shape_str(targets[k].mask.shape()) +
                       " does not match prediction resolution");
    if (targets[k].category < 0 || targets[k].category >= class_logits.dim(1))
      throw InputError("matching_cost: target category out of range");
    for (int p = 0; p < P; ++p) G(k, p) = targets[k].mask[p];
  }
  Mat inter = M * G.transpose();
  Eigen::Matrix<T, Eigen::Dynamic, 1> mm = M.rowwise().squaredNorm(), gg = G.rowwise().squaredNorm();
  Tensor<T> score({N, K});
  for (int i = 0; i < N; ++i)
    for (int k = 0; k < K; ++k) {
      const T den = mm(i) + gg(k);
      const T dice = den == T(0) ? T(1) : T(2) * inter(i, k) / den;
      const T prob = ops::sigmoid_scalar(class_logits(i, targets[k].category));
      score(i, k) = pair_score(prob, dice, alpha);
    }
  return score;
}

struct MatchAssignment {
  std::vector<std::pair<int, int>> pairs;  // (prediction, ground truth), ascending prediction index
  double total_score = 0;
};

namespace detail {

// Shortest-augmenting-path assignment for rows <= cols, minimising cost.
// Returns the column assigned to each row. Scans rows and columns in index
// order with strict comparisons, so equal-cost alternatives resolve toward
// lower indices.
inline std::vector<int> min_cost_assignment(const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  const int m = n ? static_cast<int>(cost[0].size()) : 0;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, false);
    do {
      used[j0] = true;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= m; ++j)
    if (p[j]) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

}  // namespace detail

/// One-to-one assignment maximising the summed score; |pairs| = min(N, K).
template <typename T>
MatchAssignment hungarian_match(const Tensor<T>& score) {
  if (score.rank() != 2) throw InputError("hungarian_match: expected an N x K matrix");
  const int N = score.dim(0), K = score.dim(1);
  for (std::size_t i = 0; i < score.size(); ++i)
    if (std::isnan(static_cast<double>(score[i]))) throw InputError("hungarian_match: NaN in score matrix");
  MatchAssignment out;
  if (N == 0 || K == 0) return out;
  const bool by_pred = N <= K;
  const int rows = by_pred ? N : K, cols = by_pred ? K : N;
  std::vector<std::vector<double>> cost(rows, std::vector<double>(cols));
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) cost[r][c] = -static_cast<double>(by_pred ? score(r, c) : score(c, r));
  const auto assign = detail::min_cost_assignment(cost);
  for (int r = 0; r < rows; ++r) {
    const int c = assign[r];
    out.pairs.emplace_back(by_pred ? r : c, by_pred ? c : r);
  }
  std::sort(out.pairs.begin(), out.pairs.end());
  for (auto [i, k] : out.pairs) out.total_score += static_cast<double>(score(i, k));
  return out;
}

}  // namespace waveinst
