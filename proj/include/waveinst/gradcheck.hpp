#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "waveinst/autograd.hpp"
#include "waveinst/nn.hpp"

namespace waveinst {

struct GradCheckEntry {
  std::string tensor;
  std::size_t index = 0;
  double analytic = 0, numeric = 0;
  double rel_error = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  std::vector<std::string> zero_grad_tensors;  // tensors whose whole gradient is zero
  double worst = 0;

  bool passed(double tol) const { return worst <= tol && zero_grad_tensors.empty(); }
};

/// Compares backprop against central differences for up to `per_tensor`
/// entries (chosen at random) of every parameter. `loss` must rebuild the
/// graph from the current parameter values on each call.
inline GradCheckReport check_gradients(ParameterSet<double>& params, const std::function<Var<double>()>& loss,
                                       int per_tensor, Rng& rng, double step = 1e-5, double abs_floor = 1e-8) {
  GradCheckReport rep;
  params.zero_grad();
  backward(loss());
  for (auto& [name, p] : params.items()) {
    const Tensor<double> g = p.has_grad() ? p.grad() : Tensor<double>(p.shape());
    if (g.abs_max() == 0.0) rep.zero_grad_tensors.push_back(name);
    const std::size_t n = p.value().size();
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    const int count = static_cast<int>(std::min<std::size_t>(n, static_cast<std::size_t>(per_tensor)));
    for (int c = 0; c < count; ++c) {
      const std::size_t i = static_cast<std::size_t>(count) == n ? static_cast<std::size_t>(c) : pick(rng);
      double& v = p.mutable_value()[i];
      const double orig = v;
      double lp, lm;
      {
        NoGradGuard ng;
        v = orig + step;
        lp = loss().value()[0];
        v = orig - step;
        lm = loss().value()[0];
      }
      v = orig;
      GradCheckEntry e{name, i, g[i], (lp - lm) / (2 * step), 0};
      const double diff = std::abs(e.analytic - e.numeric);
      e.rel_error = diff <= abs_floor ? 0.0 : diff / std::max(std::abs(e.analytic), std::abs(e.numeric));
      rep.worst = std::max(rep.worst, e.rel_error);
      rep.entries.push_back(e);
    }
  }
  params.zero_grad();
  return rep;
}

}  // namespace waveinst
