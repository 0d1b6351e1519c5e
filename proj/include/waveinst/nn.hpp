#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "waveinst/ops.hpp"

namespace waveinst {

using Rng = std::mt19937_64;

/// Derives an independent stream from a base seed and a list of indices
/// (splitmix64 mixing), so per-item generators do not depend on visit order.
inline std::uint64_t mix_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> salt) {
  auto step = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::uint64_t h = step(seed);
  for (auto s : salt) h = step(h ^ step(s));
  return h;
}

/// Ordered registry of named learnable tensors.
template <typename T>
class ParameterSet {
 public:
  Var<T> add(std::string name, Tensor<T> init) {
    for (const auto& [n, _] : params_)
      if (n == name) throw ConfigError("duplicate parameter name: " + name);
    Var<T> v(std::move(init), true);
    params_.emplace_back(std::move(name), v);
    return v;
  }

  std::vector<std::pair<std::string, Var<T>>>& items() { return params_; }
  const std::vector<std::pair<std::string, Var<T>>>& items() const { return params_; }
  std::size_t size() const { return params_.size(); }

  Var<T> get(const std::string& name) const {
    for (const auto& [n, v] : params_)
      if (n == name) return v;
    throw ConfigError("unknown parameter: " + name);
  }

  std::size_t count_scalars() const {
    std::size_t c = 0;
    for (const auto& [_, v] : params_) c += v.value().size();
    return c;
  }

  void zero_grad() {
    for (auto& [_, v] : params_) v.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Var<T>>> params_;
};

/// Fan-in normal initialisation (std = sqrt(2 / fan_in)).
template <typename T>
Tensor<T> kaiming_normal(Shape shape, int fan_in, Rng& rng, double gain = 1.0) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> nd(0.0, gain * std::sqrt(2.0 / fan_in));
  for (auto& v : t.vec()) v = static_cast<T>(nd(rng));
  return t;
}

template <typename T>
struct Conv2d {
  Var<T> weight, bias;
  int stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(ParameterSet<T>& ps, const std::string& name, int in, int out, int k, int stride_ = 1,
         int pad_ = -1, Rng* rng = nullptr, double gain = 1.0)
      : stride(stride_), pad(pad_ < 0 ? k / 2 : pad_) {
    Tensor<T> w({out, in, k, k});
    if (rng) w = kaiming_normal<T>({out, in, k, k}, in * k * k, *rng, gain);
    weight = ps.add(name + ".weight", std::move(w));
    bias = ps.add(name + ".bias", Tensor<T>({out}));
  }

  Var<T> operator()(const Var<T>& x) const { return ops::conv2d(x, weight, bias, stride, pad); }
  int out_channels() const { return weight.dim(0); }
};

template <typename T>
struct Linear {
  Var<T> weight, bias;

  Linear() = default;
  Linear(ParameterSet<T>& ps, const std::string& name, int in, int out, Rng* rng = nullptr, double gain = 1.0) {
    Tensor<T> w({out, in});
    if (rng) w = kaiming_normal<T>({out, in}, in, *rng, gain);
    weight = ps.add(name + ".weight", std::move(w));
    bias = ps.add(name + ".bias", Tensor<T>({out}));
  }

  Var<T> operator()(const Var<T>& x) const { return ops::linear(x, weight, bias); }
};

}  // namespace waveinst
