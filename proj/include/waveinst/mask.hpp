#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "waveinst/tensor.hpp"

namespace waveinst {

/// Binary H x W mask, row-major, one byte per pixel (0 or 1).
struct BinaryMask {
  int height = 0, width = 0;
  std::vector<std::uint8_t> data;

  BinaryMask() = default;
  BinaryMask(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w, 0) {}

  std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }

  std::size_t area() const {
    std::size_t a = 0;
    for (auto v : data) a += v != 0;
    return a;
  }
  bool empty() const { return area() == 0; }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

struct Detection {
  int category = 0;  // class index
  double score = 0;
  BinaryMask mask;
};

struct GroundTruth {
  int category = 0;
  BinaryMask mask;
};

inline void require_same_size(const BinaryMask& a, const BinaryMask& b, const char* what) {
  if (a.height != b.height || a.width != b.width)
    throw InputError(std::string(what) + ": mask sizes differ (" + std::to_string(a.height) + "x" +
                     std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" + std::to_string(b.width) + ")");
}

/// Area-averaged downsampling by an integer factor; each output cell holds
/// the covered fraction of its block.
template <typename T>
Tensor<T> downsample_area(const BinaryMask& m, int factor) {
  const int h = m.height / factor, w = m.width / factor;
  Tensor<T> out({h, w});
  const T inv = T(1) / T(factor * factor);
  for (int y = 0; y < h * factor; ++y)
    for (int x = 0; x < w * factor; ++x)
      if (m.at(y, x)) out(y / factor, x / factor) += inv;
  return out;
}

}  // namespace waveinst
