#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "waveinst/mask.hpp"
#include "waveinst/tensor.hpp"

namespace waveinst {

/// 3 x H x W RGB tensor -> H x W CV_32FC3 (RGB channel order).
inline cv::Mat to_mat(const Tensor<float>& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw InputError("to_mat: expected 3 x H x W, got " + shape_str(img.shape()));
  const int H = img.dim(1), W = img.dim(2);
  cv::Mat m(H, W, CV_32FC3);
  for (int y = 0; y < H; ++y) {
    auto* row = m.ptr<cv::Vec3f>(y);
    for (int x = 0; x < W; ++x) row[x] = {img(0, y, x), img(1, y, x), img(2, y, x)};
  }
  return m;
}

inline Tensor<float> from_mat(const cv::Mat& m) {
  cv::Mat f;
  m.convertTo(f, CV_32FC3);
  Tensor<float> img({3, f.rows, f.cols});
  for (int y = 0; y < f.rows; ++y) {
    const auto* row = f.ptr<cv::Vec3f>(y);
    for (int x = 0; x < f.cols; ++x)
      for (int c = 0; c < 3; ++c) img(c, y, x) = row[x][c];
  }
  return img;
}

/// Reads PNG/JPEG as RGB in [0, 1].
inline Tensor<float> read_image(const std::string& path) {
  cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
  if (bgr.empty()) throw InputError("cannot read image " + path);
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  cv::Mat f;
  rgb.convertTo(f, CV_32FC3, 1.0 / 255.0);
  return from_mat(f);
}

inline cv::Mat to_bgr8(const Tensor<float>& img) {
  cv::Mat rgb = to_mat(img), bgr, out;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  bgr.convertTo(out, CV_8UC3, 255.0);  // saturating, rounds to nearest
  return out;
}

inline void write_image(const std::string& path, const Tensor<float>& img) {
  if (!cv::imwrite(path, to_bgr8(img))) throw Error("cannot write image " + path);
}

inline void write_mask_png(const std::string& path, const BinaryMask& m) {
  cv::Mat out(m.height, m.width, CV_8UC1);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) out.at<std::uint8_t>(y, x) = m.at(y, x) ? 255 : 0;
  if (!cv::imwrite(path, out)) throw Error("cannot write mask " + path);
}

/// Image with each detection tinted by a per-instance colour.
inline void write_overlay(const std::string& path, const Tensor<float>& img, const std::vector<Detection>& dets) {
  cv::Mat bgr = to_bgr8(img);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const auto& m = dets[i].mask;
    if (m.height != bgr.rows || m.width != bgr.cols) throw InputError("write_overlay: mask size differs from image");
    const cv::Vec3b tint((37 * i + 60) % 256, (91 * i + 200) % 256, (53 * i + 120) % 256);
    for (int y = 0; y < m.height; ++y)
      for (int x = 0; x < m.width; ++x)
        if (m.at(y, x)) {
          auto& px = bgr.at<cv::Vec3b>(y, x);
          for (int c = 0; c < 3; ++c) px[c] = static_cast<std::uint8_t>((px[c] + tint[c]) / 2);
        }
  }
  if (!cv::imwrite(path, bgr)) throw Error("cannot write overlay " + path);
}

}  // namespace waveinst
