#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>
#include <opencv2/imgproc.hpp>

#include "waveinst/image_io.hpp"
#include "waveinst/nn.hpp"
#include "waveinst/scene.hpp"

namespace waveinst {

/// One photometric transform, applied with `probability`; its strength is
/// drawn uniformly from [low, high]:
///   brightness     additive offset
///   contrast       gain about the image mean
///   hue            hue rotation in degrees
///   saturation     saturation gain
///   gaussian_noise per-pixel sigma
///   iso_noise      sigma of luminance-correlated plus shot noise
///   glass_blur     Gaussian sigma around a one-pixel local shuffle
///   motion_blur    kernel length in pixels (rounded to odd, >= 3)
struct AugmentOp {
  std::string name;
  double probability = 1.0;
  double low = 0, high = 0;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AugmentOp, name, probability, low, high)

inline const std::vector<std::string>& augment_names() {
  static const std::vector<std::string> n{"brightness", "contrast",  "hue",        "saturation",
                                          "gaussian_noise", "iso_noise", "glass_blur", "motion_blur"};
  return n;
}

struct AugmentPolicy {
  std::vector<AugmentOp> ops;

  void validate() const {
    for (const auto& op : ops) {
      if (std::find(augment_names().begin(), augment_names().end(), op.name) == augment_names().end())
        throw ConfigError("augment: unknown transform '" + op.name + "'");
      if (op.probability < 0 || op.probability > 1 || op.low > op.high)
        throw ConfigError("augment: bad probability or range for '" + op.name + "'");
    }
  }

  static AugmentPolicy identity() { return {}; }

  // Conservative magnitudes; the source recipe does not state them.
  static AugmentPolicy standard() {
    return {{{"brightness", 0.5, -0.1, 0.1},
             {"contrast", 0.5, 0.85, 1.15},
             {"hue", 0.3, -10, 10},
             {"saturation", 0.3, 0.8, 1.2},
             {"gaussian_noise", 0.2, 0.005, 0.02},
             {"iso_noise", 0.1, 0.005, 0.02},
             {"glass_blur", 0.05, 0.3, 0.6},
             {"motion_blur", 0.1, 3, 5}}};
  }
};

namespace detail {

inline void clip01(cv::Mat& m) {
  cv::min(m, 1.0, m);
  cv::max(m, 0.0, m);
}

inline void apply_op(cv::Mat& img, const std::string& name, double v, Rng& rng) {
  std::normal_distribution<float> nd(0.0f, 1.0f);
  if (name == "brightness") {
    img += cv::Scalar::all(v);
  } else if (name == "contrast") {
    cv::Mat gray;
    cv::cvtColor(img, gray, cv::COLOR_RGB2GRAY);
    const double mean = cv::mean(gray)[0];
    img = (img - cv::Scalar::all(mean)) * v + cv::Scalar::all(mean);
  } else if (name == "hue" || name == "saturation") {
    cv::Mat hsv;
    cv::cvtColor(img, hsv, cv::COLOR_RGB2HSV);  // float: H in [0, 360)
    for (int y = 0; y < hsv.rows; ++y)
      for (auto* p = hsv.ptr<cv::Vec3f>(y), *e = p + hsv.cols; p != e; ++p) {
        if (name == "hue")
          (*p)[0] = static_cast<float>(std::fmod(std::fmod((*p)[0] + v, 360.0) + 360.0, 360.0));
        else
          (*p)[1] = std::clamp(static_cast<float>((*p)[1] * v), 0.0f, 1.0f);
      }
    cv::cvtColor(hsv, img, cv::COLOR_HSV2RGB);
  } else if (name == "gaussian_noise") {
    for (int y = 0; y < img.rows; ++y)
      for (auto* p = img.ptr<cv::Vec3f>(y), *e = p + img.cols; p != e; ++p)
        for (int c = 0; c < 3; ++c) (*p)[c] += static_cast<float>(v) * nd(rng);
  } else if (name == "iso_noise") {
    // luminance noise shared by the channels, weaker chroma noise, and a
    // shot term growing with intensity
    for (int y = 0; y < img.rows; ++y)
      for (auto* p = img.ptr<cv::Vec3f>(y), *e = p + img.cols; p != e; ++p) {
        const float lum = nd(rng);
        for (int c = 0; c < 3; ++c) {
          const float shot = std::sqrt(std::max((*p)[c], 0.0f)) * nd(rng);
          (*p)[c] += static_cast<float>(v) * (0.8f * lum + 0.3f * nd(rng) + 0.5f * shot);
        }
      }
  } else if (name == "glass_blur") {
    cv::GaussianBlur(img, img, cv::Size(0, 0), v);
    std::uniform_int_distribution<int> d(-1, 1);
    for (int y = img.rows - 2; y > 0; --y)
      for (int x = img.cols - 2; x > 0; --x)
        std::swap(img.at<cv::Vec3f>(y, x), img.at<cv::Vec3f>(y + d(rng), x + d(rng)));
    cv::GaussianBlur(img, img, cv::Size(0, 0), v);
  } else if (name == "motion_blur") {
    int k = std::max(3, static_cast<int>(std::lround(v)));
    if (k % 2 == 0) ++k;
    const double angle = std::uniform_real_distribution<double>(0, CV_PI)(rng);
    cv::Mat kernel = cv::Mat::zeros(k, k, CV_32F);
    const double r = (k - 1) / 2.0;
    const cv::Point2d c(r, r), dir(std::cos(angle) * r, std::sin(angle) * r);
    cv::line(kernel, cv::Point(cvRound(c.x - dir.x), cvRound(c.y - dir.y)),
             cv::Point(cvRound(c.x + dir.x), cvRound(c.y + dir.y)), cv::Scalar(1.0));
    kernel /= cv::sum(kernel)[0];
    cv::filter2D(img, img, -1, kernel, cv::Point(-1, -1), 0, cv::BORDER_REFLECT);
  }
  clip01(img);
}

}  // namespace detail

/// Photometric augmentation: the image changes, the masks never do. Pixel
/// values stay in [0, 1].
inline SceneAnnotation augment(const SceneAnnotation& scene, const AugmentPolicy& policy, Rng& rng) {
  policy.validate();
  SceneAnnotation out = scene;
  if (policy.ops.empty()) return out;
  cv::Mat img = to_mat(scene.image);
  std::uniform_real_distribution<double> u(0, 1);
  for (const auto& op : policy.ops) {
    const double draw = u(rng);
    const double v = op.low == op.high ? op.low : std::uniform_real_distribution<double>(op.low, op.high)(rng);
    if (draw < op.probability) detail::apply_op(img, op.name, v, rng);
  }
  out.image = from_mat(img);
  return out;
}

}  // namespace waveinst
