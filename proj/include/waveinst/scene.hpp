#pragma once

#include <string>
#include <vector>

#include "waveinst/mask.hpp"
#include "waveinst/tensor.hpp"

namespace waveinst {

inline const std::vector<std::string>& default_categories() {
  static const std::vector<std::string> c{"trunk", "branch"};
  return c;
}

/// One image (3 x H x W, RGB in [0, 1]) with its instance masks. Instance
/// categories are indices into the owning dataset's category list.
struct SceneAnnotation {
  int image_id = 0;
  Tensor<float> image;
  std::vector<GroundTruth> instances;
  std::string source_path;

  int height() const { return image.dim(1); }
  int width() const { return image.dim(2); }

  void validate(int num_categories) const {
    if (image.rank() != 3 || image.dim(0) != 3)
      throw InputError("scene " + std::to_string(image_id) + ": image must be 3 x H x W, got " +
                       shape_str(image.shape()));
    for (std::size_t i = 0; i < instances.size(); ++i) {
      const auto& g = instances[i];
      if (g.mask.height != height() || g.mask.width != width())
        throw InputError("scene " + std::to_string(image_id) + ": instance " + std::to_string(i) +
                         " mask size differs from the image");
      if (g.mask.empty())
        throw InputError("scene " + std::to_string(image_id) + ": instance " + std::to_string(i) + " is empty");
      if (g.category < 0 || g.category >= num_categories)
        throw InputError("scene " + std::to_string(image_id) + ": category " + std::to_string(g.category) +
                         " outside the configured set");
    }
  }
};

struct Dataset {
  std::vector<std::string> categories = default_categories();
  std::vector<SceneAnnotation> scenes;

  std::size_t size() const { return scenes.size(); }
  bool empty() const { return scenes.empty(); }
};

}  // namespace waveinst
