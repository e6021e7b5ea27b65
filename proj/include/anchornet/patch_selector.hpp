#pragma once

#include <vector>

#include "anchornet/cam.hpp"
#include "anchornet/rf.hpp"

namespace anchornet {

struct SelectionConfig {
  /// A patch is kept only if its IoU with every kept patch is strictly below this.
  double iou_threshold = 0.3;
  /// Localized patches per image (sequence length minus the resized image).
  int max_patches = 4;

  void validate() const;
};

struct SelectedPatch {
  GridLoc loc;
  PatchBox box;
  double activation = 0.0;
};

/// |A intersect B| / |A union B| in pixels.
double iou(const PatchBox& a, const PatchBox& b);

/// Greedy NMS-style scan of the CAM: visit locations by descending
/// activation (ties in row-major order), keep a location's patch when its
/// IoU with every kept patch is below the threshold, stop at max_patches.
std::vector<SelectedPatch> select_patches(const Cam& cam, const RfState& rf,
                                          ImageSize input,
                                          const SelectionConfig& cfg);

/// Exact pixel crop of `box` from a 1xCxHxW image.
template <typename T>
Tensor<T> extract_patch(const Tensor<T>& image, const PatchBox& box);

}  // namespace anchornet
