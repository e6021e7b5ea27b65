#pragma once

#include <vector>

#include "anchornet/tensor.hpp"

namespace anchornet {

/// Class activation map for one class over the high-level grid.
struct Cam {
  int rows = 0;
  int cols = 0;
  std::vector<double> values;  // row-major
  int class_id = 0;

  double at(int r, int c) const {
    return values[static_cast<std::size_t>(r) * cols + c];
  }
  double mean() const;
};

/// M_n = sum_c w[n, c] * F_c for features (1, C, H, W) and classifier
/// weights (N, C, 1, 1). With a bias-free classifier the class-n logit of
/// GAP-then-linear equals the spatial mean of M_n.
template <typename T>
Cam compute_cam(const Tensor<T>& features, const Tensor<T>& classifier_weights,
                int class_id);

}  // namespace anchornet
