#include "anchornet/patch_selector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "anchornet/kernels.hpp"

namespace anchornet {

double Cam::mean() const {
  if (values.empty()) return 0.0;
  return std::accumulate(values.begin(), values.end(), 0.0) /
         static_cast<double>(values.size());
}

template <typename T>
Cam compute_cam(const Tensor<T>& features, const Tensor<T>& classifier_weights,
                int class_id) {
  const Shape fs = features.shape();
  const Shape ws = classifier_weights.shape();
  if (fs.n != 1) throw ShapeError("CAM expects a single feature map");
  if (ws.c * ws.h * ws.w != fs.c) {
    throw ShapeError("classifier width " + std::to_string(ws.c) +
                     " != feature channels " + std::to_string(fs.c));
  }
  if (class_id < 0 || class_id >= ws.n) {
    throw RangeError("class " + std::to_string(class_id) + " outside [0, " +
                     std::to_string(ws.n) + ")");
  }
  Cam cam;
  cam.rows = fs.h;
  cam.cols = fs.w;
  cam.class_id = class_id;
  cam.values.assign(fs.plane(), 0.0);
  const T* w = classifier_weights.raw() + static_cast<std::size_t>(class_id) * fs.c;
  for (int c = 0; c < fs.c; ++c) {
    const double wc = w[c];
    const T* f = features.plane(0, c);
    for (std::size_t i = 0; i < cam.values.size(); ++i) cam.values[i] += wc * f[i];
  }
  return cam;
}

template Cam compute_cam(const Tensor<float>&, const Tensor<float>&, int);
template Cam compute_cam(const Tensor<double>&, const Tensor<double>&, int);

void SelectionConfig::validate() const {
  if (!(iou_threshold >= 0.0 && iou_threshold <= 1.0)) {
    throw RangeError("IoU threshold must lie in [0, 1]");
  }
  if (max_patches < 1) throw RangeError("max_patches must be >= 1");
}

double iou(const PatchBox& a, const PatchBox& b) {
  const long long ih = std::max(0, std::min(a.bottom(), b.bottom()) - std::max(a.top, b.top));
  const long long iw = std::max(0, std::min(a.right(), b.right()) - std::max(a.left, b.left));
  const long long inter = ih * iw;
  const long long uni = a.area() + b.area() - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

std::vector<SelectedPatch> select_patches(const Cam& cam, const RfState& rf,
                                          ImageSize input,
                                          const SelectionConfig& cfg) {
  cfg.validate();
  if (cam.rows < 1 || cam.cols < 1 || cam.values.empty()) {
    throw ShapeError("empty CAM");
  }
  const GridLoc grid = num_locations(rf, input);
  if (grid.row != cam.rows || grid.col != cam.cols ||
      cam.values.size() != static_cast<std::size_t>(cam.rows) * cam.cols) {
    throw ShapeError("CAM shape does not match the receptive-field grid");
  }
  for (double v : cam.values) {
    if (!std::isfinite(v)) throw RangeError("CAM contains non-finite values");
  }

  std::vector<int> order(cam.values.size());
  std::iota(order.begin(), order.end(), 0);
  // Stable sort keeps row-major order among equal activations.
  std::stable_sort(order.begin(), order.end(), [&cam](int a, int b) {
    return cam.values[a] > cam.values[b];
  });

  std::vector<SelectedPatch> kept;
  for (int idx : order) {
    if (static_cast<int>(kept.size()) >= cfg.max_patches) break;
    const GridLoc loc{idx / cam.cols, idx % cam.cols};
    const PatchBox box = map_location(rf, loc, input);
    const bool separated = std::all_of(kept.begin(), kept.end(), [&](const SelectedPatch& k) {
      return iou(box, k.box) < cfg.iou_threshold;
    });
    if (separated) kept.push_back({loc, box, cam.values[idx]});
  }
  return kept;
}

template <typename T>
Tensor<T> extract_patch(const Tensor<T>& image, const PatchBox& box) {
  if (image.shape().n != 1) throw ShapeError("extract_patch expects a single image");
  return kernels::crop(image, box.top, box.left, box.height, box.width);
}

template Tensor<float> extract_patch(const Tensor<float>&, const PatchBox&);
template Tensor<double> extract_patch(const Tensor<double>&, const PatchBox&);

}  // namespace anchornet
