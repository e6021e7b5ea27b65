#pragma once

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "anchornet/tensor.hpp"

namespace anchornet {

struct ImageSize {
  int height = 0;
  int width = 0;
  bool operator==(const ImageSize&) const = default;
};

struct GridLoc {
  int row = 0;
  int col = 0;
  bool operator==(const GridLoc&) const = default;
};

/// Integer rectangle in input-image pixels, top-left origin.
struct PatchBox {
  int top = 0;
  int left = 0;
  int height = 1;
  int width = 1;

  int bottom() const { return top + height; }  // exclusive
  int right() const { return left + width; }   // exclusive
  long long area() const { return static_cast<long long>(height) * width; }
  bool contains(int y, int x) const {
    return y >= top && y < bottom() && x >= left && x < right();
  }
  bool operator==(const PatchBox&) const = default;
};

/// One (kernel, stride) entry of a layer stack. Kernels are square.
struct RfLayer {
  int kernel = 1;
  int stride = 1;
  bool operator==(const RfLayer&) const = default;
};

/// Accumulated receptive field K_l and stride S_l of a padding-free stack:
///   K_l = K_{l-1} + (k_l - 1) * S_{l-1},  S_l = S_{l-1} * s_l,
/// with K_1 = k_1 and S_1 = s_1. The state is input-size agnostic; the
/// K_l <= min(H, W) side condition is checked by the size-aware queries.
class RfState {
 public:
  /// Empty stack: the identity (rf 1, stride 1).
  RfState() = default;
  static RfState first(int kernel, int stride);

  RfState push_layer(int kernel, int stride) const;

  int rf() const { return rf_; }
  int stride() const { return stride_; }
  const std::vector<RfLayer>& layers() const { return layers_; }

  bool operator==(const RfState&) const = default;

 private:
  int rf_ = 1;
  int stride_ = 1;
  std::vector<RfLayer> layers_;
};

/// Builds the state of a whole stack by successive push_layer calls.
RfState rf_of(const std::vector<RfLayer>& layers);

/// Rows x cols of the high-level grid: floor((H - K) / S) + 1 per axis.
/// Throws ConstraintError when the input is smaller than the receptive field.
GridLoc num_locations(const RfState& state, ImageSize input);

/// Input patch seen by grid location `loc`. Throws RangeError outside the grid.
PatchBox map_location(const RfState& state, GridLoc loc, ImageSize input);

/// Outcome of a sensitivity probe run.
struct SensitivityReport {
  bool exact = true;
  int probes = 0;
  /// First input pixel whose influence disagreed with map_location.
  std::optional<std::pair<int, int>> offending_pixel;
  std::optional<GridLoc> offending_location;
  std::string detail;
};

/// Forward function of a padding-free network: 1xCxHxW -> 1xC'xH'xW'.
using ProbeForward = std::function<Tensor<double>(const Tensor<double>&)>;

/// Empirically checks exact patch mapping. Each probe perturbs one input
/// pixel (all channels) and compares the set of grid locations whose output
/// changed with the set whose mapped PatchBox contains that pixel. Probes
/// cover every box edge row/column plus `random_probes` random pixels.
SensitivityReport verify_by_sensitivity(const ProbeForward& forward,
                                        const RfState& state, ImageSize input,
                                        int channels, int random_probes = 32,
                                        unsigned long long seed = 1);

}  // namespace anchornet
