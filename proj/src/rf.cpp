#include "anchornet/rf.hpp"

#include <algorithm>
#include <random>
#include <set>
#include <sstream>

namespace anchornet {

RfState RfState::first(int kernel, int stride) {
  return RfState{}.push_layer(kernel, stride);
}

RfState RfState::push_layer(int kernel, int stride) const {
  if (kernel < 1 || stride < 1) {
    throw RangeError("kernel and stride must be >= 1");
  }
  RfState next = *this;
  next.rf_ = rf_ + (kernel - 1) * stride_;
  next.stride_ = stride_ * stride;
  next.layers_.push_back({kernel, stride});
  return next;
}

RfState rf_of(const std::vector<RfLayer>& layers) {
  RfState state;
  for (const auto& l : layers) state = state.push_layer(l.kernel, l.stride);
  return state;
}

GridLoc num_locations(const RfState& state, ImageSize input) {
  if (input.height < state.rf() || input.width < state.rf()) {
    std::ostringstream os;
    os << "receptive field " << state.rf() << " exceeds input " << input.height
       << "x" << input.width;
    throw ConstraintError(os.str());
  }
  return {(input.height - state.rf()) / state.stride() + 1,
          (input.width - state.rf()) / state.stride() + 1};
}

PatchBox map_location(const RfState& state, GridLoc loc, ImageSize input) {
  const GridLoc grid = num_locations(state, input);
  if (loc.row < 0 || loc.col < 0 || loc.row >= grid.row || loc.col >= grid.col) {
    std::ostringstream os;
    os << "location (" << loc.row << "," << loc.col << ") outside "
       << grid.row << "x" << grid.col << " grid";
    throw RangeError(os.str());
  }
  return {loc.row * state.stride(), loc.col * state.stride(), state.rf(),
          state.rf()};
}

SensitivityReport verify_by_sensitivity(const ProbeForward& forward,
                                        const RfState& state, ImageSize input,
                                        int channels, int random_probes,
                                        unsigned long long seed) {
  SensitivityReport report;
  const GridLoc grid = num_locations(state, input);

  // Deterministic, non-constant base image so no activation sits at an
  // exact symmetry point.
  Tensor<double> base({1, channels, input.height, input.width});
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (auto& v : base.data()) v = unit(rng);
  const Tensor<double> reference = forward(base);
  const Shape os = reference.shape();
  if (os.h != grid.row || os.w != grid.col) {
    std::ostringstream msg;
    msg << "network output grid " << os.h << "x" << os.w
        << " differs from predicted " << grid.row << "x" << grid.col;
    report.exact = false;
    report.detail = msg.str();
    return report;
  }

  // Rows/columns where box membership flips, plus the image border.
  std::set<int> rows{0, input.height - 1}, cols{0, input.width - 1};
  for (int i = 0; i < grid.row; ++i) {
    const int top = i * state.stride();
    for (int d : {top - 1, top, top + state.rf() - 1, top + state.rf()}) {
      if (d >= 0 && d < input.height) rows.insert(d);
    }
  }
  for (int j = 0; j < grid.col; ++j) {
    const int left = j * state.stride();
    for (int d : {left - 1, left, left + state.rf() - 1, left + state.rf()}) {
      if (d >= 0 && d < input.width) cols.insert(d);
    }
  }
  std::vector<std::pair<int, int>> pixels;
  // Pair edge rows with edge columns along a diagonal sweep to keep the
  // probe count linear in the number of distinct edges.
  const std::vector<int> rv(rows.begin(), rows.end());
  const std::vector<int> cv(cols.begin(), cols.end());
  const std::size_t sweep = std::max(rv.size(), cv.size());
  for (std::size_t k = 0; k < sweep; ++k) {
    pixels.emplace_back(rv[k % rv.size()], cv[k % cv.size()]);
    pixels.emplace_back(rv[k % rv.size()], cv[(k * 7 + 3) % cv.size()]);
  }
  std::uniform_int_distribution<int> ry(0, input.height - 1), rx(0, input.width - 1);
  for (int k = 0; k < random_probes; ++k) pixels.emplace_back(ry(rng), rx(rng));

  for (const auto& [py, px] : pixels) {
    Tensor<double> probe = base;
    for (int c = 0; c < channels; ++c) probe.at(0, c, py, px) += 1.0;
    const Tensor<double> out = forward(probe);
    ++report.probes;
    for (int i = 0; i < grid.row; ++i) {
      for (int j = 0; j < grid.col; ++j) {
        bool changed = false;
        for (int c = 0; c < os.c && !changed; ++c) {
          changed = out.at(0, c, i, j) != reference.at(0, c, i, j);
        }
        const bool inside = map_location(state, {i, j}, input).contains(py, px);
        if (changed != inside) {
          std::ostringstream msg;
          msg << "pixel (" << py << "," << px << ") "
              << (inside ? "inside" : "outside") << " the box of location ("
              << i << "," << j << ") " << (changed ? "changed" : "did not change")
              << " its output";
          report.exact = false;
          report.offending_pixel = std::make_pair(py, px);
          report.offending_location = GridLoc{i, j};
          report.detail = msg.str();
          return report;
        }
      }
    }
  }
  return report;
}

}  // namespace anchornet
