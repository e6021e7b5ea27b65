#include <doctest.h>

#include <random>

#include "anchornet/error.hpp"
#include "anchornet/kernels.hpp"
#include "anchornet/model.hpp"
#include "anchornet/rf.hpp"

using namespace anchornet;

namespace {

// Single-channel stack of positive-weight valid convs, optionally with a
// one-pixel zero pad before layer `pad_before`.
struct ConvStack {
  std::vector<RfLayer> layers;
  std::vector<Tensor<double>> weights;
  int pad_before = -1;

  ConvStack(std::vector<RfLayer> l, std::mt19937_64& rng) : layers(std::move(l)) {
    std::uniform_real_distribution<double> pos(0.5, 1.5);
    for (const RfLayer& layer : layers) {
      Tensor<double> w({1, 1, layer.kernel, layer.kernel});
      for (auto& v : w.data()) v = pos(rng);
      weights.push_back(std::move(w));
    }
  }

  Tensor<double> operator()(const Tensor<double>& x) const {
    Tensor<double> y = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (static_cast<int>(i) == pad_before) y = kernels::zero_pad(y, 1);
      ConvKernel<double> k{weights[i], {layers[i].stride, layers[i].stride}, 1};
      y = kernels::conv2d_valid(y, k);
    }
    return y;
  }
};

// Rows of the input that influence output (loc, 0), found by perturbing
// whole rows one at a time.
std::pair<int, int> influence_rows(const ConvStack& net, int h, int w, int loc) {
  Tensor<double> base({1, 1, h, w}, 0.25);
  const Tensor<double> ref = net(base);
  int lo = -1, hi = -1;
  for (int y = 0; y < h; ++y) {
    Tensor<double> probe = base;
    for (int x = 0; x < w; ++x) probe.at(0, 0, y, x) += 1.0;
    if (net(probe).at(0, 0, loc, 0) != ref.at(0, 0, loc, 0)) {
      if (lo < 0) lo = y;
      hi = y;
    }
  }
  return {lo, hi};
}

}  // namespace

TEST_CASE("push_layer reproduces the AnchorNet RF column") {
  RfState s = RfState::first(3, 2);
  CHECK(s.rf() == 3);
  CHECK(s.stride() == 2);
  s = s.push_layer(3, 2);
  CHECK(s.rf() == 7);
  CHECK(s.stride() == 4);
  s = s.push_layer(3, 2);
  CHECK(s.rf() == 15);
  CHECK(s.stride() == 8);
  const int expected[] = {31, 47, 63, 79, 95};
  for (int rf : expected) {
    s = s.push_layer(3, 1);
    CHECK(s.rf() == rf);
    CHECK(s.stride() == 8);
  }
  CHECK(s.layers().size() == 8);
}

TEST_CASE("1x1 stride-1 layers leave the state unchanged") {
  const RfState s = RfState::first(3, 2).push_layer(5, 2);
  const RfState t = s.push_layer(1, 1);
  CHECK(t.rf() == s.rf());
  CHECK(t.stride() == s.stride());
  CHECK(RfState().push_layer(1, 1).rf() == 1);
}

TEST_CASE("two 5x5 stride-1 layers see 9 pixels") {
  const RfState s = RfState::first(5, 1).push_layer(5, 1);
  CHECK(s.rf() == 9);
  CHECK(s.stride() == 1);
  CHECK(rf_of({{5, 1}, {5, 1}}) == s);
}

TEST_CASE("rf and stride never shrink") {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> kd(1, 7), sd(1, 3);
  for (int trial = 0; trial < 100; ++trial) {
    RfState s;
    for (int l = 0; l < 8; ++l) {
      const RfState next = s.push_layer(kd(rng), sd(rng));
      CHECK(next.rf() >= s.rf());
      CHECK(next.stride() >= s.stride());
      s = next;
    }
  }
}

TEST_CASE("num_locations") {
  const RfState big = rf_of({{200, 8}});
  CHECK(big.rf() == 200);
  CHECK(num_locations(big, {224, 224}) == GridLoc{4, 4});
  const RfState a = rf_of({{95, 8}});
  CHECK(num_locations(a, {224, 224}) == GridLoc{17, 17});
  CHECK(num_locations(a, {95, 95}) == GridLoc{1, 1});
  CHECK(num_locations(a, {103, 110}) == GridLoc{2, 2});
  CHECK_THROWS_AS(num_locations(a, {94, 224}), ConstraintError);
  CHECK_THROWS_AS(num_locations(a, {224, 60}), ConstraintError);
}

TEST_CASE("map_location") {
  const RfState a = rf_of({{95, 8}});
  CHECK(map_location(a, {0, 0}, {224, 224}) == PatchBox{0, 0, 95, 95});
  const PatchBox last = map_location(a, {16, 16}, {224, 224});
  CHECK(last == PatchBox{128, 128, 95, 95});
  CHECK(last.bottom() - 1 == 222);
  CHECK(last.bottom() <= 224);
  CHECK(map_location(a, {2, 5}, {224, 224}) == PatchBox{16, 40, 95, 95});
  CHECK_THROWS_AS(map_location(a, {17, 0}, {224, 224}), RangeError);
  CHECK_THROWS_AS(map_location(a, {0, -1}, {224, 224}), RangeError);
}

TEST_CASE("grid boxes step by the stride and stay in bounds") {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> kd(1, 5), sd(1, 3), extra(0, 40);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<RfLayer> layers;
    const int depth = 1 + trial % 6;
    for (int l = 0; l < depth; ++l) layers.push_back({kd(rng), sd(rng)});
    const RfState s = rf_of(layers);
    const ImageSize in{s.rf() + extra(rng), s.rf() + extra(rng)};
    const GridLoc g = num_locations(s, in);
    for (int i = 0; i < g.row; ++i) {
      for (int j = 0; j < g.col; ++j) {
        const PatchBox b = map_location(s, {i, j}, in);
        CHECK(b.height == s.rf());
        CHECK(b.bottom() <= in.height);
        CHECK(b.right() <= in.width);
        if (j + 1 < g.col) CHECK(map_location(s, {i, j + 1}, in).left - b.left == s.stride());
        if (i + 1 < g.row) CHECK(map_location(s, {i + 1, j}, in).top - b.top == s.stride());
      }
    }
    // One more row of locations would not fit.
    CHECK((g.row) * s.stride() + s.rf() > in.height);
  }
}

TEST_CASE("measured footprint of random stacks equals the recursion") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> depth(1, 6), kpick(0, 2), spick(1, 2);
  const int kernels_[] = {1, 3, 5};
  int checked = 0;
  while (checked < 25) {
    std::vector<RfLayer> layers;
    const int d = depth(rng);
    for (int l = 0; l < d; ++l) layers.push_back({kernels_[kpick(rng)], spick(rng)});
    const RfState s = rf_of(layers);
    if (s.rf() > 120) continue;
    ++checked;
    const ConvStack net(layers, rng);
    // Tall input so two output rows exist along one axis.
    const int h = s.rf() + s.stride(), w = s.rf();
    const auto [lo0, hi0] = influence_rows(net, h, w, 0);
    const auto [lo1, hi1] = influence_rows(net, h, w, 1);
    CHECK(lo0 == 0);
    CHECK(hi0 - lo0 + 1 == s.rf());
    CHECK(hi1 - lo1 + 1 == s.rf());
    CHECK(lo1 - lo0 == s.stride());
  }
}

TEST_CASE("sensitivity verifier") {
  std::mt19937_64 rng(6);
  SUBCASE("single 3x3 conv on 5x5") {
    const ConvStack net({{3, 1}}, rng);
    const RfState s = rf_of(net.layers);
    CHECK(s.rf() == 3);
    const auto r = verify_by_sensitivity(std::cref(net), s, {5, 5}, 1, 16);
    CHECK(r.exact);
    CHECK(r.probes > 0);
  }
  SUBCASE("mixed stride stack") {
    const ConvStack net({{3, 2}, {3, 1}, {5, 2}, {1, 1}}, rng);
    CHECK(verify_by_sensitivity(std::cref(net), rf_of(net.layers), {41, 37}, 1).exact);
  }
  SUBCASE("a padded layer breaks exactness") {
    ConvStack net({{3, 1}, {3, 1}, {3, 1}}, rng);
    net.pad_before = 1;
    const RfState s = rf_of(net.layers);
    // The padded stack emits a larger grid than predicted.
    const auto r = verify_by_sensitivity(std::cref(net), s, {13, 13}, 1);
    CHECK_FALSE(r.exact);
    CHECK_FALSE(r.detail.empty());
  }
  SUBCASE("pad that keeps the grid size still fails on the border") {
    ConvStack net({{3, 1}, {3, 1}}, rng);
    net.pad_before = 1;
    // Output grid of the padded stack on 12x12 is 10x10, i.e. that of a
    // single 3x3 conv.
    const auto r = verify_by_sensitivity(std::cref(net), rf_of({{3, 1}}), {12, 12}, 1);
    CHECK_FALSE(r.exact);
    REQUIRE(r.offending_pixel.has_value());
  }
}

TEST_CASE("AnchorNet extractor maps exactly on 224x224") {
  const AnchorNetModel<double> model = build_anchornet<double>(ArchSpec::anchornet(4), 3);
  const RfState s = model.rf_state();
  CHECK(s.rf() == 95);
  CHECK(s.stride() == 8);
  auto forward = [&](const Tensor<double>& x) { return model.net.features(x); };
  const auto r = verify_by_sensitivity(forward, s, {224, 224}, 3, 8);
  CHECK_MESSAGE(r.exact, r.detail);
}
