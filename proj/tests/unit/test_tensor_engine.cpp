#include <doctest.h>

#include <cmath>
#include <numeric>

#include "anchornet/autograd.hpp"
#include "anchornet/error.hpp"
#include "anchornet/kernels.hpp"
#include "anchornet/reference.hpp"
#include "test_util.hpp"

using namespace anchornet;
using testutil::random_tensor;
using testutil::rel_error;

namespace {

Tensor<double> iota_tensor(Shape s, double start = 1.0) {
  Tensor<double> t(s);
  std::iota(t.data().begin(), t.data().end(), start);
  return t;
}

// Naive six-loop convolution written out independently of both kernels.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, int sh, int sw,
                          int groups) {
  const Shape is = x.shape(), ws = w.shape();
  const int oh = (is.h - ws.h) / sh + 1, ow = (is.w - ws.w) / sw + 1;
  Tensor<double> out({is.n, ws.n, oh, ow});
  const int icpg = is.c / groups, ocpg = ws.n / groups;
  for (int n = 0; n < is.n; ++n)
    for (int o = 0; o < ws.n; ++o)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          double acc = 0;
          for (int c = 0; c < icpg; ++c)
            for (int r = 0; r < ws.h; ++r)
              for (int s = 0; s < ws.w; ++s)
                acc += w.at(o, c, r, s) * x.at(n, (o / ocpg) * icpg + c, i * sh + r, j * sw + s);
          out.at(n, o, i, j) = acc;
        }
  return out;
}

}  // namespace

TEST_SUITE("conv2d_valid") {
  TEST_CASE("2x2 ones kernel stride 2 sums each window") {
    const auto x = iota_tensor({1, 1, 4, 4});
    ConvKernel<double> k{Tensor<double>({1, 1, 2, 2}, 1.0), {2, 2}, 1};
    const auto y = kernels::conv2d_valid(x, k);
    REQUIRE(y.shape() == Shape{1, 1, 2, 2});
    CHECK(y.at(0, 0, 0, 0) == 14);
    CHECK(y.at(0, 0, 0, 1) == 22);
    CHECK(y.at(0, 0, 1, 0) == 46);
    CHECK(y.at(0, 0, 1, 1) == 54);
  }

  TEST_CASE("unit 1x1 kernel is the identity") {
    const Tensor<double> x({1, 1, 5, 5}, 1.0);
    ConvKernel<double> k{Tensor<double>({1, 1, 1, 1}, 1.0), {1, 1}, 1};
    const auto y = kernels::conv2d_valid(x, k);
    CHECK(y.shape() == x.shape());
    CHECK(testutil::max_abs_diff(x, y) == 0.0);
  }

  TEST_CASE("3x3 stride 2 on 224 gives 111") {
    const Tensor<float> x({1, 3, 224, 224});
    ConvKernel<float> k{Tensor<float>({16, 3, 3, 3}), {2, 2}, 1};
    CHECK(kernels::conv2d_valid(x, k).shape() == Shape{1, 16, 111, 111});
  }

  TEST_CASE("output size follows floor((in - k) / s) + 1") {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> kd(1, 5), sd(1, 3), extra(0, 9);
    for (int trial = 0; trial < 200; ++trial) {
      const int kh = kd(rng), kw = kd(rng), sh = sd(rng), sw = sd(rng);
      const int h = kh + extra(rng), w = kw + extra(rng);
      const Shape os = kernels::conv_output_shape({2, 3, h, w}, {4, 3, kh, kw}, {sh, sw}, 1);
      CHECK(os.h == (h - kh) / sh + 1);
      CHECK(os.w == (w - kw) / sw + 1);
      ConvKernel<float> k{Tensor<float>({4, 3, kh, kw}), {sh, sw}, 1};
      CHECK(kernels::conv2d_valid(Tensor<float>({2, 3, h, w}), k).shape() == os);
    }
  }

  TEST_CASE("kernel larger than input is rejected") {
    CHECK_THROWS_AS(kernels::conv_output_shape({1, 1, 2, 5}, {1, 1, 3, 3}, {1, 1}, 1),
                    ShapeError);
    CHECK_THROWS_AS(kernels::conv_output_shape({1, 4, 8, 8}, {4, 2, 3, 3}, {1, 1}, 3),
                    ShapeError);
  }

  TEST_CASE("pixels outside a window never reach its output") {
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<int> kd(1, 4), sd(1, 3);
    for (int trial = 0; trial < 30; ++trial) {
      const int kh = kd(rng), kw = kd(rng), sh = sd(rng), sw = sd(rng);
      const auto x = random_tensor({1, 2, 11, 12}, rng);
      ConvKernel<double> k{random_tensor({3, 2, kh, kw}, rng), {sh, sw}, 1};
      const auto base = kernels::conv2d_valid(x, k);
      std::uniform_int_distribution<int> yd(0, 10), xd(0, 11);
      const int py = yd(rng), px = xd(rng);
      auto probe = x;
      probe.at(0, 0, py, px) = 0.0;
      probe.at(0, 1, py, px) = 0.0;
      const auto y = kernels::conv2d_valid(probe, k);
      const Shape os = y.shape();
      for (int i = 0; i < os.h; ++i) {
        for (int j = 0; j < os.w; ++j) {
          const bool inside = py >= i * sh && py < i * sh + kh && px >= j * sw && px < j * sw + kw;
          if (inside) continue;
          for (int c = 0; c < os.c; ++c) CHECK(y.at(0, c, i, j) == base.at(0, c, i, j));
        }
      }
    }
  }

  TEST_CASE("dense, strided and grouped convs match naive loops and the serial reference") {
    std::mt19937_64 rng(5);
    struct Case { int c, o, k, s, g, h; };
    for (const Case cs : {Case{3, 8, 3, 2, 1, 15}, Case{4, 4, 3, 1, 4, 9}, Case{6, 9, 1, 1, 1, 7},
                          Case{6, 6, 3, 2, 3, 13}, Case{5, 7, 1, 2, 1, 10}, Case{2, 3, 5, 1, 1, 9}}) {
      const auto x = random_tensor({2, cs.c, cs.h, cs.h + 1}, rng);
      const auto w = random_tensor({cs.o, cs.c / cs.g, cs.k, cs.k}, rng);
      ConvKernel<double> k{w, {cs.s, cs.s}, cs.g};
      const auto fast = kernels::conv2d_valid(x, k);
      const auto slow = naive_conv(x, w, cs.s, cs.s, cs.g);
      CHECK(testutil::max_abs_diff(fast, slow) < 1e-10);
      CHECK(testutil::max_abs_diff(fast, reference::conv2d_valid(x, k)) < 1e-10);
    }
  }
}

TEST_SUITE("pooling, linear, softmax") {
  TEST_CASE("gap averages each plane") {
    const Tensor<double> x({1, 1, 2, 2}, std::vector<double>{1, 3, 5, 7});
    CHECK(kernels::gap(x)[0] == doctest::Approx(4.0));
    const Tensor<double> c({2, 3, 4, 5}, 2.5);
    const auto gc = kernels::gap(c);
    for (double v : gc.data()) CHECK(v == doctest::Approx(2.5));
    Tensor<double> two({1, 2, 17, 17});
    for (int i = 0; i < 17 * 17; ++i) {
      two[i] = 2.0;
      two[17 * 17 + i] = -2.0;
    }
    const auto g = kernels::gap(two);
    CHECK(g[0] == doctest::Approx(2.0));
    CHECK(g[1] == doctest::Approx(-2.0));
  }

  TEST_CASE("gap gradient is 1 / (H W) per pixel") {
    const auto g = kernels::gap_backward<double>({1, 1, 4, 5}, Tensor<double>({1, 1, 1, 1}, 1.0));
    for (double v : g.data()) CHECK(v == doctest::Approx(1.0 / 20));
  }

  TEST_CASE("linear layer") {
    const Tensor<double> f({1, 2, 1, 1}, std::vector<double>{1, 2});
    const Tensor<double> w({2, 2, 1, 1}, std::vector<double>{1, 1, 1, -1});
    const auto y = kernels::linear<double>(f, w, nullptr);
    CHECK(y[0] == doctest::Approx(3));
    CHECK(y[1] == doctest::Approx(-1));

    const Tensor<double> eye({2, 2, 1, 1}, std::vector<double>{1, 0, 0, 1});
    const Tensor<double> zero_bias({2, 1, 1, 1});
    const auto id = kernels::linear(f, eye, &zero_bias);
    CHECK(id[0] == 1);
    CHECK(id[1] == 2);

    const Tensor<double> bias({2, 1, 1, 1}, std::vector<double>{0.5, -4});
    const auto b = kernels::linear(Tensor<double>({1, 2, 1, 1}), w, &bias);
    CHECK(b[0] == 0.5);
    CHECK(b[1] == -4);
  }

  TEST_CASE("softmax values") {
    const std::vector<double> zeros{0, 0};
    auto p = kernels::softmax<double>(zeros);
    CHECK(p[0] == doctest::Approx(0.5));
    const std::vector<double> big{1000, 1000};
    p = kernels::softmax<double>(big);
    CHECK(std::isfinite(p[0]));
    CHECK(p[0] == doctest::Approx(0.5));
    const std::vector<double> l3{std::log(3.0), 0.0};
    p = kernels::softmax<double>(l3);
    CHECK(p[0] == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(p[1] == doctest::Approx(0.25).epsilon(1e-12));
  }

  TEST_CASE("softmax sums to one and ignores a common shift") {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> nd(0.0, 5.0);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<double> z(7);
      for (auto& v : z) v = nd(rng);
      const auto p = kernels::softmax<double>(z);
      CHECK(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-6));
      const double shift = nd(rng) * 100;
      for (auto& v : z) v += shift;
      const auto q = kernels::softmax<double>(z);
      for (std::size_t i = 0; i < p.size(); ++i) CHECK(std::abs(p[i] - q[i]) < 1e-6);
    }
  }
}

TEST_SUITE("pointwise and normalization") {
  TEST_CASE("silu at zero") {
    const Tensor<double> x({1, 1, 1, 1}, 0.0);
    CHECK(kernels::silu(x)[0] == 0.0);
    const auto g = kernels::silu_backward(x, Tensor<double>({1, 1, 1, 1}, 1.0));
    CHECK(g[0] == doctest::Approx(0.5));
  }

  TEST_CASE("resizing a constant image stays constant") {
    const Tensor<double> x({1, 3, 224, 224}, 0.37);
    const auto y = kernels::resize_bilinear(x, 95, 95);
    CHECK(y.shape() == Shape{1, 3, 95, 95});
    for (double v : y.data()) CHECK(v == doctest::Approx(0.37));
  }

  TEST_CASE("resize matches the per-pixel reference formula") {
    std::mt19937_64 rng(8);
    const auto x = random_tensor({2, 2, 23, 17}, rng);
    for (auto [h, w] : {std::pair{9, 11}, std::pair{40, 5}, std::pair{23, 17}}) {
      CHECK(testutil::max_abs_diff(kernels::resize_bilinear(x, h, w),
                                   reference::resize_bilinear(x, h, w)) < 1e-12);
    }
  }

  TEST_CASE("training batchnorm standardizes each channel") {
    std::mt19937_64 rng(9);
    auto x = random_tensor({4, 3, 5, 6}, rng, 3.0);
    for (auto& v : x.data()) v += 7.0;
    const std::vector<double> gamma(3, 1.0), beta(3, 0.0);
    BatchNormParams<double> p{gamma, beta, {}, {}};
    p.eps = 0.0;
    const auto y = kernels::batchnorm(x, p, NormMode::kTrain);
    for (int c = 0; c < 3; ++c) {
      double sum = 0, sq = 0;
      for (int n = 0; n < 4; ++n)
        for (int i = 0; i < 30; ++i) sum += y.plane(n, c)[i];
      const double mean = sum / 120;
      for (int n = 0; n < 4; ++n)
        for (int i = 0; i < 30; ++i) sq += std::pow(y.plane(n, c)[i] - mean, 2);
      CHECK(std::abs(mean) < 1e-5);
      CHECK(std::abs(sq / 120 - 1.0) < 1e-5);
    }
    CHECK(testutil::max_abs_diff(y, reference::batchnorm_train<double>(x, gamma, beta, 0.0)) <
          1e-10);
  }

  TEST_CASE("inference batchnorm needs running statistics") {
    const std::vector<double> gamma(2, 1.0), beta(2, 0.0);
    BatchNormParams<double> p{gamma, beta, {}, {}};
    CHECK_THROWS_AS(kernels::batchnorm(Tensor<double>({1, 2, 3, 3}), p, NormMode::kInfer),
                    StateError);
  }

  TEST_CASE("running statistics move toward the batch statistics") {
    std::mt19937_64 rng(10);
    auto x = random_tensor({8, 1, 4, 4}, rng);
    for (auto& v : x.data()) v = 2.0 * v + 5.0;
    const std::vector<double> gamma(1, 1.0), beta(1, 0.0);
    std::vector<double> rm(1, 0.0), rv(1, 1.0);
    BatchNormParams<double> p{gamma, beta, rm, rv};
    kernels::batchnorm(x, p, NormMode::kTrain);
    const double mean = std::accumulate(x.data().begin(), x.data().end(), 0.0) / x.size();
    CHECK(rm[0] == doctest::Approx(0.1 * mean));
    CHECK(rv[0] > 1.0);
  }
}

TEST_SUITE("gradients against central differences") {
  // Checks d/dx of sum(r * op(x)) for a random cotangent r.
  void check_input_grad(const std::function<Var(Tape<double>&, Var)>& op,
                        const Tensor<double>& x, double tol = 1e-4) {
    std::mt19937_64 rng(123);
    Tensor<double> r;
    Tensor<double> analytic;
    {
      Tape<double> tape;
      Tensor<double> xin = x;
      xin.set_requires_grad(true);
      const Var vx = tape.input(xin);
      const Var y = op(tape, vx);
      r = random_tensor(tape.value(y).shape(), rng);
      tape.backward(y, r);
      analytic = tape.grad(vx);
    }
    auto f = [&](const Tensor<double>& probe) {
      Tape<double> tape(false);
      const Var y = op(tape, tape.input(probe));
      return testutil::dot(tape.value(y), r);
    };
    const auto numeric = testutil::numeric_grad(f, x);
    CHECK(rel_error(analytic, numeric) < tol);
  }

  // Same for a parameter bound through Tape::param.
  void check_param_grad(const std::function<Var(Tape<double>&, Var, Var)>& op,
                        const Tensor<double>& x, Parameter<double>& p, double tol = 1e-4) {
    std::mt19937_64 rng(321);
    Tensor<double> r;
    p.zero_grad();
    {
      Tape<double> tape;
      const Var y = op(tape, tape.input(x), tape.param(p));
      r = random_tensor(tape.value(y).shape(), rng);
      tape.backward(y, r);
    }
    auto f = [&](const Tensor<double>& w) {
      Parameter<double> q("probe", w);
      Tape<double> tape(false);
      const Var y = op(tape, tape.input(x), tape.param(q));
      return testutil::dot(tape.value(y), r);
    };
    CHECK(rel_error(p.grad, testutil::numeric_grad(f, p.value)) < tol);
  }

  TEST_CASE("conv2d input and weights") {
    std::mt19937_64 rng(1);
    const auto x = random_tensor({1, 2, 8, 8}, rng);
    for (const auto [k, s, g] : {std::tuple{3, 1, 1}, std::tuple{3, 2, 1}, std::tuple{1, 1, 1},
                                 std::tuple{3, 2, 2}, std::tuple{2, 3, 1}}) {
      Parameter<double> w("w", random_tensor({4, 2 / g, k, k}, rng));
      const Tensor<double> wv = w.value;
      check_input_grad(
          [&](Tape<double>& t, Var v) { return t.conv2d(v, t.input(wv), {s, s}, g); }, x);
      check_param_grad(
          [&](Tape<double>& t, Var v, Var pw) { return t.conv2d(v, pw, {s, s}, g); }, x, w);
    }
  }

  TEST_CASE("batchnorm input, scale and shift in training mode") {
    std::mt19937_64 rng(2);
    const auto x = random_tensor({3, 2, 4, 4}, rng);
    Parameter<double> gamma("g", random_tensor({2, 1, 1, 1}, rng));
    Parameter<double> beta("b", random_tensor({2, 1, 1, 1}, rng));
    const Tensor<double> gv = gamma.value, bv = beta.value;
    check_input_grad(
        [&](Tape<double>& t, Var v) {
          return t.batchnorm(v, t.input(gv), t.input(bv), {}, {}, NormMode::kTrain);
        },
        x);
    check_param_grad(
        [&](Tape<double>& t, Var v, Var pg) {
          return t.batchnorm(v, pg, t.input(bv), {}, {}, NormMode::kTrain);
        },
        x, gamma);
    check_param_grad(
        [&](Tape<double>& t, Var v, Var pb) {
          return t.batchnorm(v, t.input(gv), pb, {}, {}, NormMode::kTrain);
        },
        x, beta);
  }

  TEST_CASE("batchnorm in inference mode") {
    std::mt19937_64 rng(3);
    const auto x = random_tensor({2, 2, 3, 3}, rng);
    const Tensor<double> gv({2, 1, 1, 1}, std::vector<double>{1.5, -0.5});
    const Tensor<double> bv({2, 1, 1, 1}, std::vector<double>{0.2, 0.1});
    std::vector<double> rm{0.3, -0.2}, rv{2.0, 0.5};
    check_input_grad(
        [&](Tape<double>& t, Var v) {
          return t.batchnorm(v, t.input(gv), t.input(bv), rm, rv, NormMode::kInfer);
        },
        x);
  }

  TEST_CASE("silu, gap, add, crop, pad, resize") {
    std::mt19937_64 rng(4);
    const auto x = random_tensor({2, 2, 7, 6}, rng);
    check_input_grad([](Tape<double>& t, Var v) { return t.silu(v); }, x);
    check_input_grad([](Tape<double>& t, Var v) { return t.gap(v); }, x);
    const auto other = random_tensor(x.shape(), rng);
    check_input_grad([&](Tape<double>& t, Var v) { return t.add(v, t.input(other)); }, x);
    check_input_grad([](Tape<double>& t, Var v) { return t.add(v, v); }, x);
    check_input_grad([](Tape<double>& t, Var v) { return t.center_crop(v, 2); }, x);
    check_input_grad([](Tape<double>& t, Var v) { return t.zero_pad(v, 1); }, x);
    check_input_grad([](Tape<double>& t, Var v) { return t.resize_bilinear(v, 4, 9); }, x);
    check_input_grad([](Tape<double>& t, Var v) { return t.resize_bilinear(v, 11, 3); }, x);
  }

  TEST_CASE("linear features, weights and bias") {
    std::mt19937_64 rng(5);
    const auto f = random_tensor({3, 4, 1, 1}, rng);
    Parameter<double> w("w", random_tensor({5, 4, 1, 1}, rng));
    Parameter<double> b("b", random_tensor({5, 1, 1, 1}, rng));
    const Tensor<double> wv = w.value, bv = b.value;
    check_input_grad([&](Tape<double>& t, Var v) { return t.linear(v, t.input(wv), t.input(bv)); },
                     f);
    check_param_grad([&](Tape<double>& t, Var v, Var pw) { return t.linear(v, pw, t.input(bv)); },
                     f, w);
    check_param_grad([&](Tape<double>& t, Var v, Var pb) { return t.linear(v, t.input(wv), pb); },
                     f, b);
  }

  TEST_CASE("weighted softmax cross entropy") {
    std::mt19937_64 rng(6);
    const auto z = random_tensor({3, 4, 1, 1}, rng, 2.0);
    const std::vector<int> labels{0, 3, 1};
    const std::vector<double> weights{0.5, 0.25, 1.0};
    check_input_grad(
        [&](Tape<double>& t, Var v) { return t.softmax_cross_entropy(v, labels, weights); }, z);
  }

  TEST_CASE("composite graph with reuse") {
    std::mt19937_64 rng(7);
    const auto x = random_tensor({2, 3, 9, 9}, rng);
    const auto w1 = random_tensor({3, 3, 3, 3}, rng, 0.3);
    const auto w2 = random_tensor({3, 1, 3, 3}, rng, 0.3);
    check_input_grad(
        [&](Tape<double>& t, Var v) {
          const Var a = t.silu(t.conv2d(v, t.input(w1), {1, 1}));
          const Var b = t.conv2d(a, t.input(w2), {1, 1}, 3);
          return t.gap(t.add(b, t.center_crop(a, 1)));
        },
        x);
  }
}

TEST_SUITE("tape bookkeeping") {
  TEST_CASE("backward twice and non-recording tapes are errors") {
    Tape<double> tape;
    Tensor<double> x({1, 1, 2, 2}, 1.0);
    x.set_requires_grad(true);
    const Var v = tape.input(x);
    const Var y = tape.gap(v);
    tape.backward(y);
    CHECK_THROWS_AS(tape.backward(y), StateError);

    Tape<double> off(false);
    const Var z = off.gap(off.input(x));
    CHECK_THROWS_AS(off.backward(z), StateError);
  }

  TEST_CASE("parameter gradients accumulate across tapes") {
    Parameter<double> w("w", Tensor<double>({1, 1, 1, 1}, 2.0));
    const Tensor<double> x({1, 1, 1, 1}, 3.0);
    for (int i = 0; i < 2; ++i) {
      Tape<double> tape;
      tape.backward(tape.conv2d(tape.input(x), tape.param(w), {1, 1}));
    }
    CHECK(w.grad[0] == doctest::Approx(6.0));
  }
}
