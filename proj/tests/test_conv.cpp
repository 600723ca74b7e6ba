#include <cmath>
#include <vector>

#include "doctest.h"
#include "stconv/conv.hpp"
#include "stconv/flops.hpp"
#include "stconv/reference.hpp"
#include "stconv/rng.hpp"

using namespace stconv;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape5 s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor<T> x(s);
  Rng rng(seed);
  for (auto& v : x.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return x;
}

template <typename T>
double max_rel_diff(const Tensor<T>& a, const Tensor<T>& b) {
  REQUIRE(a.shape() == b.shape());
  double scale = 0.0, diff = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    scale = std::max(scale, std::abs(static_cast<double>(b[i])));
    diff = std::max(diff, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return diff / std::max(scale, 1e-30);
}

const std::span<const double> kNoBias{};

}  // namespace

TEST_CASE("identity kernel returns the input") {
  auto x = random_tensor<double>(Shape5{2, 1, 3, 4, 5}, 1);
  Tensor<double> w = Tensor<double>::full(Shape5{1, 1, 1, 1, 1}, 1.0);
  const std::vector<double> b{0.0};
  CHECK(conv3d_forward<double>(x, w, b, ConvSpec::same(1, 1, {1, 1, 1})) == x);
}

TEST_CASE("hand cross-correlation, no flip") {
  Tensor<double> x(Shape5{1, 1, 1, 1, 3}, {1, 2, 3});
  Tensor<double> w(Shape5{1, 1, 1, 1, 3}, {1, 0, -1});
  ConvSpec spec;
  spec.kernel = {1, 1, 3};
  auto y = conv3d_forward<double>(x, w, kNoBias, spec);
  REQUIRE(y.shape() == Shape5{1, 1, 1, 1, 1});
  CHECK(y[0] == -2.0);
}

TEST_CASE("output extent formula and spec errors") {
  ConvSpec spec;
  spec.c_in = 2;
  spec.c_out = 3;
  spec.kernel = {3, 3, 3};
  spec.dilation = {1, 2, 1};
  spec.stride = {1, 2, 3};
  spec.padding = {0, 1, 2};
  const Shape5 in{1, 2, 5, 9, 11};
  // floor((in + 2p - d(k-1) - 1)/s) + 1
  CHECK(spec.output_shape(in) == Shape5{1, 3, 3, 4, 5});
  CHECK_THROWS_AS(spec.output_shape(Shape5{1, 3, 5, 9, 11}), ShapeError);
  CHECK_THROWS_AS(spec.output_shape(Shape5{1, 2, 2, 9, 11}), ShapeError);
  CHECK_THROWS(ConvSpec::same(1, 1, {2, 3, 3}));
  CHECK_THROWS(ConvSpec::same(4, 6, {3, 3, 3}, {1, 1, 1}, 4));

  auto x = random_tensor<double>(in, 2);
  auto w = random_tensor<double>(Shape5{3, 2, 3, 3, 2}, 3);
  CHECK_THROWS_AS(conv3d_forward<double>(x, w, kNoBias, spec), ShapeError);
  const std::vector<double> short_bias{1.0};
  CHECK_THROWS_AS(conv3d_forward<double>(x, random_tensor<double>(spec.weight_shape(), 4), short_bias, spec),
                  ShapeError);
}

TEST_CASE("optimized engine matches the naive reference") {
  Rng rng(11);
  for (int trial = 0; trial < 60; ++trial) {
    const std::int64_t groups = 1 + rng.below(3);
    ConvSpec spec;
    spec.groups = groups;
    spec.c_in = groups * (1 + rng.below(3));
    spec.c_out = groups * (1 + rng.below(3));
    spec.kernel = {1 + 2 * std::int64_t(rng.below(2)), 1 + std::int64_t(rng.below(3)), 1 + 2 * std::int64_t(rng.below(3))};
    spec.dilation = {1 + std::int64_t(rng.below(2)), 1 + std::int64_t(rng.below(3)), 1};
    if (trial % 3 == 0) spec.stride = {1, 1 + std::int64_t(rng.below(2)), 1 + std::int64_t(rng.below(2))};
    spec.padding = {std::int64_t(rng.below(3)), std::int64_t(rng.below(3)), std::int64_t(rng.below(4))};
    const Shape5 in{1 + std::int64_t(rng.below(2)), spec.c_in, 3 + std::int64_t(rng.below(3)),
                    5 + std::int64_t(rng.below(5)), 5 + std::int64_t(rng.below(13))};
    Shape5 out;
    try {
      out = spec.output_shape(in);
    } catch (const ShapeError&) {
      continue;
    }
    CAPTURE(trial);
    auto x = random_tensor<double>(in, 100 + trial);
    auto w = random_tensor<double>(spec.weight_shape(), 200 + trial);
    auto b = random_tensor<double>(Shape5{1, 1, 1, 1, spec.c_out}, 300 + trial);
    auto fast = conv3d_forward<double>(x, w, b.data(), spec);
    auto ref = reference::conv3d(x, w, b.ptr(), spec);
    CHECK(max_rel_diff(fast, ref) < 1e-12);

    auto xf = tensor_cast<float>(x), wf = tensor_cast<float>(w), bf = tensor_cast<float>(b);
    auto fastf = conv3d_forward<float>(xf, wf, bf.data(), spec);
    CHECK(max_rel_diff(tensor_cast<double>(fastf), ref) < 1e-5);
    (void)out;
  }
}

TEST_CASE("spatial conv") {
  auto x = random_tensor<double>(Shape5{1, 2, 3, 6, 7}, 5);
  auto w = random_tensor<double>(Shape5{3, 2, 1, 3, 3}, 6);
  const std::vector<double> b{0.1, 0.2, 0.3};
  auto y = spatial_conv<double>(x, w, b);
  CHECK(y == conv3d_forward<double>(x, w, b, ConvSpec::same(2, 3, {1, 3, 3})));

  // constant in time: every time slice gets the same output
  Tensor<double> c(Shape5{1, 2, 4, 6, 7});
  for (std::int64_t ch = 0; ch < 2; ++ch)
    for (std::int64_t t = 0; t < 4; ++t)
      for (std::int64_t h = 0; h < 6; ++h)
        for (std::int64_t ww = 0; ww < 7; ++ww) c.at(0, ch, t, h, ww) = x.at(0, ch, 0, h, ww);
  auto yc = spatial_conv<double>(c, w, b);
  for (std::int64_t o = 0; o < 3; ++o)
    for (std::int64_t t = 1; t < 4; ++t)
      for (std::int64_t h = 0; h < 6; ++h)
        for (std::int64_t ww = 0; ww < 7; ++ww) CHECK(yc.at(0, o, t, h, ww) == yc.at(0, o, 0, h, ww));

  // 3x3 averaging of a constant image is constant away from the border
  auto k = Tensor<double>::full(Shape5{1, 1, 1, 3, 3}, 1.0 / 9.0);
  auto img = Tensor<double>::full(Shape5{1, 1, 1, 6, 6}, 2.5);
  auto avg = spatial_conv<double>(img, k, kNoBias);
  for (std::int64_t h = 1; h < 5; ++h)
    for (std::int64_t ww = 1; ww < 5; ++ww) CHECK(avg.at(0, 0, 0, h, ww) == doctest::Approx(2.5).epsilon(1e-14));
  CHECK(avg.at(0, 0, 0, 0, 0) == doctest::Approx(2.5 * 4 / 9).epsilon(1e-14));

  CHECK_THROWS_AS(spatial_conv<double>(x, random_tensor<double>(Shape5{3, 2, 3, 3, 3}, 7), kNoBias), ShapeError);
}

TEST_CASE("temporal conv") {
  Tensor<double> series(Shape5{1, 1, 3, 1, 1}, {1, 2, 4});
  Tensor<double> diff(Shape5{1, 1, 2, 1, 1}, {1, -1});
  // cross-correlation: y[t] = x[t] - x[t+1]
  auto d = temporal_conv<double>(series, diff, kNoBias, 1, Padding::Valid);
  REQUIRE(d.shape() == Shape5{1, 1, 2, 1, 1});
  CHECK(d[0] == -1.0);
  CHECK(d[1] == -2.0);

  auto x = random_tensor<double>(Shape5{2, 3, 5, 4, 4}, 8);
  Tensor<double> delta(Shape5{3, 1, 3, 1, 1}, {0, 1, 0, 0, 1, 0, 0, 1, 0});
  CHECK(temporal_conv<double>(x, delta, kNoBias) == x);

  auto w = random_tensor<double>(Shape5{2, 3, 3, 1, 1}, 9);
  CHECK(temporal_conv<double>(x, w, kNoBias) == conv3d_forward<double>(x, w, kNoBias, ConvSpec::same(3, 2, {3, 1, 1})));

  // spatially constant input: every pixel sees the same filtered series
  Tensor<double> sc(Shape5{1, 3, 5, 4, 4});
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t t = 0; t < 5; ++t)
      for (std::int64_t h = 0; h < 4; ++h)
        for (std::int64_t ww = 0; ww < 4; ++ww) sc.at(0, c, t, h, ww) = x.at(0, c, t, 0, 0);
  auto ys = temporal_conv<double>(sc, w, kNoBias);
  for (std::int64_t o = 0; o < 2; ++o)
    for (std::int64_t t = 0; t < 5; ++t)
      for (std::int64_t h = 0; h < 4; ++h)
        for (std::int64_t ww = 0; ww < 4; ++ww) CHECK(ys.at(0, o, t, h, ww) == ys.at(0, o, t, 0, 0));
}

TEST_CASE("separable kernel equals spatial then temporal") {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    Rng rng(seed);
    const std::int64_t cin = 1 + rng.below(3), cout = 1 + rng.below(3);
    const std::int64_t kt = 1 + 2 * rng.below(3), kh = 1 + 2 * rng.below(3), kw = 1 + 2 * rng.below(3);
    auto x = random_tensor<double>(Shape5{1, cin, 5, 7, 8}, 10 + seed);
    auto spatial = random_tensor<double>(Shape5{cout, cin, 1, kh, kw}, 20 + seed);
    auto temporal = random_tensor<double>(Shape5{cout, 1, kt, 1, 1}, 30 + seed);
    // W[o,i,a,b,c] = temporal[o,a] * spatial[o,i,b,c]; temporal stage is depthwise.
    Tensor<double> full(Shape5{cout, cin, kt, kh, kw});
    for (std::int64_t o = 0; o < cout; ++o)
      for (std::int64_t i = 0; i < cin; ++i)
        for (std::int64_t a = 0; a < kt; ++a)
          for (std::int64_t b = 0; b < kh; ++b)
            for (std::int64_t c = 0; c < kw; ++c)
              full.at(o, i, a, b, c) = temporal.at(o, 0, a, 0, 0) * spatial.at(o, i, 0, b, c);
    auto direct = conv3d_forward<double>(x, full, kNoBias, ConvSpec::same(cin, cout, {kt, kh, kw}));
    auto split = temporal_conv<double>(spatial_conv<double>(x, spatial, kNoBias), temporal, kNoBias);
    CHECK(max_rel_diff(split, direct) < 1e-6);
    CHECK(max_rel_diff(split, reference::conv3d<double>(x, full, nullptr, ConvSpec::same(cin, cout, {kt, kh, kw}))) <
          1e-6);
  }
}

TEST_CASE("linearity") {
  auto x1 = random_tensor<double>(Shape5{2, 3, 4, 6, 6}, 40);
  auto x2 = random_tensor<double>(Shape5{2, 3, 4, 6, 6}, 41);
  auto w = random_tensor<double>(Shape5{4, 3, 3, 3, 3}, 42);
  const auto spec = ConvSpec::same(3, 4, {3, 3, 3}, {1, 2, 1});
  const double a = 1.7, b = -0.6;
  auto lhs = conv3d_forward<double>(add(scale(x1, a), scale(x2, b)), w, kNoBias, spec);
  auto rhs = add(scale(conv3d_forward<double>(x1, w, kNoBias, spec), a), scale(conv3d_forward<double>(x2, w, kNoBias, spec), b));
  CHECK(max_rel_diff(lhs, rhs) < 1e-6);
}

TEST_CASE("depthwise conv equals independent per-channel filtering") {
  const std::int64_t c = 5;
  auto x = random_tensor<float>(Shape5{2, c, 4, 7, 9}, 50);
  auto w = random_tensor<float>(Shape5{c, 1, 3, 3, 3}, 51);
  const auto spec = ConvSpec::same(c, c, {3, 3, 3}, {1, 1, 2}, c);
  auto y = conv3d_forward<float>(x, w, {}, spec);
  for (std::int64_t ch = 0; ch < c; ++ch) {
    auto xc = slice_channels(x, ch, 1);
    Tensor<float> wc(Shape5{1, 1, 3, 3, 3});
    for (std::int64_t k = 0; k < 27; ++k) wc[k] = w[ch * 27 + k];
    auto yc = conv3d_forward<float>(xc, wc, {}, ConvSpec::same(1, 1, {3, 3, 3}, {1, 1, 2}));
    CHECK(slice_channels(y, ch, 1) == yc);
  }
}

TEST_CASE("backward passes match the transposed reference loop") {
  Rng rng(60);
  for (int trial = 0; trial < 40; ++trial) {
    const std::int64_t groups = 1 + rng.below(2);
    ConvSpec spec;
    spec.groups = groups;
    spec.c_in = groups * (1 + rng.below(3));
    spec.c_out = groups * (1 + rng.below(3));
    spec.kernel = {1 + 2 * std::int64_t(rng.below(2)), 1 + std::int64_t(rng.below(3)), 1 + 2 * std::int64_t(rng.below(2))};
    spec.dilation = {1, 1 + std::int64_t(rng.below(2)), 1 + std::int64_t(rng.below(2))};
    if (trial % 2) spec.stride = {1 + std::int64_t(rng.below(2)), 1, 1 + std::int64_t(rng.below(2))};
    spec.padding = {std::int64_t(rng.below(2)), std::int64_t(rng.below(3)), std::int64_t(rng.below(3))};
    const Shape5 in{1 + std::int64_t(rng.below(2)), spec.c_in, 3 + std::int64_t(rng.below(2)), 5 + std::int64_t(rng.below(3)),
                    5 + std::int64_t(rng.below(6))};
    Shape5 out;
    try {
      out = spec.output_shape(in);
    } catch (const ShapeError&) {
      continue;
    }
    CAPTURE(trial);
    auto x = random_tensor<double>(in, 400 + trial);
    auto w = random_tensor<double>(spec.weight_shape(), 500 + trial);
    auto gy = random_tensor<double>(out, 600 + trial);

    // <gy, conv(x)> is bilinear: its gradients are obtained by probing with unit tensors.
    auto gx = conv3d_backward_input<double>(gy, w, spec, in);
    Tensor<double> gw(spec.weight_shape());
    std::vector<double> gb(static_cast<std::size_t>(spec.c_out), 0.0);
    conv3d_backward_weight<double>(gy, x, spec, gw, gb);

    auto inner = [&](const Tensor<double>& xx, const Tensor<double>& ww) {
      auto y = reference::conv3d<double>(xx, ww, nullptr, spec);
      long double s = 0;
      for (std::int64_t i = 0; i < y.numel(); ++i) s += static_cast<long double>(y[i]) * gy[i];
      return static_cast<double>(s);
    };
    for (int probe = 0; probe < 6; ++probe) {
      const std::int64_t ix = rng.below(static_cast<std::uint64_t>(in.numel()));
      Tensor<double> e(in);
      e[ix] = 1.0;
      CHECK(gx[ix] == doctest::Approx(inner(e, w)).epsilon(1e-12));
      const std::int64_t iw = rng.below(static_cast<std::uint64_t>(w.numel()));
      Tensor<double> ew(w.shape());
      ew[iw] = 1.0;
      CHECK(gw[iw] == doctest::Approx(inner(x, ew)).epsilon(1e-12));
    }
    for (std::int64_t o = 0; o < spec.c_out; ++o) {
      double s = 0;
      for (std::int64_t n = 0; n < out.n; ++n)
        for (std::int64_t k = 0; k < out.t * out.h * out.w; ++k) s += gy[(n * out.c + o) * out.t * out.h * out.w + k];
      CHECK(gb[static_cast<std::size_t>(o)] == doctest::Approx(s).epsilon(1e-12));
    }
  }
}

TEST_CASE("weight gradients accumulate") {
  auto x = random_tensor<double>(Shape5{1, 2, 3, 5, 5}, 70);
  auto gy = random_tensor<double>(Shape5{1, 2, 3, 5, 5}, 71);
  const auto spec = ConvSpec::same(2, 2, {3, 3, 3});
  Tensor<double> once(spec.weight_shape()), twice(spec.weight_shape());
  conv3d_backward_weight<double>(gy, x, spec, once, {});
  conv3d_backward_weight<double>(gy, x, spec, twice, {});
  conv3d_backward_weight<double>(gy, x, spec, twice, {});
  CHECK(max_rel_diff(twice, scale(once, 2.0)) < 1e-14);
}

TEST_CASE("cost model examples") {
  CHECK(flops_full(4, 4, 2, 3, 3, 3, 3) == 2592);
  CHECK(flops_decomposed(4, 4, 2, 3, 3, 3, 3) == 1152);
  CHECK(flops_full(1, 1, 5, 7, 1, 1, 1) == 35);
  CHECK(flops_full(252, 252, 64, 64, 3, 3, 3) == 252ULL * 252 * 64 * 64 * 27);
  CHECK(flops_full(252, 252, 64, 64, 3, 3, 3) == 7023034368ULL);
  CHECK(flops_decomposed(9, 9, 4, 4, 1, 3, 3) == 9ULL * 9 * 4 * 4 * (1 + 9));
  // 12/27 exactly: cross-multiplied to stay in integers
  for (Count c : {1, 3, 16, 64}) {
    const Count f = flops_full(10, 12, c, c, 3, 3, 3), d = flops_decomposed(10, 12, c, c, 3, 3, 3);
    CHECK(d * 27 == f * 12);
  }
  CHECK_THROWS_AS(flops_full(1ULL << 32, 1ULL << 32, 2, 1, 1, 1, 1), Error);
  CHECK_THROWS_AS(flops_decomposed(1ULL << 40, 1ULL << 30, 1, 1, 1, 1, 1), Error);
  CHECK_THROWS_AS(flops_full(0, 4, 2, 3, 3, 3, 3), Error);
}

TEST_CASE("cost formulas match instrumented reference loops") {
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    Rng rng(seed);
    const std::int64_t h = 2 + rng.below(5), w = 2 + rng.below(5), cin = 1 + rng.below(3), cout = 1 + rng.below(3);
    const std::int64_t kt = 1 + 2 * rng.below(2), kh = 1 + 2 * rng.below(2), kw = 1 + 2 * rng.below(2);
    auto x = random_tensor<double>(Shape5{1, cin, 1 + std::int64_t(rng.below(3)), h, w}, seed);
    const Count frames = static_cast<Count>(x.shape().t);

    std::uint64_t full = 0;
    const auto spec = ConvSpec::same(cin, cout, {kt, kh, kw});
    reference::conv3d<double>(x, random_tensor<double>(spec.weight_shape(), 1), nullptr, spec, &full);
    CHECK(full == frames * flops_full(h, w, cin, cout, kt, kh, kw));
    CHECK(full == conv_macs(spec, x.shape()));

    // decomposed cost: a cin->cout spatial pass plus a cin->cout temporal pass
    std::uint64_t dec = 0;
    const auto s1 = ConvSpec::same(cin, cout, {1, kh, kw});
    const auto s2 = ConvSpec::same(cin, cout, {kt, 1, 1});
    reference::conv3d<double>(x, random_tensor<double>(s1.weight_shape(), 2), nullptr, s1, &dec);
    reference::conv3d<double>(x, random_tensor<double>(s2.weight_shape(), 3), nullptr, s2, &dec);
    CHECK(dec ==
          frames * flops_decomposed(h, w, cin, cout, kt, kh, kw));
  }
}

TEST_CASE("parameter counts") {
  CHECK(param_count(ConvSpec::same(1, 1, {1, 1, 1}), true) == 2);
  CHECK(param_count(ConvSpec::same(16, 32, {3, 3, 3}), false) == 13824);
  CHECK(param_count(ConvSpec::same(16, 32, {3, 3, 3}, {1, 1, 1}, 4), false) * 4 ==
        param_count(ConvSpec::same(16, 32, {3, 3, 3}), false));
}
