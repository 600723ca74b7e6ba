#include <cmath>
#include <vector>

#include "doctest.h"
#include "stconv/autograd.hpp"
#include "stconv/gradcheck.hpp"
#include "stconv/rng.hpp"

using namespace stconv;
using ag::Tape;
using ag::Var;

namespace {

Tensor<double> random_tensor(Shape5 s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor<double> x(s);
  Rng rng(seed);
  for (auto& v : x.data()) v = rng.uniform(lo, hi);
  return x;
}

// Random linear probe so that every output element contributes to the loss.
Var probe(Tape<double>& tape, Var y, std::uint64_t seed) {
  return ag::dot_const(tape, y, random_tensor(tape.value(y).shape(), seed));
}

void expect_pass(const GradCheckResult& r) {
  INFO(r.name << ": max relative error " << r.max_rel_error << " over " << r.coords_checked << " coords");
  CHECK(r.coords_checked > 0);
  CHECK(r.passed);
}

// Values kept away from 0 so finite differences do not straddle the relu kink.
Tensor<double> off_kink(Shape5 s, std::uint64_t seed) {
  auto x = random_tensor(s, seed, 0.2, 1.0);
  Rng rng(seed + 1);
  for (auto& v : x.data())
    if (rng.uniform() < 0.5) v = -v;
  return x;
}

}  // namespace

TEST_CASE("conv3d gradients match finite differences") {
  struct Case {
    ConvSpec spec;
    Shape5 in;
  };
  std::vector<Case> cases;
  cases.push_back({ConvSpec::same(2, 3, {3, 3, 3}), Shape5{1, 2, 3, 4, 5}});
  cases.push_back({ConvSpec::same(2, 2, {1, 3, 3}, {1, 2, 2}), Shape5{2, 2, 2, 5, 5}});
  cases.push_back({ConvSpec::same(4, 4, {3, 3, 3}, {1, 1, 1}, 4), Shape5{1, 4, 3, 4, 4}});
  cases.push_back({ConvSpec::same(4, 2, {3, 1, 1}, {1, 1, 1}, 2), Shape5{1, 4, 5, 3, 3}});
  ConvSpec strided;
  strided.c_in = 2;
  strided.c_out = 2;
  strided.kernel = {1, 3, 3};
  strided.stride = {1, 2, 2};
  strided.padding = {0, 1, 1};
  cases.push_back({strided, Shape5{1, 2, 2, 5, 5}});
  ConvSpec valid;
  valid.c_in = 1;
  valid.c_out = 2;
  valid.kernel = {3, 3, 1};
  valid.dilation = {1, 1, 1};
  cases.push_back({valid, Shape5{1, 1, 4, 5, 3}});

  int idx = 0;
  for (const auto& c : cases) {
    CAPTURE(idx);
    const auto spec = c.spec;
    std::vector<Tensor<double>> leaves{random_tensor(c.in, 10 + idx), random_tensor(spec.weight_shape(), 20 + idx),
                                       random_tensor(Shape5{1, 1, 1, 1, spec.c_out}, 30 + idx)};
    auto r = check_gradients("conv3d", leaves, [&](Tape<double>& t, std::span<const Var> v) {
      return probe(t, ag::conv3d(t, v[0], v[1], v[2], spec), 99);
    });
    expect_pass(r);
    ++idx;
  }
}

TEST_CASE("sum of conv output: weight gradient") {
  const auto spec = ConvSpec::same(2, 2, {3, 3, 3});
  std::vector<Tensor<double>> leaves{random_tensor(Shape5{1, 2, 4, 5, 5}, 1), random_tensor(spec.weight_shape(), 2)};
  GradCheckOptions opts;
  opts.max_coords = 1000;
  expect_pass(check_gradients(
      "sum(conv)", leaves,
      [&](Tape<double>& t, std::span<const Var> v) { return ag::sum(t, ag::conv3d(t, v[0], v[1], Var{}, spec)); },
      opts));
}

TEST_CASE("elementwise ops and activations") {
  const Shape5 s{2, 3, 2, 3, 4};
  expect_pass(check_gradients("relu", {off_kink(s, 1)},
                              [](Tape<double>& t, std::span<const Var> v) { return probe(t, ag::relu(t, v[0]), 5); }));
  expect_pass(check_gradients("sigmoid", {random_tensor(s, 2, -4, 4)}, [](Tape<double>& t, std::span<const Var> v) {
    return probe(t, ag::sigmoid(t, v[0]), 6);
  }));
  for (Axis axis : {Axis::C, Axis::T}) {
    expect_pass(check_gradients("softmax", {random_tensor(s, 3, -3, 3)}, [axis](Tape<double>& t, std::span<const Var> v) {
      return probe(t, ag::softmax(t, v[0], axis), 7);
    }));
  }
  expect_pass(check_gradients("add", {random_tensor(s, 4), random_tensor(s, 5)},
                              [](Tape<double>& t, std::span<const Var> v) { return probe(t, ag::add(t, v[0], v[1]), 8); }));
  expect_pass(check_gradients("mul", {random_tensor(s, 6), random_tensor(s, 7)},
                              [](Tape<double>& t, std::span<const Var> v) { return probe(t, ag::mul(t, v[0], v[1]), 9); }));
  expect_pass(check_gradients("mul self", {random_tensor(s, 8)},
                              [](Tape<double>& t, std::span<const Var> v) { return probe(t, ag::mul(t, v[0], v[0]), 10); }));
  expect_pass(check_gradients("scale", {random_tensor(s, 9)}, [](Tape<double>& t, std::span<const Var> v) {
    return probe(t, ag::scale(t, v[0], -2.5), 11);
  }));
  expect_pass(check_gradients("dropout", {random_tensor(s, 10)}, [](Tape<double>& t, std::span<const Var> v) {
    return probe(t, ag::dropout(t, v[0], 0.4, Mode::Train, 3), 12);
  }));
  expect_pass(check_gradients("mean", {random_tensor(s, 11)},
                              [](Tape<double>& t, std::span<const Var> v) { return ag::mean(t, v[0]); }));
}

TEST_CASE("shape ops") {
  expect_pass(check_gradients("crop", {random_tensor(Shape5{1, 2, 2, 6, 6}, 1)}, [](Tape<double>& t, std::span<const Var> v) {
    return probe(t, ag::crop_center_spatial(t, v[0], 3), 2);
  }));
  expect_pass(check_gradients("fold", {random_tensor(Shape5{2, 4, 3, 2, 2}, 3)}, [](Tape<double>& t, std::span<const Var> v) {
    return probe(t, ag::fold_channels_into_time(t, v[0]), 4);
  }));
  expect_pass(check_gradients("slice+concat", {random_tensor(Shape5{1, 5, 2, 3, 3}, 5), random_tensor(Shape5{1, 2, 2, 3, 3}, 6)},
                              [](Tape<double>& t, std::span<const Var> v) {
                                const std::vector<Var> parts{ag::slice_channels(t, v[0], 3, 2), v[1],
                                                             ag::slice_channels(t, v[0], 0, 3)};
                                return probe(t, ag::concat_channels<double>(t, parts), 7);
                              }));
  // distinct values keep the pooling argmax stable under the probe step
  Tensor<double> distinct(Shape5{1, 2, 2, 4, 6});
  Rng rng(8);
  for (std::int64_t i = 0; i < distinct.numel(); ++i) distinct[i] = 0.01 * static_cast<double>(i) + 0.001 * rng.uniform();
  expect_pass(check_gradients("maxpool", {distinct}, [](Tape<double>& t, std::span<const Var> v) {
    return probe(t, ag::max_pool_spatial2(t, v[0]), 9);
  }));
  expect_pass(check_gradients("upsample", {random_tensor(Shape5{1, 2, 2, 3, 2}, 10)}, [](Tape<double>& t, std::span<const Var> v) {
    return probe(t, ag::upsample_nearest_spatial2(t, v[0]), 11);
  }));
}

TEST_CASE("identity kernel passes the upstream gradient through") {
  Tape<double> tape;
  auto x = tape.input(random_tensor(Shape5{1, 1, 3, 4, 4}, 1));
  auto w = tape.input(Tensor<double>::full(Shape5{1, 1, 1, 1, 1}, 1.0));
  auto y = ag::conv3d(tape, x, w, Var{}, ConvSpec::same(1, 1, {1, 1, 1}));
  auto seed = random_tensor(Shape5{1, 1, 3, 4, 4}, 2);
  tape.backward(y, seed);
  CHECK(tape.grad(x) == seed);
}

TEST_CASE("zero upstream gradient gives zero parameter gradients") {
  Tape<double> tape;
  const auto spec = ConvSpec::same(2, 2, {3, 3, 3});
  Tensor<double> gw(spec.weight_shape()), gb(Shape5{1, 1, 1, 1, 2});
  auto x = tape.constant(random_tensor(Shape5{1, 2, 3, 4, 4}, 1));
  auto w = tape.parameter("w", random_tensor(spec.weight_shape(), 2), &gw);
  auto b = tape.parameter("b", random_tensor(Shape5{1, 1, 1, 1, 2}, 3), &gb);
  auto y = ag::relu(tape, ag::conv3d(tape, x, w, b, spec));
  tape.backward(y, Tensor<double>(tape.value(y).shape()));
  for (double v : gw.data()) CHECK(v == 0.0);
  for (double v : gb.data()) CHECK(v == 0.0);
}

TEST_CASE("a consumed tape cannot run backward again") {
  Tape<double> tape;
  auto x = tape.input(random_tensor(Shape5{1, 1, 1, 2, 2}, 1));
  auto l = ag::sum(tape, x);
  tape.backward(l);
  CHECK(tape.consumed());
  CHECK_THROWS_AS(tape.backward(l), Error);
}

TEST_CASE("a shared parameter accumulates into its buffer exactly once") {
  Tensor<double> value = random_tensor(Shape5{1, 1, 1, 2, 3}, 1);
  Tensor<double> sink = Tensor<double>::full(value.shape(), 10.0);
  Tape<double> tape;
  auto p1 = tape.parameter("p", value, &sink);
  auto p2 = tape.parameter("p", value, &sink);
  CHECK(p1.id == p2.id);
  // loss = sum(p) + sum(3p): d/dp = 4
  auto l = ag::add(tape, ag::sum(tape, p1), ag::sum(tape, ag::scale(tape, p2, 3.0)));
  tape.backward(l);
  for (double v : sink.data()) CHECK(v == 14.0);
}

TEST_CASE("the harness notices a corrupted backward pass") {
  const auto spec = ConvSpec::same(1, 2, {3, 3, 3});
  std::vector<Tensor<double>> leaves{random_tensor(Shape5{1, 1, 3, 4, 4}, 1), random_tensor(spec.weight_shape(), 2)};
  auto loss = [&](Tape<double>& t, std::span<const Var> v) { return probe(t, ag::conv3d(t, v[0], v[1], Var{}, spec), 3); };
  testing::set_corrupt_conv_backward(true);
  auto bad = check_gradients("corrupt", leaves, loss);
  testing::set_corrupt_conv_backward(false);
  CHECK_FALSE(bad.passed);
  CHECK(bad.max_rel_error > 0.1);
  CHECK(check_gradients("clean", leaves, loss).passed);
}
