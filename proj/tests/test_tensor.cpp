#include <cmath>
#include <sstream>

#include "doctest.h"
#include "stconv/reference.hpp"
#include "stconv/rng.hpp"
#include "stconv/tensor.hpp"
#include "stconv/tensor_io.hpp"

using namespace stconv;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape5 s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor<T> x(s);
  Rng rng(seed);
  for (auto& v : x.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return x;
}

Tensor<double> row(std::vector<double> v) {
  const auto n = static_cast<std::int64_t>(v.size());
  return Tensor<double>(Shape5{1, 1, 1, 1, n}, std::move(v));
}

}  // namespace

TEST_CASE("zeros allocates exactly N*C*T*H*W zero elements") {
  auto a = zeros<float>(Shape5{1, 1, 1, 2, 2});
  CHECK(a.numel() == 4);
  for (float v : a.data()) CHECK(v == 0.0f);

  auto b = zeros<double>(Shape5{2, 11, 4, 12, 12});
  CHECK(b.numel() == 12672);
  CHECK(sum(b) == 0.0);

  CHECK_THROWS_AS(zeros<float>(Shape5{1, 0, 1, 2, 2}), ShapeError);
  CHECK_THROWS_AS(zeros<float>(Shape5{1 << 20, 1 << 20, 1 << 20, 1 << 20, 2}), ShapeError);
}

TEST_CASE("row-major index matches a counted nested loop") {
  Rng rng(3);
  for (int trial = 0; trial < 40; ++trial) {
    const Shape5 s{1 + std::int64_t(rng.below(3)), 1 + std::int64_t(rng.below(4)), 1 + std::int64_t(rng.below(3)),
                   1 + std::int64_t(rng.below(4)), 1 + std::int64_t(rng.below(5))};
    const std::int64_t n = rng.below(s.n), c = rng.below(s.c), t = rng.below(s.t), h = rng.below(s.h),
                       w = rng.below(s.w);
    CHECK(s.index(n, c, t, h, w) == reference::counted_index(s, n, c, t, h, w));
  }
}

TEST_CASE("elementwise arithmetic") {
  CHECK(add(row({1, 2}), row({3, 4})) == row({4, 6}));
  CHECK(sub(row({1, 2}), row({3, 4})) == row({-2, -2}));
  CHECK(scale(row({1, -1}), 0.0) == row({0, 0}));
  CHECK(clamp(row({-5, 0.5, 7}), 0.0, 1.0) == row({0, 0.5, 1}));

  Tensor<double> a(Shape5{1, 1, 1, 2, 2}), b(Shape5{1, 1, 1, 2, 3});
  CHECK_THROWS_AS(mul(a, b), ShapeError);
}

TEST_CASE("non-finite results are reported as errors") {
  auto big = row({1e308, 1.0});
  CHECK_THROWS_AS(scale(big, 10.0), NonFiniteError);
  auto inf = row({std::numeric_limits<double>::infinity(), 0.0});
  CHECK_THROWS_AS(add(inf, row({0, 0})), NonFiniteError);
  CHECK_FALSE(all_finite(inf));
}

TEST_CASE("relu") {
  CHECK(relu(row({-1, 0, 2})) == row({0, 0, 2}));
  CHECK(relu(row({-3, -0.5, -7})) == row({0, 0, 0}));
  auto pos = random_tensor<double>(Shape5{1, 2, 3, 4, 5}, 1, 0.0, 2.0);
  CHECK(relu(pos) == pos);
}

TEST_CASE("sigmoid") {
  CHECK(sigmoid(row({0}))[0] == 0.5);
  CHECK(std::abs(sigmoid(row({10}))[0] - 0.9999546) < 1e-6);
  auto x = random_tensor<double>(Shape5{1, 1, 1, 1, 64}, 2, -30, 30);
  auto s = sigmoid(x), r = sigmoid(scale(x, -1.0));
  for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(s[i] + r[i] == doctest::Approx(1.0).epsilon(1e-15));
  auto sat = sigmoid(row({-1000, 1000}));
  CHECK(sat[0] == 0.0);
  CHECK(sat[1] == 1.0);
}

TEST_CASE("softmax along channel and time axes") {
  auto along_c = [](std::vector<double> v) {
    const auto n = static_cast<std::int64_t>(v.size());
    return softmax(Tensor<double>(Shape5{1, n, 1, 1, 1}, std::move(v)), Axis::C);
  };
  auto u = along_c({0, 0});
  CHECK(u[0] == 0.5);
  CHECK(u[1] == 0.5);
  auto big = along_c({1000, 1000});
  CHECK(big[0] == 0.5);
  CHECK(big[1] == 0.5);
  auto l3 = along_c({0, std::log(3.0)});
  CHECK(l3[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(l3[1] == doctest::Approx(0.75).epsilon(1e-12));
  CHECK_THROWS_AS(softmax(row({1, 2}), Axis::H), ShapeError);
}

TEST_CASE("softmax slices sum to one for extreme inputs") {
  for (Axis axis : {Axis::C, Axis::T}) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      auto x = random_tensor<double>(Shape5{2, 3, 5, 4, 3}, seed, -1e4, 1e4);
      auto y = softmax(x, axis);
      const Shape5& s = y.shape();
      for (std::int64_t n = 0; n < s.n; ++n)
        for (std::int64_t h = 0; h < s.h; ++h)
          for (std::int64_t w = 0; w < s.w; ++w) {
            if (axis == Axis::C) {
              for (std::int64_t t = 0; t < s.t; ++t) {
                double total = 0;
                for (std::int64_t c = 0; c < s.c; ++c) total += y.at(n, c, t, h, w);
                CHECK(std::abs(total - 1.0) < 1e-6);
              }
            } else {
              for (std::int64_t c = 0; c < s.c; ++c) {
                double total = 0;
                for (std::int64_t t = 0; t < s.t; ++t) total += y.at(n, c, t, h, w);
                CHECK(std::abs(total - 1.0) < 1e-6);
              }
            }
          }
    }
  }
}

TEST_CASE("dropout") {
  auto x = random_tensor<float>(Shape5{1, 4, 4, 8, 8}, 5);
  CHECK(dropout(x, 0.4, Mode::Eval, 1) == x);
  CHECK(dropout(x, 0.0, Mode::Train, 1) == x);
  CHECK(dropout(x, 0.0, Mode::Eval, 1) == x);
  CHECK_THROWS(dropout(x, 1.0, Mode::Train, 1));

  auto ones = Tensor<double>::full(Shape5{1, 1, 1, 100, 1000}, 1.0);
  auto d = dropout(ones, 0.4, Mode::Train, 42);
  std::int64_t kept = 0;
  for (double v : d.data()) {
    if (v != 0.0) {
      ++kept;
      CHECK(v == doctest::Approx(1.0 / 0.6));
    }
  }
  CHECK(std::abs(static_cast<double>(kept) / 1e5 - 0.6) < 0.01);
  CHECK(dropout(ones, 0.4, Mode::Train, 42) == d);
  CHECK_FALSE(dropout(ones, 0.4, Mode::Train, 43) == d);
}

TEST_CASE("center crop") {
  Tensor<double> x(Shape5{1, 2, 3, 48, 48});
  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<double>(i);
  auto c = crop_center_spatial(x, 6);
  CHECK(c.shape() == Shape5{1, 2, 3, 8, 8});
  CHECK(c.at(0, 1, 2, 0, 0) == x.at(0, 1, 2, 20, 20));
  CHECK(c.at(0, 1, 2, 7, 7) == x.at(0, 1, 2, 27, 27));
  CHECK(crop_center_spatial(x, 1) == x);
  CHECK_THROWS_AS(crop_center_spatial(Tensor<double>(Shape5{1, 1, 1, 50, 48}), 6), ShapeError);

  // Embedding the crop back into a zero canvas keeps the window and zeroes the rest.
  auto back = embed_center_spatial(c, 6);
  CHECK(back.shape() == x.shape());
  CHECK(crop_center_spatial(back, 6) == c);
  CHECK(back.at(0, 0, 0, 19, 20) == 0.0);
  CHECK(back.at(0, 0, 0, 20, 28) == 0.0);
}

TEST_CASE("fold channels into time") {
  Tensor<double> x(Shape5{1, 8, 4, 2, 2});
  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<double>(i);
  auto f = fold_channels_into_time(x);
  CHECK(f.shape() == Shape5{1, 1, 32, 2, 2});
  // time-major: output frame t*C' + c
  CHECK(f.at(0, 0, 1 * 8 + 3, 1, 0) == x.at(0, 3, 1, 1, 0));
  CHECK(f.at(0, 0, 31, 1, 1) == x.at(0, 7, 3, 1, 1));

  auto single = random_tensor<double>(Shape5{2, 1, 5, 3, 3}, 9);
  CHECK(fold_channels_into_time(single) == single);
  CHECK_THROWS_AS(unfold_time_into_channels(f, 5), ShapeError);
}

TEST_CASE("fold/unfold round trip is exact for all C'*T <= 256") {
  std::uint64_t seed = 0;
  for (std::int64_t c = 1; c <= 256; ++c)
    for (std::int64_t t = 1; c * t <= 256; ++t) {
      auto x = random_tensor<float>(Shape5{1, c, t, 2, 3}, ++seed);
      auto f = fold_channels_into_time(x);
      REQUIRE(f.shape().t == c * t);
      REQUIRE(unfold_time_into_channels(f, c) == x);
    }
}

TEST_CASE("channel slicing, concatenation and batching") {
  auto x = random_tensor<double>(Shape5{2, 6, 2, 3, 3}, 11);
  std::vector<Tensor<double>> parts{slice_channels(x, 0, 2), slice_channels(x, 2, 3), slice_channels(x, 5, 1)};
  CHECK(concat_channels<double>(parts) == x);
  CHECK_THROWS_AS(slice_channels(x, 5, 2), ShapeError);
  std::vector<Tensor<double>> batches{slice_batch(x, 0, 1), slice_batch(x, 1, 1)};
  CHECK(concat_batch<double>(batches) == x);
}

TEST_CASE("max pool and nearest upsample") {
  Tensor<double> x(Shape5{1, 1, 1, 2, 4}, {1, 5, 2, 0, 3, 4, 9, 1});
  std::vector<std::int64_t> arg;
  auto p = max_pool_spatial2(x, &arg);
  CHECK(p.shape() == Shape5{1, 1, 1, 1, 2});
  CHECK(p[0] == 5);
  CHECK(p[1] == 9);
  CHECK(arg == std::vector<std::int64_t>{1, 6});
  auto u = upsample_nearest_spatial2(p);
  CHECK(u == Tensor<double>(Shape5{1, 1, 1, 2, 4}, {5, 5, 9, 9, 5, 5, 9, 9}));
  // <up(a), b> == <a, up_adjoint(b)>
  auto a = random_tensor<double>(Shape5{1, 2, 2, 3, 3}, 1);
  auto b = random_tensor<double>(Shape5{1, 2, 2, 6, 6}, 2);
  CHECK(sum(mul(upsample_nearest_spatial2(a), b)) ==
        doctest::Approx(sum(mul(a, upsample_nearest_spatial2_adjoint(b)))).epsilon(1e-12));
  CHECK_THROWS_AS(max_pool_spatial2(Tensor<double>(Shape5{1, 1, 1, 3, 4})), ShapeError);
}

TEST_CASE("STSR header layout and round trip") {
  auto x = random_tensor<double>(Shape5{2, 3, 4, 5, 6}, 17);
  std::stringstream ss;
  write_stsr(ss, x);
  const std::string bytes = ss.str();
  REQUIRE(bytes.size() == kStsrHeaderBytes + static_cast<std::size_t>(x.numel()) * 8);
  CHECK(bytes.substr(0, 4) == "STSR");
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 1);
  CHECK(bytes[6] == 5);
  CHECK(bytes[7] == 0);
  CHECK(static_cast<unsigned char>(bytes[8]) == 2);   // N, little-endian
  CHECK(static_cast<unsigned char>(bytes[40]) == 6);  // W
  auto back = read_stsr(ss);
  REQUIRE(std::holds_alternative<Tensor<double>>(back));
  CHECK(std::get<Tensor<double>>(back) == x);

  auto xf = random_tensor<float>(Shape5{1, 1, 2, 2, 2}, 3);
  std::stringstream sf;
  write_stsr(sf, xf);
  CHECK(sf.str()[5] == 0);
  CHECK(read_stsr_as<float>(sf) == xf);
}

TEST_CASE("STSR rejects corrupt input") {
  auto x = random_tensor<float>(Shape5{1, 2, 2, 2, 2}, 4);
  std::stringstream ss;
  write_stsr(ss, x);
  const std::string good = ss.str();

  auto read = [](std::string s) {
    std::stringstream in(s);
    return read_stsr(in);
  };
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(read(bad_magic), FormatError);
  std::string bad_version = good;
  bad_version[4] = 2;
  CHECK_THROWS_AS(read(bad_version), FormatError);
  std::string bad_dtype = good;
  bad_dtype[5] = 7;
  CHECK_THROWS_AS(read(bad_dtype), FormatError);
  CHECK_THROWS_AS(read(good.substr(0, good.size() - 1)), FormatError);
  CHECK_THROWS_AS(read(good.substr(0, 20)), FormatError);
}
