#include "stconv/verify.hpp"

#include <boost/multiprecision/cpp_int.hpp>
#include <cmath>
#include <cstdio>
#include <functional>

#include "stconv/gradcheck.hpp"
#include "stconv/model.hpp"
#include "stconv/training.hpp"

namespace stconv {

namespace {

using ag::Tape;
using ag::Var;
using BigInt = boost::multiprecision::cpp_int;

Tensor<double> random_tensor(Shape5 s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor<double> x(s);
  Rng rng(seed);
  for (auto& v : x.data()) v = rng.uniform(lo, hi);
  return x;
}

// |v| in [0.2, 1] so a probe step never crosses the relu kink
Tensor<double> off_kink(Shape5 s, std::uint64_t seed) {
  auto x = random_tensor(s, seed, 0.2, 1.0);
  Rng rng(seed + 1);
  for (auto& v : x.data())
    if (rng.uniform() < 0.5) v = -v;
  return x;
}

Var probe(Tape<double>& tape, Var y, std::uint64_t seed) {
  return ag::dot_const(tape, y, random_tensor(tape.value(y).shape(), seed));
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

CheckResult from_grad(const GradCheckResult& r, double tol) {
  const bool ok = r.coords_checked > 0 && r.max_rel_error < tol;
  return {"grad " + r.name, ok,
          "max rel err " + sci(r.max_rel_error) + " over " + std::to_string(r.coords_checked) + " coords (tol " + sci(tol) + ")"};
}

double max_rel_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double scale = 0.0, diff = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    scale = std::max(scale, std::abs(b[i]));
    diff = std::max(diff, std::abs(a[i] - b[i]));
  }
  return diff / std::max(scale, 1e-30);
}

}  // namespace

std::string format_check(const CheckResult& r) { return std::string(r.passed ? "PASS " : "FAIL ") + r.name + ": " + r.detail; }

bool all_passed(const std::vector<CheckResult>& results) {
  for (const auto& r : results)
    if (!r.passed) return false;
  return true;
}

std::vector<CheckResult> gradient_suite(std::uint64_t seed) {
  constexpr double tol = 1e-4;
  std::vector<CheckResult> out;
  Rng rng(derive_seed(seed, 1));
  auto next = [&] { return rng.next_u64(); };
  auto op = [&](const std::string& name, std::vector<Tensor<double>> leaves, const LossBuilder& loss) {
    GradCheckOptions opts;
    opts.seed = next();
    out.push_back(from_grad(check_gradients(name, std::move(leaves), loss, opts), tol));
  };

  const std::vector<std::pair<ConvSpec, Shape5>> convs{
      {ConvSpec::same(2, 3, {3, 3, 3}), Shape5{1, 2, 3, 4, 5}},
      {ConvSpec::same(2, 2, {1, 3, 3}, {1, 2, 2}), Shape5{2, 2, 2, 5, 5}},
      {ConvSpec::same(4, 4, {3, 3, 3}, {1, 1, 1}, 4), Shape5{1, 4, 3, 4, 4}},
      {ConvSpec::same(4, 2, {3, 1, 1}, {1, 1, 1}, 2), Shape5{1, 4, 5, 3, 3}},
  };
  for (std::size_t i = 0; i < convs.size(); ++i) {
    const ConvSpec spec = convs[i].first;
    const std::uint64_t p = next();
    op("conv3d[" + std::to_string(i) + "]",
       {random_tensor(convs[i].second, next()), random_tensor(spec.weight_shape(), next()),
        random_tensor(Shape5{1, 1, 1, 1, spec.c_out}, next())},
       [spec, p](Tape<double>& t, std::span<const Var> v) { return probe(t, ag::conv3d(t, v[0], v[1], v[2], spec), p); });
  }

  const Shape5 s{2, 3, 2, 3, 4};
  const std::uint64_t p = next();
  op("relu", {off_kink(s, next())}, [p](Tape<double>& t, std::span<const Var> v) { return probe(t, ag::relu(t, v[0]), p); });
  op("sigmoid", {random_tensor(s, next(), -4, 4)},
     [p](Tape<double>& t, std::span<const Var> v) { return probe(t, ag::sigmoid(t, v[0]), p); });
  op("softmax(C)", {random_tensor(s, next(), -3, 3)},
     [p](Tape<double>& t, std::span<const Var> v) { return probe(t, ag::softmax(t, v[0], Axis::C), p); });
  op("softmax(T)", {random_tensor(s, next(), -3, 3)},
     [p](Tape<double>& t, std::span<const Var> v) { return probe(t, ag::softmax(t, v[0], Axis::T), p); });
  op("add", {random_tensor(s, next()), random_tensor(s, next())},
     [p](Tape<double>& t, std::span<const Var> v) { return probe(t, ag::add(t, v[0], v[1]), p); });
  op("mul", {random_tensor(s, next()), random_tensor(s, next())},
     [p](Tape<double>& t, std::span<const Var> v) { return probe(t, ag::mul(t, v[0], v[1]), p); });
  op("scale", {random_tensor(s, next())}, [p](Tape<double>& t, std::span<const Var> v) { return probe(t, ag::scale(t, v[0], -2.5), p); });
  const std::uint64_t drop = next();
  op("dropout", {random_tensor(s, next())},
     [p, drop](Tape<double>& t, std::span<const Var> v) { return probe(t, ag::dropout(t, v[0], 0.4, Mode::Train, drop), p); });
  op("sum", {random_tensor(s, next())}, [](Tape<double>& t, std::span<const Var> v) { return ag::sum(t, v[0]); });
  op("mean", {random_tensor(s, next())}, [](Tape<double>& t, std::span<const Var> v) { return ag::mean(t, v[0]); });
  op("crop", {random_tensor(Shape5{1, 2, 2, 6, 6}, next())},
     [p](Tape<double>& t, std::span<const Var> v) { return probe(t, ag::crop_center_spatial(t, v[0], 3), p); });
  op("fold", {random_tensor(Shape5{2, 4, 3, 2, 2}, next())},
     [p](Tape<double>& t, std::span<const Var> v) { return probe(t, ag::fold_channels_into_time(t, v[0]), p); });
  op("slice+concat", {random_tensor(Shape5{1, 5, 2, 3, 3}, next()), random_tensor(Shape5{1, 2, 2, 3, 3}, next())},
     [p](Tape<double>& t, std::span<const Var> v) {
       const std::vector<Var> parts{ag::slice_channels(t, v[0], 3, 2), v[1], ag::slice_channels(t, v[0], 0, 3)};
       return probe(t, ag::concat_channels<double>(t, parts), p);
     });
  Tensor<double> distinct(Shape5{1, 2, 2, 4, 6});
  {
    Rng r(next());
    for (std::int64_t i = 0; i < distinct.numel(); ++i) distinct[i] = 0.01 * static_cast<double>(i) + 0.001 * r.uniform();
  }
  op("maxpool", {distinct}, [p](Tape<double>& t, std::span<const Var> v) { return probe(t, ag::max_pool_spatial2(t, v[0]), p); });
  op("upsample", {random_tensor(Shape5{1, 2, 2, 3, 2}, next())},
     [p](Tape<double>& t, std::span<const Var> v) { return probe(t, ag::upsample_nearest_spatial2(t, v[0]), p); });

  {
    const Shape5 ls{2, 1, 4, 3, 3};
    Tensor<double> y(ls);
    Rng r(next());
    for (auto& v : y.data()) v = r.uniform() < 0.4 ? 1.0 : 0.0;
    const TrainConfig tc;
    op("total_loss", {random_tensor(ls, next(), -3, 3), random_tensor(ls, next(), -3, 3)},
       [y, tc](Tape<double>& t, std::span<const Var> v) { return total_loss(t, v[0], v[1], y, tc); });
  }

  GradCheckOptions block_opts;
  block_opts.max_coords = 80;
  for (std::int64_t g : {2, 4}) {
    LcamConfig cfg;
    cfg.channels = 4;
    cfg.groups = g;
    ParamStore<double> store;
    Rng r(next());
    lcam_build(store, "b", cfg, r);
    for (auto& e : store)
      if (e.name.ends_with(".bias")) e.value = random_tensor(e.value.shape(), next(), -0.1, 0.1);
    const auto x = random_tensor(Shape5{1, 4, 3, 5, 5}, next());
    const auto pr = random_tensor(x.shape(), next());
    block_opts.seed = next();
    const std::string tag = "lcam(g=" + std::to_string(g) + ")";
    out.push_back(from_grad(check_param_gradients(tag + " params", store, [&](Tape<double>& t, ParamStore<double>& ps) {
      Context<double> ctx{t, ps};
      return ag::dot_const(t, lcam_forward(ctx, "b", t.constant(x), cfg), pr);
    }, block_opts), tol));
    out.push_back(from_grad(check_gradients(tag + " input", {x}, [&](Tape<double>& t, std::span<const Var> v) {
      Context<double> ctx{t, store};
      return ag::dot_const(t, lcam_forward(ctx, "b", v[0], cfg), pr);
    }, block_opts), tol));
  }
  for (AttentionNorm norm : {AttentionNorm::SoftmaxTime, AttentionNorm::Sigmoid}) {
    StrConfig cfg;
    cfg.norm = norm;
    ParamStore<double> store;
    Rng r(next());
    str_build(store, "s", cfg, r);
    const auto y = random_tensor(Shape5{1, 1, 8, 5, 5}, next(), -2, 2);
    const auto pr = random_tensor(y.shape(), next());
    block_opts.seed = next();
    const std::string tag = std::string("str(") + (norm == AttentionNorm::SoftmaxTime ? "softmax" : "sigmoid") + ")";
    out.push_back(from_grad(check_param_gradients(tag + " params", store, [&](Tape<double>& t, ParamStore<double>& ps) {
      Context<double> ctx{t, ps};
      return ag::dot_const(t, str_forward(ctx, "s", t.constant(y), cfg), pr);
    }, block_opts), tol));
    out.push_back(from_grad(check_gradients(tag + " input", {y}, [&](Tape<double>& t, std::span<const Var> v) {
      Context<double> ctx{t, store};
      return ag::dot_const(t, str_forward(ctx, "s", v[0], cfg), pr);
    }, block_opts), tol));
  }

  {
    ModelConfig cfg;
    cfg.init_filters = 4;
    cfg.levels = 2;
    cfg.dropout = 0.0;
    auto params = build<double>(cfg, next());
    for (auto& e : params)
      if (e.name.ends_with(".bias") && e.name != "str.attn.mix.bias") e.value = random_tensor(e.value.shape(), next(), -0.05, 0.05);
    const auto x = random_tensor(Shape5{1, 11, 4, 12, 12}, next());
    const auto pf = random_tensor(Shape5{1, 1, 32, 2, 2}, next()), pe = random_tensor(Shape5{1, 1, 32, 2, 2}, next());
    GradCheckOptions opts;
    opts.max_coords = 20;
    opts.step = 1e-6;
    opts.tolerance = 1e-3;
    opts.seed = next();
    out.push_back(from_grad(check_param_gradients("model end-to-end", params, [&](Tape<double>& t, ParamStore<double>& ps) {
      Context<double> ctx{t, ps};
      auto o = forward(ctx, t.constant(x), cfg);
      return ag::add(t, ag::dot_const(t, o.y_final, pf), ag::scale(t, ag::dot_const(t, o.y_early, pe), 0.2));
    }, opts), 1e-3));
  }
  return out;
}

CheckResult flops_closed_forms(std::uint64_t seed, int tuples) {
  Rng rng(derive_seed(seed, 2));
  int ok = 0;
  std::string first_bad;
  for (int i = 0; i < tuples; ++i) {
    const Count h = 1 + rng.below(2048), w = 1 + rng.below(2048), ci = 1 + rng.below(512), co = 1 + rng.below(512);
    const Count kt = 1 + 2 * rng.below(5), kh = 1 + 2 * rng.below(5), kw = 1 + 2 * rng.below(5);
    const BigInt base = BigInt(h) * w * ci * co;
    const BigInt full = base * (BigInt(kt) * kh * kw), dec = base * (BigInt(kt) + BigInt(kh) * kw);
    const bool match = BigInt(flops_full(h, w, ci, co, kt, kh, kw)) == full &&
                       BigInt(flops_decomposed(h, w, ci, co, kt, kh, kw)) == dec;
    ok += match;
    if (!match && first_bad.empty())
      first_bad = " first mismatch at (" + std::to_string(h) + "," + std::to_string(w) + "," + std::to_string(ci) + "," +
                  std::to_string(co) + "," + std::to_string(kt) + "x" + std::to_string(kh) + "x" + std::to_string(kw) + ")";
  }
  // 3x3x3: decomposed / full == 12 / 27 exactly, cross-multiplied
  const Count f = flops_full(48, 48, 16, 16, 3, 3, 3), d = flops_decomposed(48, 48, 16, 16, 3, 3, 3);
  const bool ratio = BigInt(d) * 27 == BigInt(f) * 12;
  return {"flops closed forms", ok == tuples && ratio,
          std::to_string(ok) + "/" + std::to_string(tuples) + " tuples exact; 3x3x3 ratio " + (ratio ? "12/27" : "wrong") + first_bad};
}

CheckResult decomposition_oracle(std::uint64_t seed, int kernels) {
  Rng rng(derive_seed(seed, 3));
  double worst = 0;
  const std::span<const double> no_bias{};
  for (int k = 0; k < kernels; ++k) {
    const std::int64_t cin = 1 + static_cast<std::int64_t>(rng.below(3)), cout = 1 + static_cast<std::int64_t>(rng.below(3));
    const std::int64_t kt = 1 + 2 * static_cast<std::int64_t>(rng.below(3)), kh = 1 + 2 * static_cast<std::int64_t>(rng.below(3)),
                       kw = 1 + 2 * static_cast<std::int64_t>(rng.below(3));
    const auto x = random_tensor(Shape5{1, cin, 5, 7, 8}, rng.next_u64());
    const auto spatial = random_tensor(Shape5{cout, cin, 1, kh, kw}, rng.next_u64());
    const auto temporal = random_tensor(Shape5{cout, 1, kt, 1, 1}, rng.next_u64());
    Tensor<double> full(Shape5{cout, cin, kt, kh, kw});
    for (std::int64_t o = 0; o < cout; ++o)
      for (std::int64_t i = 0; i < cin; ++i)
        for (std::int64_t a = 0; a < kt; ++a)
          for (std::int64_t b = 0; b < kh; ++b)
            for (std::int64_t c = 0; c < kw; ++c) full.at(o, i, a, b, c) = temporal.at(o, 0, a, 0, 0) * spatial.at(o, i, 0, b, c);
    const auto dense = conv3d_forward<double>(x, full, no_bias, ConvSpec::same(cin, cout, {kt, kh, kw}));
    const auto split = temporal_conv<double>(spatial_conv<double>(x, spatial, no_bias), temporal, no_bias);
    worst = std::max(worst, max_rel_diff(split, dense));
  }
  return {"decomposition oracle", worst < 1e-6,
          std::to_string(kernels) + " separable kernels, max rel err " + sci(worst) + " (tol 1e-06)"};
}

CheckResult fold_round_trip(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 4));
  int ok = 0, total = 0;
  for (std::int64_t c = 1; c <= 16; c *= 2)
    for (std::int64_t t = 1; t <= 8; ++t) {
      const Shape5 s{1 + static_cast<std::int64_t>(rng.below(2)), c, t, 2, 3};
      const auto x = random_tensor(s, rng.next_u64());
      const auto folded = fold_channels_into_time(x);
      bool good = folded.shape() == Shape5{s.n, 1, c * t, s.h, s.w} && unfold_time_into_channels(folded, c) == x;
      // frame t*C' + c carries channel c of input frame t
      good = good && folded.at(0, 0, (t - 1) * c + (c - 1), 1, 2) == x.at(0, c - 1, t - 1, 1, 2);
      ok += good;
      ++total;
    }
  return {"fold round trip", ok == total, std::to_string(ok) + "/" + std::to_string(total) + " shapes bit-exact"};
}

CheckResult shape_contract(std::uint64_t seed) {
  ModelConfig cfg;
  cfg.init_filters = 4;
  auto params = build<float>(cfg, derive_seed(seed, 5));
  Tensor<float> x(Shape5{2, 11, 4, 48, 48});
  Rng rng(derive_seed(seed, 6));
  for (auto& v : x.data()) v = static_cast<float>(rng.uniform(-1, 1));
  auto [early, fin] = predict(params, cfg, x);
  const Shape5 want{2, 1, 32, 8, 8};
  const bool ok = fin.shape() == want && early.shape() == want && cfg.output_shape(x.shape()) == want;
  return {"shape contract", ok, x.shape().str() + " -> " + fin.shape().str() + ", expected " + want.str()};
}

CheckResult loss_arithmetic() {
  auto scalar = [](double v) { return Tensor<double>(Shape5{}, {v}); };
  const TrainConfig cfg;
  const double a = bce_loss(scalar(std::log(9.0)), scalar(1), 1.0);
  const double b = bce_loss(scalar(0), scalar(1), 4.0);
  const double c = total_loss(scalar(std::log(std::exp(1.0) - 1)), scalar(std::log(std::exp(0.5) - 1)), scalar(0), cfg);
  const bool ok = std::abs(a - 0.10536) < 1e-5 && std::abs(b - 4 * std::log(2.0)) < 1e-5 && std::abs(c - 1.1) < 1e-5;
  char buf[160];
  std::snprintf(buf, sizeof buf, "-ln0.9 -> %.6f, 4ln2 -> %.6f, total(1.0, 0.5, a=0.2) -> %.6f", a, b, c);
  return {"loss arithmetic", ok, buf};
}

CheckResult efficiency_direction() {
  ModelConfig s32, s64;
  s32.init_filters = 32;
  s64.init_filters = 64;
  ModelConfig u32 = s32;
  u32.arch = Arch::UNet3D;
  const Count p32 = count_params(s32), p64 = count_params(s64), pu = count_params(u32);
  const double ratio = static_cast<double>(p64) / static_cast<double>(p32);
  bool fewer = true;
  for (std::int64_t f : {8, 16, 32, 64}) {
    ModelConfig a, b;
    a.init_filters = b.init_filters = f;
    b.arch = Arch::UNet3D;
    fewer = fewer && count_params(a) < count_params(b);
  }
  char buf[200];
  std::snprintf(buf, sizeof buf, "sianet f32 %llu < unet3d f32 %llu (widths 8..64: %s); f64/f32 = %.3f",
                static_cast<unsigned long long>(p32), static_cast<unsigned long long>(pu), fewer ? "all fewer" : "violated",
                ratio);
  return {"efficiency direction", fewer && p32 < pu && ratio >= 3.5 && ratio <= 4.5, buf};
}

std::vector<CheckResult> selftest(std::uint64_t seed) {
  std::vector<CheckResult> out = gradient_suite(seed);
  out.push_back(flops_closed_forms(seed));
  out.push_back(decomposition_oracle(seed));
  out.push_back(fold_round_trip(seed));
  out.push_back(shape_contract(seed));
  out.push_back(loss_arithmetic());
  out.push_back(efficiency_direction());
  return out;
}

}  // namespace stconv
