#include "stconv/conv.hpp"

#include <algorithm>
#include <atomic>
#include <cstring>
#include <string>
#include <vector>

namespace stconv {

namespace testing {
namespace {
std::atomic<bool> g_corrupt_backward{false};
}
void set_corrupt_conv_backward(bool on) noexcept { g_corrupt_backward.store(on); }
bool corrupt_conv_backward() noexcept { return g_corrupt_backward.load(); }
}  // namespace testing

ConvSpec ConvSpec::same(std::int64_t c_in, std::int64_t c_out, Extent3 kernel, Extent3 dilation,
                        std::int64_t groups) {
  if (kernel.t % 2 == 0 || kernel.h % 2 == 0 || kernel.w % 2 == 0)
    throw ShapeError("same padding requires odd kernel extents");
  ConvSpec s;
  s.c_in = c_in;
  s.c_out = c_out;
  s.kernel = kernel;
  s.dilation = dilation;
  s.padding = {dilation.t * (kernel.t - 1) / 2, dilation.h * (kernel.h - 1) / 2, dilation.w * (kernel.w - 1) / 2};
  s.groups = groups;
  s.validate();
  return s;
}

void ConvSpec::validate() const {
  if (c_in < 1 || c_out < 1 || groups < 1) throw ShapeError("conv: channel counts and groups must be positive");
  if (c_in % groups != 0 || c_out % groups != 0)
    throw ShapeError("conv: c_in=" + std::to_string(c_in) + " and c_out=" + std::to_string(c_out) +
                     " must be divisible by groups=" + std::to_string(groups));
  for (const Extent3* e : {&kernel, &dilation, &stride})
    if (e->t < 1 || e->h < 1 || e->w < 1) throw ShapeError("conv: kernel, dilation and stride must be positive");
  if (padding.t < 0 || padding.h < 0 || padding.w < 0) throw ShapeError("conv: negative padding");
}

Shape5 ConvSpec::weight_shape() const { return Shape5{c_out, c_in / groups, kernel.t, kernel.h, kernel.w}; }

Shape5 ConvSpec::output_shape(const Shape5& in) const {
  validate();
  in.validate();
  if (in.c != c_in)
    throw ShapeError("conv: input " + in.str() + " has " + std::to_string(in.c) + " channels, spec expects " +
                     std::to_string(c_in));
  auto axis = [](std::int64_t n, std::int64_t k, std::int64_t d, std::int64_t s, std::int64_t p, const char* name) {
    const std::int64_t eff = 1 + (k - 1) * d;
    if (eff > n + 2 * p)
      throw ShapeError(std::string("conv: effective kernel extent ") + std::to_string(eff) + " exceeds padded " +
                       name + " extent " + std::to_string(n + 2 * p));
    return (n + 2 * p - eff) / s + 1;
  };
  return Shape5{in.n, c_out, axis(in.t, kernel.t, dilation.t, stride.t, padding.t, "T"),
                axis(in.h, kernel.h, dilation.h, stride.h, padding.h, "H"),
                axis(in.w, kernel.w, dilation.w, stride.w, padding.w, "W")};
}

namespace {

#if defined(__AVX512F__)
constexpr std::size_t kVecBytes = 64;
#else
constexpr std::size_t kVecBytes = 32;
#endif

template <typename T>
struct Simd {
  static constexpr int lanes = static_cast<int>(kVecBytes / sizeof(T));
#if defined(__GNUC__) || defined(__clang__)
  typedef T vec __attribute__((vector_size(kVecBytes)));
  static vec zero() { return vec{}; }
  static vec load(const T* p) {
    vec v;
    std::memcpy(&v, p, sizeof v);
    return v;
  }
  static void store(T* p, const vec& v) { std::memcpy(p, &v, sizeof v); }
  static vec splat(T s) { return vec{} + s; }
  static T hsum(const vec& v) {
    T s = 0;
    for (int i = 0; i < lanes; ++i) s += v[i];
    return s;
  }
#else
  struct vec {
    T v[lanes];
    vec& operator+=(const vec& o) {
      for (int i = 0; i < lanes; ++i) v[i] += o.v[i];
      return *this;
    }
    friend vec operator*(const vec& a, const vec& b) {
      vec r;
      for (int i = 0; i < lanes; ++i) r.v[i] = a.v[i] * b.v[i];
      return r;
    }
  };
  static vec zero() { return vec{}; }
  static vec load(const T* p) {
    vec v;
    std::memcpy(v.v, p, sizeof v.v);
    return v;
  }
  static void store(T* p, const vec& v) { std::memcpy(p, v.v, sizeof v.v); }
  static vec splat(T s) {
    vec v;
    for (int i = 0; i < lanes; ++i) v.v[i] = s;
    return v;
  }
  static T hsum(const vec& v) {
    T s = 0;
    for (int i = 0; i < lanes; ++i) s += v.v[i];
    return s;
  }
#endif
};

constexpr int kForwardUnroll = 2;

std::int64_t round_up(std::int64_t x, std::int64_t m) { return (x + m - 1) / m * m; }

// Zero-padded copy of x. Each (n, c) volume is tp*hp*wp contiguous, followed by
// `slack` zeros at the very end so vector loads may overrun the last row.
template <typename T>
struct Padded {
  std::vector<T> buf;
  std::int64_t channels = 0, tp = 0, hp = 0, wp = 0;
  std::int64_t plane() const { return hp * wp; }
  std::int64_t vol() const { return tp * hp * wp; }
  const T* channel(std::int64_t n, std::int64_t c) const { return buf.data() + (n * channels + c) * vol(); }
};

template <typename T>
Padded<T> pad_input(const Tensor<T>& x, const Extent3& p, std::int64_t slack) {
  const Shape5& s = x.shape();
  Padded<T> out;
  out.channels = s.c;
  out.tp = s.t + 2 * p.t;
  out.hp = s.h + 2 * p.h;
  out.wp = s.w + 2 * p.w;
  out.buf.assign(static_cast<std::size_t>(s.n * s.c * out.vol() + slack), T(0));
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < s.c; ++c) {
      T* dst = out.buf.data() + (n * s.c + c) * out.vol();
      for (std::int64_t t = 0; t < s.t; ++t)
        for (std::int64_t h = 0; h < s.h; ++h) {
          const T* src = &x.at(n, c, t, h, 0);
          std::copy(src, src + s.w, dst + ((t + p.t) * out.hp + (h + p.h)) * out.wp + p.w);
        }
    }
  return out;
}

// Register-blocked direct convolution over one tile of "wide" output rows.
// out[b * ld + j] = sum_tap w[tap * CB + b] * x[offs[tap] + j] for j < L (rounded up).
template <typename T, int CB>
void micro_forward(T* out, std::int64_t ld, const T* x, const std::int64_t* offs, const T* w, std::int64_t taps,
                   std::int64_t L) {
  using S = Simd<T>;
  using vec = typename S::vec;
  constexpr int V = S::lanes;
  constexpr int U = kForwardUnroll;
  for (std::int64_t j0 = 0; j0 < L; j0 += V * U) {
    vec acc[CB][U];
    for (int b = 0; b < CB; ++b)
      for (int u = 0; u < U; ++u) acc[b][u] = S::zero();
    for (std::int64_t tap = 0; tap < taps; ++tap) {
      const T* xs = x + offs[tap] + j0;
      vec xv[U];
      for (int u = 0; u < U; ++u) xv[u] = S::load(xs + u * V);
      const T* wt = w + tap * CB;
      for (int b = 0; b < CB; ++b) {
        const vec wb = S::splat(wt[b]);
        for (int u = 0; u < U; ++u) acc[b][u] += xv[u] * wb;
      }
    }
    for (int b = 0; b < CB; ++b)
      for (int u = 0; u < U; ++u) S::store(out + b * ld + j0 + u * V, acc[b][u]);
  }
}

struct ChannelBlock {
  std::int64_t n, g, co0, size;
};

std::vector<ChannelBlock> channel_blocks(std::int64_t batch, std::int64_t groups, std::int64_t per_group,
                                         std::int64_t max_block) {
  std::vector<ChannelBlock> blocks;
  for (std::int64_t n = 0; n < batch; ++n)
    for (std::int64_t g = 0; g < groups; ++g) {
      std::int64_t c = 0;
      while (c < per_group) {
        std::int64_t b = max_block;
        while (b > per_group - c) b /= 2;
        blocks.push_back({n, g, c, b});
        c += b;
      }
    }
  return blocks;
}

template <typename T>
void run_micro_forward(std::int64_t cb, T* out, std::int64_t ld, const T* x, const std::int64_t* offs, const T* w,
                       std::int64_t taps, std::int64_t L) {
  switch (cb) {
    case 8: micro_forward<T, 8>(out, ld, x, offs, w, taps, L); break;
    case 4: micro_forward<T, 4>(out, ld, x, offs, w, taps, L); break;
    case 2: micro_forward<T, 2>(out, ld, x, offs, w, taps, L); break;
    default: micro_forward<T, 1>(out, ld, x, offs, w, taps, L); break;
  }
}

bool unit_stride(const ConvSpec& s) { return s.stride.t == 1 && s.stride.h == 1 && s.stride.w == 1; }

// Stride-1 forward through the padded wide-row layout.
template <typename T>
Tensor<T> forward_fast(const Tensor<T>& x, const Tensor<T>& weight, std::span<const T> bias, const ConvSpec& spec,
                       const Shape5& os) {
  using S = Simd<T>;
  constexpr std::int64_t chunk = S::lanes * kForwardUnroll;
  const Padded<T> xp = pad_input(x, spec.padding, chunk);
  const std::int64_t cg_in = spec.c_in / spec.groups, cg_out = spec.c_out / spec.groups;
  const Extent3 k = spec.kernel, d = spec.dilation;
  const std::int64_t taps = cg_in * k.volume();

  std::vector<std::int64_t> offs;
  offs.reserve(static_cast<std::size_t>(taps));
  for (std::int64_t ci = 0; ci < cg_in; ++ci)
    for (std::int64_t a = 0; a < k.t; ++a)
      for (std::int64_t b = 0; b < k.h; ++b)
        for (std::int64_t c = 0; c < k.w; ++c)
          offs.push_back(ci * xp.vol() + a * d.t * xp.plane() + b * d.h * xp.wp + c * d.w);

  const std::int64_t rows_per_tile = std::clamp<std::int64_t>(512 / xp.wp, 1, os.h);
  const std::int64_t ld = round_up((rows_per_tile - 1) * xp.wp + os.w, chunk);
  constexpr std::int64_t kMaxBlock = 8;
  const auto blocks = channel_blocks(os.n, spec.groups, cg_out, kMaxBlock);

  // Weights packed as [co_block][tap][b] so the microkernel reads them linearly.
  std::vector<T> packed(static_cast<std::size_t>(spec.c_out * taps));
  for (std::int64_t g = 0; g < spec.groups; ++g) {
    std::int64_t c = 0;
    while (c < cg_out) {
      std::int64_t bs = kMaxBlock;
      while (bs > cg_out - c) bs /= 2;
      const std::int64_t co0 = g * cg_out + c;
      T* dst = packed.data() + co0 * taps;
      for (std::int64_t tap = 0; tap < taps; ++tap)
        for (std::int64_t b = 0; b < bs; ++b) dst[tap * bs + b] = weight[(co0 + b) * taps + tap];
      c += bs;
    }
  }

  Tensor<T> out(os);
  const auto nblocks = static_cast<std::int64_t>(blocks.size());
#pragma omp parallel
  {
    std::vector<T> wide(static_cast<std::size_t>(kMaxBlock * ld));
#pragma omp for schedule(static)
    for (std::int64_t bi = 0; bi < nblocks; ++bi) {
      const ChannelBlock& blk = blocks[static_cast<std::size_t>(bi)];
      const std::int64_t co0 = blk.g * cg_out + blk.co0;
      const T* wpk = packed.data() + co0 * taps;
      for (std::int64_t ot = 0; ot < os.t; ++ot)
        for (std::int64_t oh0 = 0; oh0 < os.h; oh0 += rows_per_tile) {
          const std::int64_t rows = std::min(rows_per_tile, os.h - oh0);
          const std::int64_t L = (rows - 1) * xp.wp + os.w;
          const T* base = xp.channel(blk.n, blk.g * cg_in) + ot * xp.plane() + oh0 * xp.wp;
          run_micro_forward<T>(blk.size, wide.data(), ld, base, offs.data(), wpk, taps, L);
          for (std::int64_t b = 0; b < blk.size; ++b) {
            const T bv = bias.empty() ? T(0) : bias[static_cast<std::size_t>(co0 + b)];
            for (std::int64_t r = 0; r < rows; ++r) {
              const T* src = wide.data() + b * ld + r * xp.wp;
              T* dst = &out.at(blk.n, co0 + b, ot, oh0 + r, 0);
              for (std::int64_t w = 0; w < os.w; ++w) dst[w] = src[w] + bv;
            }
          }
        }
    }
  }
  return out;
}

template <typename T>
Tensor<T> forward_generic(const Tensor<T>& x, const Tensor<T>& weight, std::span<const T> bias, const ConvSpec& spec,
                          const Shape5& os) {
  const Shape5& is = x.shape();
  const std::int64_t cg_in = spec.c_in / spec.groups, cg_out = spec.c_out / spec.groups;
  const Extent3 k = spec.kernel, d = spec.dilation, st = spec.stride, p = spec.padding;
  Tensor<T> out(os);
#pragma omp parallel for collapse(2) schedule(static)
  for (std::int64_t n = 0; n < os.n; ++n)
    for (std::int64_t co = 0; co < os.c; ++co) {
      const std::int64_t g = co / cg_out;
      for (std::int64_t ot = 0; ot < os.t; ++ot)
        for (std::int64_t oh = 0; oh < os.h; ++oh)
          for (std::int64_t ow = 0; ow < os.w; ++ow) {
            T acc = bias.empty() ? T(0) : bias[static_cast<std::size_t>(co)];
            for (std::int64_t ci = 0; ci < cg_in; ++ci)
              for (std::int64_t a = 0; a < k.t; ++a) {
                const std::int64_t it = ot * st.t - p.t + a * d.t;
                if (it < 0 || it >= is.t) continue;
                for (std::int64_t b = 0; b < k.h; ++b) {
                  const std::int64_t ih = oh * st.h - p.h + b * d.h;
                  if (ih < 0 || ih >= is.h) continue;
                  for (std::int64_t c = 0; c < k.w; ++c) {
                    const std::int64_t iw = ow * st.w - p.w + c * d.w;
                    if (iw < 0 || iw >= is.w) continue;
                    acc += weight.at(co, ci, a, b, c) * x.at(n, g * cg_in + ci, it, ih, iw);
                  }
                }
              }
            out.at(n, co, ot, oh, ow) = acc;
          }
    }
  return out;
}

template <typename T>
Tensor<T> backward_input_generic(const Tensor<T>& gy, const Tensor<T>& weight, const ConvSpec& spec,
                                 const Shape5& is) {
  const Shape5& os = gy.shape();
  const std::int64_t cg_in = spec.c_in / spec.groups, cg_out = spec.c_out / spec.groups;
  const Extent3 k = spec.kernel, d = spec.dilation, st = spec.stride, p = spec.padding;
  Tensor<T> gx(is);
  // Transpose of forward_generic: each (n, ci) slab is written by one iteration.
#pragma omp parallel for collapse(2) schedule(static)
  for (std::int64_t n = 0; n < is.n; ++n)
    for (std::int64_t cin = 0; cin < is.c; ++cin) {
      const std::int64_t g = cin / cg_in, ci = cin % cg_in;
      for (std::int64_t col = 0; col < cg_out; ++col) {
        const std::int64_t co = g * cg_out + col;
        for (std::int64_t ot = 0; ot < os.t; ++ot)
          for (std::int64_t oh = 0; oh < os.h; ++oh)
            for (std::int64_t ow = 0; ow < os.w; ++ow) {
              const T gv = gy.at(n, co, ot, oh, ow);
              for (std::int64_t a = 0; a < k.t; ++a) {
                const std::int64_t it = ot * st.t - p.t + a * d.t;
                if (it < 0 || it >= is.t) continue;
                for (std::int64_t b = 0; b < k.h; ++b) {
                  const std::int64_t ih = oh * st.h - p.h + b * d.h;
                  if (ih < 0 || ih >= is.h) continue;
                  for (std::int64_t c = 0; c < k.w; ++c) {
                    const std::int64_t iw = ow * st.w - p.w + c * d.w;
                    if (iw < 0 || iw >= is.w) continue;
                    gx.at(n, cin, it, ih, iw) += weight.at(co, ci, a, b, c) * gv;
                  }
                }
              }
            }
      }
    }
  return gx;
}

template <typename T>
void backward_weight_generic(const Tensor<T>& gy, const Tensor<T>& x, const ConvSpec& spec, Tensor<T>& gw) {
  const Shape5& os = gy.shape();
  const Shape5& is = x.shape();
  const std::int64_t cg_in = spec.c_in / spec.groups, cg_out = spec.c_out / spec.groups;
  const Extent3 k = spec.kernel, d = spec.dilation, st = spec.stride, p = spec.padding;
#pragma omp parallel for schedule(static)
  for (std::int64_t co = 0; co < spec.c_out; ++co) {
    const std::int64_t g = co / cg_out;
    for (std::int64_t ci = 0; ci < cg_in; ++ci)
      for (std::int64_t a = 0; a < k.t; ++a)
        for (std::int64_t b = 0; b < k.h; ++b)
          for (std::int64_t c = 0; c < k.w; ++c) {
            T acc = 0;
            for (std::int64_t n = 0; n < os.n; ++n)
              for (std::int64_t ot = 0; ot < os.t; ++ot) {
                const std::int64_t it = ot * st.t - p.t + a * d.t;
                if (it < 0 || it >= is.t) continue;
                for (std::int64_t oh = 0; oh < os.h; ++oh) {
                  const std::int64_t ih = oh * st.h - p.h + b * d.h;
                  if (ih < 0 || ih >= is.h) continue;
                  for (std::int64_t ow = 0; ow < os.w; ++ow) {
                    const std::int64_t iw = ow * st.w - p.w + c * d.w;
                    if (iw < 0 || iw >= is.w) continue;
                    acc += gy.at(n, co, ot, oh, ow) * x.at(n, g * cg_in + ci, it, ih, iw);
                  }
                }
              }
            gw.at(co, ci, a, b, c) += acc;
          }
  }
}

// dW[co, ci, tap] = sum_j gy_wide[co, j] * x_padded[ci, off(tap) + j], blocked CB x TB.
template <typename T, int CB>
void micro_weight(const T* const* gy_rows, const T* x, const std::int64_t* toffs, std::int64_t L, T (*acc_out)[4]) {
  using S = Simd<T>;
  using vec = typename S::vec;
  constexpr int V = S::lanes;
  constexpr int TB = 4;
  vec acc[CB][TB];
  for (int b = 0; b < CB; ++b)
    for (int t = 0; t < TB; ++t) acc[b][t] = S::zero();
  for (std::int64_t j0 = 0; j0 < L; j0 += V) {
    vec gv[CB];
    for (int b = 0; b < CB; ++b) gv[b] = S::load(gy_rows[b] + j0);
    for (int t = 0; t < TB; ++t) {
      const vec xv = S::load(x + toffs[t] + j0);
      for (int b = 0; b < CB; ++b) acc[b][t] += gv[b] * xv;
    }
  }
  for (int b = 0; b < CB; ++b)
    for (int t = 0; t < TB; ++t) acc_out[b][t] += S::hsum(acc[b][t]);
}

template <typename T>
void backward_weight_fast(const Tensor<T>& gy, const Tensor<T>& x, const ConvSpec& spec, Tensor<T>& gw) {
  using S = Simd<T>;
  constexpr std::int64_t V = S::lanes;
  const Shape5& os = gy.shape();
  const Padded<T> xp = pad_input(x, spec.padding, 2 * V);
  const std::int64_t cg_in = spec.c_in / spec.groups, cg_out = spec.c_out / spec.groups;
  const Extent3 k = spec.kernel, d = spec.dilation;
  const std::int64_t kvol = k.volume();
  const std::int64_t L = round_up((os.h - 1) * xp.wp + os.w, V);

  // Output gradient re-laid on the padded row pitch; the gap columns stay zero.
  std::vector<T> wide(static_cast<std::size_t>(os.n * os.c * os.t * L), T(0));
  for (std::int64_t n = 0; n < os.n; ++n)
    for (std::int64_t c = 0; c < os.c; ++c)
      for (std::int64_t t = 0; t < os.t; ++t) {
        T* dst = wide.data() + ((n * os.c + c) * os.t + t) * L;
        for (std::int64_t h = 0; h < os.h; ++h) {
          const T* src = &gy.at(n, c, t, h, 0);
          std::copy(src, src + os.w, dst + h * xp.wp);
        }
      }

  const std::int64_t padded_taps = round_up(kvol, 4);
  std::vector<std::int64_t> toffs(static_cast<std::size_t>(padded_taps), 0);
  for (std::int64_t a = 0, i = 0; a < k.t; ++a)
    for (std::int64_t b = 0; b < k.h; ++b)
      for (std::int64_t c = 0; c < k.w; ++c, ++i)
        toffs[static_cast<std::size_t>(i)] = a * d.t * xp.plane() + b * d.h * xp.wp + c * d.w;

  constexpr std::int64_t kMaxBlock = 4;
  const auto blocks = channel_blocks(1, spec.groups, cg_out, kMaxBlock);
  const auto nblocks = static_cast<std::int64_t>(blocks.size());
#pragma omp parallel for schedule(static)
  for (std::int64_t bi = 0; bi < nblocks; ++bi) {
    const ChannelBlock& blk = blocks[static_cast<std::size_t>(bi)];
    const std::int64_t co0 = blk.g * cg_out + blk.co0;
    for (std::int64_t ci = 0; ci < cg_in; ++ci)
      for (std::int64_t t0 = 0; t0 < padded_taps; t0 += 4) {
        T acc[kMaxBlock][4] = {};
        for (std::int64_t n = 0; n < os.n; ++n)
          for (std::int64_t ot = 0; ot < os.t; ++ot) {
            const T* rows[kMaxBlock];
            for (std::int64_t b = 0; b < blk.size; ++b)
              rows[b] = wide.data() + ((n * os.c + co0 + b) * os.t + ot) * L;
            const T* xb = xp.channel(n, blk.g * cg_in + ci) + ot * xp.plane();
            const std::int64_t* to = toffs.data() + t0;
            switch (blk.size) {
              case 4: micro_weight<T, 4>(rows, xb, to, L, acc); break;
              case 2: micro_weight<T, 2>(rows, xb, to, L, acc); break;
              default: micro_weight<T, 1>(rows, xb, to, L, acc); break;
            }
          }
        for (std::int64_t b = 0; b < blk.size; ++b)
          for (std::int64_t t = 0; t < 4 && t0 + t < kvol; ++t)
            gw[((co0 + b) * cg_in + ci) * kvol + t0 + t] += acc[b][t];
      }
  }
}

bool transposable(const ConvSpec& s) {
  return unit_stride(s) && s.padding.t <= s.dilation.t * (s.kernel.t - 1) &&
         s.padding.h <= s.dilation.h * (s.kernel.h - 1) && s.padding.w <= s.dilation.w * (s.kernel.w - 1);
}

}  // namespace

template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& x, const Tensor<T>& weight, std::span<const T> bias, const ConvSpec& spec) {
  const Shape5 os = spec.output_shape(x.shape());
  if (!(weight.shape() == spec.weight_shape()))
    throw ShapeError("conv: weight " + weight.shape().str() + " does not match spec " + spec.weight_shape().str());
  if (!bias.empty() && static_cast<std::int64_t>(bias.size()) != spec.c_out)
    throw ShapeError("conv: bias has " + std::to_string(bias.size()) + " entries, expected " +
                     std::to_string(spec.c_out));
  Tensor<T> out = unit_stride(spec) ? forward_fast(x, weight, bias, spec, os) : forward_generic(x, weight, bias, spec, os);
  ensure_finite(out, "conv3d_forward");
  return out;
}

template <typename T>
Tensor<T> conv3d_backward_input(const Tensor<T>& grad_out, const Tensor<T>& weight, const ConvSpec& spec,
                                const Shape5& input_shape) {
  const Shape5 os = spec.output_shape(input_shape);
  require_same_shape(grad_out.shape(), os, "conv3d_backward_input");
  if (!transposable(spec)) return backward_input_generic(grad_out, weight, spec, input_shape);

  // Stride 1: the input gradient is a full correlation of grad_out with the
  // spatially flipped, group-transposed kernel.
  ConvSpec tspec = spec;
  tspec.c_in = spec.c_out;
  tspec.c_out = spec.c_in;
  tspec.padding = {spec.dilation.t * (spec.kernel.t - 1) - spec.padding.t,
                   spec.dilation.h * (spec.kernel.h - 1) - spec.padding.h,
                   spec.dilation.w * (spec.kernel.w - 1) - spec.padding.w};
  const std::int64_t cg_in = spec.c_in / spec.groups, cg_out = spec.c_out / spec.groups;
  const Extent3 k = spec.kernel;
  Tensor<T> wt(tspec.weight_shape());
  for (std::int64_t g = 0; g < spec.groups; ++g)
    for (std::int64_t col = 0; col < cg_out; ++col)
      for (std::int64_t ci = 0; ci < cg_in; ++ci)
        for (std::int64_t a = 0; a < k.t; ++a)
          for (std::int64_t b = 0; b < k.h; ++b)
            for (std::int64_t c = 0; c < k.w; ++c)
              wt.at(g * cg_in + ci, col, k.t - 1 - a, k.h - 1 - b, k.w - 1 - c) =
                  weight.at(g * cg_out + col, ci, a, b, c);
  const Shape5 gs = tspec.output_shape(grad_out.shape());
  if (!(gs == input_shape)) return backward_input_generic(grad_out, weight, spec, input_shape);
  return forward_fast(grad_out, wt, std::span<const T>{}, tspec, gs);
}

template <typename T>
void conv3d_backward_weight(const Tensor<T>& grad_out, const Tensor<T>& x, const ConvSpec& spec,
                            Tensor<T>& grad_weight, std::span<T> grad_bias) {
  const Shape5 os = spec.output_shape(x.shape());
  require_same_shape(grad_out.shape(), os, "conv3d_backward_weight");
  require_same_shape(grad_weight.shape(), spec.weight_shape(), "conv3d_backward_weight");
  if (!grad_bias.empty() && static_cast<std::int64_t>(grad_bias.size()) != spec.c_out)
    throw ShapeError("conv3d_backward_weight: bias gradient size mismatch");

  const bool corrupt = testing::corrupt_conv_backward();
  Tensor<T> local(grad_weight.shape());
  if (unit_stride(spec))
    backward_weight_fast(grad_out, x, spec, local);
  else
    backward_weight_generic(grad_out, x, spec, local);
  axpy_inplace(grad_weight, corrupt ? T(1.5) : T(1), local);

  if (!grad_bias.empty()) {
    const std::int64_t vol = os.t * os.h * os.w;
    for (std::int64_t co = 0; co < os.c; ++co) {
      T acc = 0;
      for (std::int64_t n = 0; n < os.n; ++n) {
        const T* p = &grad_out.at(n, co, 0, 0, 0);
        for (std::int64_t i = 0; i < vol; ++i) acc += p[i];
      }
      grad_bias[static_cast<std::size_t>(co)] += acc;
    }
  }
}

ConvSpec spatial_spec(const Shape5& x, const Shape5& weight, std::int64_t dilation, Padding padding) {
  if (weight.t != 1) throw ShapeError("spatial_conv: kernel must have temporal extent 1, got " + weight.str());
  if (weight.c < 1 || x.c % weight.c != 0) throw ShapeError("spatial_conv: channel mismatch " + x.str() + " / " + weight.str());
  const Extent3 k{1, weight.h, weight.w};
  const Extent3 d{1, dilation, dilation};
  const std::int64_t groups = x.c / weight.c;
  if (padding == Padding::Same) return ConvSpec::same(x.c, weight.n, k, d, groups);
  ConvSpec s{x.c, weight.n, k, d, {1, 1, 1}, {0, 0, 0}, groups};
  s.validate();
  return s;
}

ConvSpec temporal_spec(const Shape5& x, const Shape5& weight, std::int64_t dilation, Padding padding) {
  if (weight.h != 1 || weight.w != 1)
    throw ShapeError("temporal_conv: kernel must be k_t x 1 x 1, got " + weight.str());
  if (weight.c < 1 || x.c % weight.c != 0) throw ShapeError("temporal_conv: channel mismatch " + x.str() + " / " + weight.str());
  const Extent3 k{weight.t, 1, 1};
  const Extent3 d{dilation, 1, 1};
  const std::int64_t groups = x.c / weight.c;
  if (padding == Padding::Same) return ConvSpec::same(x.c, weight.n, k, d, groups);
  ConvSpec s{x.c, weight.n, k, d, {1, 1, 1}, {0, 0, 0}, groups};
  s.validate();
  return s;
}

template <typename T>
Tensor<T> spatial_conv(const Tensor<T>& x, const Tensor<T>& weight, std::span<const T> bias, std::int64_t dilation,
                       Padding padding) {
  return conv3d_forward(x, weight, bias, spatial_spec(x.shape(), weight.shape(), dilation, padding));
}

template <typename T>
Tensor<T> temporal_conv(const Tensor<T>& x, const Tensor<T>& weight, std::span<const T> bias, std::int64_t dilation,
                        Padding padding) {
  return conv3d_forward(x, weight, bias, temporal_spec(x.shape(), weight.shape(), dilation, padding));
}

#define STCONV_INSTANTIATE(T)                                                                                   \
  template Tensor<T> conv3d_forward(const Tensor<T>&, const Tensor<T>&, std::span<const T>, const ConvSpec&);  \
  template Tensor<T> conv3d_backward_input(const Tensor<T>&, const Tensor<T>&, const ConvSpec&, const Shape5&); \
  template void conv3d_backward_weight(const Tensor<T>&, const Tensor<T>&, const ConvSpec&, Tensor<T>&,        \
                                       std::span<T>);                                                           \
  template Tensor<T> spatial_conv(const Tensor<T>&, const Tensor<T>&, std::span<const T>, std::int64_t, Padding); \
  template Tensor<T> temporal_conv(const Tensor<T>&, const Tensor<T>&, std::span<const T>, std::int64_t, Padding);

STCONV_INSTANTIATE(float)
STCONV_INSTANTIATE(double)
#undef STCONV_INSTANTIATE

}  // namespace stconv
