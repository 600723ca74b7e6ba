#pragma once

// Plain nested-loop kernels kept deliberately naive. They serve as oracles for
// the optimized engine and share no code with it.

#include <cstdint>

#include "stconv/conv.hpp"
#include "stconv/tensor.hpp"

namespace stconv::reference {

/// Direct 7-deep loop cross-correlation. When `macs` is given it is incremented
/// once per kernel tap visited, padded taps included.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const T* bias, const ConvSpec& spec,
                 std::uint64_t* macs = nullptr) {
  const Shape5& is = x.shape();
  const Shape5 os = spec.output_shape(is);
  const std::int64_t cg_in = spec.c_in / spec.groups;
  const std::int64_t cg_out = spec.c_out / spec.groups;
  Tensor<T> y(os);
  for (std::int64_t n = 0; n < os.n; ++n)
    for (std::int64_t o = 0; o < os.c; ++o)
      for (std::int64_t t = 0; t < os.t; ++t)
        for (std::int64_t h = 0; h < os.h; ++h)
          for (std::int64_t w = 0; w < os.w; ++w) {
            long double acc = bias ? bias[o] : T(0);
            for (std::int64_t i = 0; i < cg_in; ++i)
              for (std::int64_t a = 0; a < spec.kernel.t; ++a)
                for (std::int64_t b = 0; b < spec.kernel.h; ++b)
                  for (std::int64_t c = 0; c < spec.kernel.w; ++c) {
                    if (macs) ++*macs;
                    const std::int64_t it = t * spec.stride.t - spec.padding.t + a * spec.dilation.t;
                    const std::int64_t ih = h * spec.stride.h - spec.padding.h + b * spec.dilation.h;
                    const std::int64_t iw = w * spec.stride.w - spec.padding.w + c * spec.dilation.w;
                    if (it < 0 || it >= is.t || ih < 0 || ih >= is.h || iw < 0 || iw >= is.w) continue;
                    const std::int64_t ci = (o / cg_out) * cg_in + i;
                    acc += static_cast<long double>(weight.at(o, i, a, b, c)) * x.at(n, ci, it, ih, iw);
                  }
            y.at(n, o, t, h, w) = static_cast<T>(acc);
          }
  return y;
}

/// Row-major linear index computed by counting through nested loops.
inline std::int64_t counted_index(const Shape5& s, std::int64_t n, std::int64_t c, std::int64_t t,
                                  std::int64_t h, std::int64_t w) {
  std::int64_t k = 0;
  for (std::int64_t a = 0; a < s.n; ++a)
    for (std::int64_t b = 0; b < s.c; ++b)
      for (std::int64_t d = 0; d < s.t; ++d)
        for (std::int64_t e = 0; e < s.h; ++e)
          for (std::int64_t f = 0; f < s.w; ++f, ++k)
            if (a == n && b == c && d == t && e == h && f == w) return k;
  return -1;
}

}  // namespace stconv::reference
