#include "stconv/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "stconv/rng.hpp"

namespace stconv {

void Shape5::validate() const {
  std::int64_t total = 1;
  for (std::int64_t d : dims()) {
    if (d < 1) throw ShapeError("shape " + str() + " has a non-positive extent");
    if (total > std::numeric_limits<std::int64_t>::max() / d)
      throw ShapeError("shape " + str() + " overflows the index range");
    total *= d;
  }
}

std::int64_t Shape5::numel() const {
  validate();
  return n * c * t * h * w;
}

std::int64_t Shape5::extent(Axis axis) const noexcept {
  switch (axis) {
    case Axis::N: return n;
    case Axis::C: return c;
    case Axis::T: return t;
    case Axis::H: return h;
    case Axis::W: return w;
  }
  return 0;
}

std::string Shape5::str() const {
  std::ostringstream os;
  os << '(' << n << ',' << c << ',' << t << ',' << h << ',' << w << ')';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape5 shape) : shape_(shape), data_(static_cast<std::size_t>(shape.numel()), T(0)) {}

template <typename T>
Tensor<T>::Tensor(Shape5 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
  if (static_cast<std::int64_t>(data_.size()) != shape_.numel())
    throw ShapeError("buffer of " + std::to_string(data_.size()) + " elements does not match shape " +
                     shape_.str());
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape5 shape, T value) {
  Tensor out(shape);
  out.fill(value);
  return out;
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& x) {
  std::vector<To> out(x.data().begin(), x.data().end());
  return Tensor<To>(x.shape(), std::move(out));
}

template <typename T>
bool all_finite(const Tensor<T>& x) noexcept {
  for (T v : x.data())
    if (!std::isfinite(v)) return false;
  return true;
}

template <typename T>
void ensure_finite(const Tensor<T>& x, std::string_view op) {
  const auto d = x.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!std::isfinite(d[i]))
      throw NonFiniteError(std::string(op) + ": non-finite value at flat index " + std::to_string(i) +
                           " of tensor " + x.shape().str());
  }
}

void require_same_shape(const Shape5& a, const Shape5& b, std::string_view op) {
  if (!(a == b))
    throw ShapeError(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
}

template <typename T>
Tensor<T> elementwise(BinaryOp op, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "elementwise");
  Tensor<T> out(a.shape());
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* po = out.ptr();
  const std::int64_t n = a.numel();
  switch (op) {
    case BinaryOp::Add:
      for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
      break;
    case BinaryOp::Sub:
      for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
      break;
    case BinaryOp::Mul:
      for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
      break;
  }
  ensure_finite(out, "elementwise");
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(BinaryOp::Add, a, b);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(BinaryOp::Sub, a, b);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(BinaryOp::Mul, a, b);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  const T* pa = a.ptr();
  T* po = out.ptr();
  for (std::int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] * s;
  ensure_finite(out, "scale");
  return out;
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  if (lo > hi) throw Error("clamp: lo > hi");
  Tensor<T> out(a.shape());
  const T* pa = a.ptr();
  T* po = out.ptr();
  for (std::int64_t i = 0; i < a.numel(); ++i) po[i] = std::clamp(pa[i], lo, hi);
  ensure_finite(out, "clamp");
  return out;
}

template <typename T>
void axpy_inplace(Tensor<T>& a, T s, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "axpy");
  T* pa = a.ptr();
  const T* pb = b.ptr();
  for (std::int64_t i = 0; i < a.numel(); ++i) pa[i] += s * pb[i];
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* px = x.ptr();
  T* po = out.ptr();
  for (std::int64_t i = 0; i < x.numel(); ++i) po[i] = px[i] > T(0) ? px[i] : T(0);
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* px = x.ptr();
  T* po = out.ptr();
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const T v = px[i];
    // Branch on sign so exp never overflows.
    if (v >= T(0)) {
      po[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      po[i] = e / (T(1) + e);
    }
  }
  ensure_finite(out, "sigmoid");
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, Axis axis) {
  if (axis != Axis::C && axis != Axis::T) throw ShapeError("softmax: axis must be C or T");
  const Shape5& s = x.shape();
  // View as (outer, len, inner); the softmax runs over `len` with stride `inner`.
  const std::int64_t len = axis == Axis::C ? s.c : s.t;
  const std::int64_t inner = axis == Axis::C ? s.t * s.h * s.w : s.h * s.w;
  const std::int64_t outer = x.numel() / (len * inner);
  Tensor<T> out(s);
  const T* px = x.ptr();
  T* po = out.ptr();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * len * inner + i;
      T mx = px[base];
      for (std::int64_t k = 1; k < len; ++k) mx = std::max(mx, px[base + k * inner]);
      T total = 0;
      for (std::int64_t k = 0; k < len; ++k) {
        const T e = std::exp(px[base + k * inner] - mx);
        po[base + k * inner] = e;
        total += e;
      }
      const T inv = T(1) / total;
      for (std::int64_t k = 0; k < len; ++k) po[base + k * inner] *= inv;
    }
  }
  ensure_finite(out, "softmax");
  return out;
}

template <typename T>
Tensor<T> dropout_mask(Shape5 shape, double rate, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate < 1.0)) throw Error("dropout: rate must lie in [0, 1)");
  Tensor<T> mask(shape);
  const T keep = static_cast<T>(1.0 / (1.0 - rate));
  Rng rng(seed);
  for (auto& m : mask.data()) m = rng.uniform() < rate ? T(0) : keep;
  return mask;
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Mode mode, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate < 1.0)) throw Error("dropout: rate must lie in [0, 1)");
  if (mode == Mode::Eval || rate == 0.0) return x;
  return mul(x, dropout_mask<T>(x.shape(), rate, seed));
}

template <typename T>
Tensor<T> crop_center_spatial(const Tensor<T>& x, std::int64_t factor) {
  const Shape5& s = x.shape();
  if (factor < 1) throw ShapeError("crop: factor must be positive");
  if (s.h % factor != 0 || s.w % factor != 0)
    throw ShapeError("crop: extents " + s.str() + " not divisible by factor " + std::to_string(factor));
  const std::int64_t ch = s.h / factor, cw = s.w / factor;
  const std::int64_t oh = (s.h - ch) / 2, ow = (s.w - cw) / 2;
  Tensor<T> out(Shape5{s.n, s.c, s.t, ch, cw});
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < s.c; ++c)
      for (std::int64_t t = 0; t < s.t; ++t)
        for (std::int64_t h = 0; h < ch; ++h) {
          const T* src = &x.at(n, c, t, h + oh, ow);
          std::copy(src, src + cw, &out.at(n, c, t, h, 0));
        }
  return out;
}

template <typename T>
Tensor<T> embed_center_spatial(const Tensor<T>& x, std::int64_t factor) {
  if (factor < 1) throw ShapeError("embed: factor must be positive");
  const Shape5& s = x.shape();
  const std::int64_t fh = s.h * factor, fw = s.w * factor;
  const std::int64_t oh = (fh - s.h) / 2, ow = (fw - s.w) / 2;
  Tensor<T> out(Shape5{s.n, s.c, s.t, fh, fw});
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < s.c; ++c)
      for (std::int64_t t = 0; t < s.t; ++t)
        for (std::int64_t h = 0; h < s.h; ++h) {
          const T* src = &x.at(n, c, t, h, 0);
          std::copy(src, src + s.w, &out.at(n, c, t, h + oh, ow));
        }
  return out;
}

template <typename T>
Tensor<T> fold_channels_into_time(const Tensor<T>& x) {
  const Shape5& s = x.shape();
  Tensor<T> out(Shape5{s.n, 1, s.c * s.t, s.h, s.w});
  const std::int64_t plane = s.h * s.w;
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < s.c; ++c)
      for (std::int64_t t = 0; t < s.t; ++t) {
        const T* src = &x.at(n, c, t, 0, 0);
        std::copy(src, src + plane, &out.at(n, 0, t * s.c + c, 0, 0));
      }
  return out;
}

template <typename T>
Tensor<T> unfold_time_into_channels(const Tensor<T>& x, std::int64_t channels) {
  const Shape5& s = x.shape();
  if (s.c != 1) throw ShapeError("unfold: expected a single channel, got " + s.str());
  if (channels < 1 || s.t % channels != 0)
    throw ShapeError("unfold: time extent " + std::to_string(s.t) + " not divisible by " +
                     std::to_string(channels));
  const std::int64_t frames = s.t / channels;
  Tensor<T> out(Shape5{s.n, channels, frames, s.h, s.w});
  const std::int64_t plane = s.h * s.w;
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < channels; ++c)
      for (std::int64_t t = 0; t < frames; ++t) {
        const T* src = &x.at(n, 0, t * channels + c, 0, 0);
        std::copy(src, src + plane, &out.at(n, c, t, 0, 0));
      }
  return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::int64_t begin, std::int64_t count) {
  const Shape5& s = x.shape();
  if (begin < 0 || count < 1 || begin + count > s.c)
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") outside " + s.str());
  Tensor<T> out(Shape5{s.n, count, s.t, s.h, s.w});
  const std::int64_t vol = s.t * s.h * s.w;
  for (std::int64_t n = 0; n < s.n; ++n) {
    const T* src = &x.at(n, begin, 0, 0, 0);
    std::copy(src, src + count * vol, &out.at(n, 0, 0, 0, 0));
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  Shape5 s = parts[0].shape();
  std::int64_t total_c = 0;
  for (const auto& p : parts) {
    const Shape5& q = p.shape();
    if (q.n != s.n || q.t != s.t || q.h != s.h || q.w != s.w)
      throw ShapeError("concat_channels: incompatible shapes " + s.str() + " and " + q.str());
    total_c += q.c;
  }
  s.c = total_c;
  Tensor<T> out(s);
  const std::int64_t vol = s.t * s.h * s.w;
  for (std::int64_t n = 0; n < s.n; ++n) {
    std::int64_t offset = 0;
    for (const auto& p : parts) {
      const T* src = &p.at(n, 0, 0, 0, 0);
      std::copy(src, src + p.shape().c * vol, &out.at(n, offset, 0, 0, 0));
      offset += p.shape().c;
    }
  }
  return out;
}

template <typename T>
Tensor<T> slice_batch(const Tensor<T>& x, std::int64_t begin, std::int64_t count) {
  const Shape5& s = x.shape();
  if (begin < 0 || count < 1 || begin + count > s.n)
    throw ShapeError("slice_batch: range outside " + s.str());
  Shape5 os = s;
  os.n = count;
  const std::int64_t per = s.c * s.t * s.h * s.w;
  std::vector<T> data(x.data().begin() + begin * per, x.data().begin() + (begin + count) * per);
  return Tensor<T>(os, std::move(data));
}

template <typename T>
Tensor<T> concat_batch(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_batch: no inputs");
  Shape5 s = parts[0].shape();
  std::int64_t total_n = 0;
  for (const auto& p : parts) {
    Shape5 q = p.shape();
    q.n = s.n;
    if (!(q == s)) throw ShapeError("concat_batch: incompatible shapes " + s.str() + " and " + p.shape().str());
    total_n += p.shape().n;
  }
  s.n = total_n;
  std::vector<T> data;
  data.reserve(static_cast<std::size_t>(s.numel()));
  for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
  return Tensor<T>(s, std::move(data));
}

template <typename T>
Tensor<T> max_pool_spatial2(const Tensor<T>& x, std::vector<std::int64_t>* argmax) {
  const Shape5& s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) throw ShapeError("max_pool: odd spatial extent in " + s.str());
  Tensor<T> out(Shape5{s.n, s.c, s.t, s.h / 2, s.w / 2});
  if (argmax) argmax->assign(static_cast<std::size_t>(out.numel()), 0);
  std::int64_t o = 0;
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < s.c; ++c)
      for (std::int64_t t = 0; t < s.t; ++t)
        for (std::int64_t h = 0; h < s.h / 2; ++h)
          for (std::int64_t w = 0; w < s.w / 2; ++w, ++o) {
            std::int64_t best = s.index(n, c, t, 2 * h, 2 * w);
            for (std::int64_t dh = 0; dh < 2; ++dh)
              for (std::int64_t dw = 0; dw < 2; ++dw) {
                const std::int64_t idx = s.index(n, c, t, 2 * h + dh, 2 * w + dw);
                if (x[idx] > x[best]) best = idx;
              }
            out[o] = x[best];
            if (argmax) (*argmax)[static_cast<std::size_t>(o)] = best;
          }
  return out;
}

template <typename T>
Tensor<T> upsample_nearest_spatial2(const Tensor<T>& x) {
  const Shape5& s = x.shape();
  Tensor<T> out(Shape5{s.n, s.c, s.t, s.h * 2, s.w * 2});
  const std::int64_t planes = s.n * s.c * s.t;
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* src = x.ptr() + p * s.h * s.w;
    T* dst = out.ptr() + p * 4 * s.h * s.w;
    for (std::int64_t h = 0; h < 2 * s.h; ++h)
      for (std::int64_t w = 0; w < 2 * s.w; ++w) dst[h * 2 * s.w + w] = src[(h / 2) * s.w + w / 2];
  }
  return out;
}

template <typename T>
Tensor<T> upsample_nearest_spatial2_adjoint(const Tensor<T>& g) {
  const Shape5& s = g.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) throw ShapeError("upsample adjoint: odd spatial extent in " + s.str());
  const std::int64_t oh = s.h / 2, ow = s.w / 2;
  Tensor<T> out(Shape5{s.n, s.c, s.t, oh, ow});
  const std::int64_t planes = s.n * s.c * s.t;
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* src = g.ptr() + p * s.h * s.w;
    T* dst = out.ptr() + p * oh * ow;
    for (std::int64_t h = 0; h < s.h; ++h)
      for (std::int64_t w = 0; w < s.w; ++w) dst[(h / 2) * ow + w / 2] += src[h * s.w + w];
  }
  return out;
}

template <typename T>
T sum(const Tensor<T>& x) {
  double total = 0.0;
  for (T v : x.data()) total += static_cast<double>(v);
  return static_cast<T>(total);
}

#define STCONV_INSTANTIATE(T)                                                               \
  template class Tensor<T>;                                                                 \
  template bool all_finite(const Tensor<T>&) noexcept;                                      \
  template void ensure_finite(const Tensor<T>&, std::string_view);                          \
  template Tensor<T> elementwise(BinaryOp, const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> scale(const Tensor<T>&, T);                                            \
  template Tensor<T> clamp(const Tensor<T>&, T, T);                                         \
  template void axpy_inplace(Tensor<T>&, T, const Tensor<T>&);                              \
  template Tensor<T> relu(const Tensor<T>&);                                                \
  template Tensor<T> sigmoid(const Tensor<T>&);                                             \
  template Tensor<T> softmax(const Tensor<T>&, Axis);                                       \
  template Tensor<T> dropout_mask<T>(Shape5, double, std::uint64_t);                        \
  template Tensor<T> dropout(const Tensor<T>&, double, Mode, std::uint64_t);                \
  template Tensor<T> crop_center_spatial(const Tensor<T>&, std::int64_t);                   \
  template Tensor<T> embed_center_spatial(const Tensor<T>&, std::int64_t);                  \
  template Tensor<T> fold_channels_into_time(const Tensor<T>&);                             \
  template Tensor<T> unfold_time_into_channels(const Tensor<T>&, std::int64_t);             \
  template Tensor<T> slice_channels(const Tensor<T>&, std::int64_t, std::int64_t);          \
  template Tensor<T> concat_channels(std::span<const Tensor<T>>);                           \
  template Tensor<T> slice_batch(const Tensor<T>&, std::int64_t, std::int64_t);             \
  template Tensor<T> concat_batch(std::span<const Tensor<T>>);                              \
  template Tensor<T> max_pool_spatial2(const Tensor<T>&, std::vector<std::int64_t>*);       \
  template Tensor<T> upsample_nearest_spatial2(const Tensor<T>&);                           \
  template Tensor<T> upsample_nearest_spatial2_adjoint(const Tensor<T>&);                   \
  template T sum(const Tensor<T>&);

STCONV_INSTANTIATE(float)
STCONV_INSTANTIATE(double)
#undef STCONV_INSTANTIATE

template Tensor<float> tensor_cast<float, double>(const Tensor<double>&);
template Tensor<double> tensor_cast<double, float>(const Tensor<float>&);
template Tensor<float> tensor_cast<float, float>(const Tensor<float>&);
template Tensor<double> tensor_cast<double, double>(const Tensor<double>&);

}  // namespace stconv
