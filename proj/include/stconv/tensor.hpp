#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stconv/error.hpp"

namespace stconv {

enum class DType : std::uint8_t { Float32 = 0, Float64 = 1 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() {
  return DType::Float32;
}
template <>
constexpr DType dtype_of<double>() {
  return DType::Float64;
}

enum class Axis { N, C, T, H, W };

enum class Mode { Train, Eval };

/// Extents of a 5-axis (batch, channel, time, height, width) array.
struct Shape5 {
  std::int64_t n = 1;
  std::int64_t c = 1;
  std::int64_t t = 1;
  std::int64_t h = 1;
  std::int64_t w = 1;

  /// Throws ShapeError when an extent is < 1 or the element count overflows.
  void validate() const;
  std::int64_t numel() const;

  std::int64_t index(std::int64_t in, std::int64_t ic, std::int64_t it, std::int64_t ih,
                     std::int64_t iw) const noexcept {
    return (((in * c + ic) * t + it) * h + ih) * w + iw;
  }

  std::int64_t extent(Axis axis) const noexcept;
  std::array<std::int64_t, 5> dims() const noexcept { return {n, c, t, h, w}; }
  std::string str() const;

  friend bool operator==(const Shape5&, const Shape5&) = default;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : Tensor(Shape5{}) {}
  explicit Tensor(Shape5 shape);
  Tensor(Shape5 shape, std::vector<T> data);

  static Tensor zeros(Shape5 shape) { return Tensor(shape); }
  static Tensor full(Shape5 shape, T value);

  const Shape5& shape() const noexcept { return shape_; }
  std::int64_t numel() const noexcept { return static_cast<std::int64_t>(data_.size()); }
  static constexpr DType dtype() noexcept { return dtype_of<T>(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }

  T& operator[](std::int64_t i) noexcept { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const noexcept {
    return data_[static_cast<std::size_t>(i)];
  }
  T& at(std::int64_t n, std::int64_t c, std::int64_t t, std::int64_t h, std::int64_t w) noexcept {
    return data_[static_cast<std::size_t>(shape_.index(n, c, t, h, w))];
  }
  const T& at(std::int64_t n, std::int64_t c, std::int64_t t, std::int64_t h,
              std::int64_t w) const noexcept {
    return data_[static_cast<std::size_t>(shape_.index(n, c, t, h, w))];
  }

  void fill(T value);

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape5 shape_;
  std::vector<T> data_;
};

template <typename T>
Tensor<T> zeros(Shape5 shape) {
  return Tensor<T>(shape);
}

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& x);

/// Throws NonFiniteError naming `op` if any element is NaN or Inf.
template <typename T>
void ensure_finite(const Tensor<T>& x, std::string_view op);

template <typename T>
bool all_finite(const Tensor<T>& x) noexcept;

void require_same_shape(const Shape5& a, const Shape5& b, std::string_view op);

// Pointwise arithmetic. Binary forms require identical shapes (no broadcasting).
enum class BinaryOp { Add, Sub, Mul };

template <typename T>
Tensor<T> elementwise(BinaryOp op, const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s);
template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi);

/// a += s * b, in place.
template <typename T>
void axpy_inplace(Tensor<T>& a, T s, const Tensor<T>& b);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

/// Max-subtracted softmax along the channel or time axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, Axis axis);

/// Inverted-dropout multiplier: 0 with probability `rate`, else 1/(1-rate).
template <typename T>
Tensor<T> dropout_mask(Shape5 shape, double rate, std::uint64_t seed);
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Mode mode, std::uint64_t seed);

/// Central H/factor x W/factor window, offset (H - H/factor) / 2.
template <typename T>
Tensor<T> crop_center_spatial(const Tensor<T>& x, std::int64_t factor);
/// Zero canvas of H*factor x W*factor with `x` at the crop location.
template <typename T>
Tensor<T> embed_center_spatial(const Tensor<T>& x, std::int64_t factor);

/// (N, C', T, H, W) -> (N, 1, C'*T, H, W) with output frame t*C' + c.
template <typename T>
Tensor<T> fold_channels_into_time(const Tensor<T>& x);
template <typename T>
Tensor<T> unfold_time_into_channels(const Tensor<T>& x, std::int64_t channels);

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::int64_t begin, std::int64_t count);
template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> parts);

template <typename T>
Tensor<T> slice_batch(const Tensor<T>& x, std::int64_t begin, std::int64_t count);
template <typename T>
Tensor<T> concat_batch(std::span<const Tensor<T>> parts);

/// 1x2x2 spatial max pooling. `argmax` receives the flat input index per output.
template <typename T>
Tensor<T> max_pool_spatial2(const Tensor<T>& x, std::vector<std::int64_t>* argmax = nullptr);

/// Nearest-neighbour x2 spatial upsampling and its adjoint (2x2 block sums).
template <typename T>
Tensor<T> upsample_nearest_spatial2(const Tensor<T>& x);
template <typename T>
Tensor<T> upsample_nearest_spatial2_adjoint(const Tensor<T>& g);

template <typename T>
T sum(const Tensor<T>& x);

}  // namespace stconv
