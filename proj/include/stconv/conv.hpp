#pragma once

#include <cstdint>
#include <span>

#include "stconv/tensor.hpp"

namespace stconv {

struct Extent3 {
  std::int64_t t = 1;
  std::int64_t h = 1;
  std::int64_t w = 1;

  std::int64_t volume() const noexcept { return t * h * w; }
  friend bool operator==(const Extent3&, const Extent3&) = default;
};

enum class Padding { Same, Valid };

/// One 3D convolution: channels, kernel extents, dilation, stride, zero padding, groups.
/// Weight layout is (c_out, c_in / groups, k_t, k_h, k_w).
struct ConvSpec {
  std::int64_t c_in = 1;
  std::int64_t c_out = 1;
  Extent3 kernel{1, 1, 1};
  Extent3 dilation{1, 1, 1};
  Extent3 stride{1, 1, 1};
  Extent3 padding{0, 0, 0};
  std::int64_t groups = 1;

  /// Stride 1 with padding d*(k-1)/2 per axis; kernel extents must be odd.
  static ConvSpec same(std::int64_t c_in, std::int64_t c_out, Extent3 kernel, Extent3 dilation = {1, 1, 1},
                       std::int64_t groups = 1);

  void validate() const;
  Shape5 weight_shape() const;
  /// Throws ShapeError when the channel count disagrees or the dilated kernel
  /// exceeds the padded input along some axis.
  Shape5 output_shape(const Shape5& input) const;

  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

/// Cross-correlation (no kernel flip) with zero padding:
///   y[n,o,t,h,w] = b[o] + sum_{i,a,b,c} W[o,i,a,b,c] * x[n, g*Cg + i, t*s_t - p_t + a*d_t, ...]
/// `bias` is either empty or holds c_out values.
template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& x, const Tensor<T>& weight, std::span<const T> bias,
                         const ConvSpec& spec);

/// dL/dx for a given dL/dy.
template <typename T>
Tensor<T> conv3d_backward_input(const Tensor<T>& grad_out, const Tensor<T>& weight, const ConvSpec& spec,
                                const Shape5& input_shape);

/// Accumulates dL/dW into grad_weight and dL/db into grad_bias (skipped when empty).
template <typename T>
void conv3d_backward_weight(const Tensor<T>& grad_out, const Tensor<T>& x, const ConvSpec& spec,
                            Tensor<T>& grad_weight, std::span<T> grad_bias);

/// Derives the spec of a 1 x k_h x k_w spatial convolution from the weight shape.
ConvSpec spatial_spec(const Shape5& x, const Shape5& weight, std::int64_t dilation = 1,
                      Padding padding = Padding::Same);
/// Derives the spec of a k_t x 1 x 1 temporal convolution from the weight shape.
ConvSpec temporal_spec(const Shape5& x, const Shape5& weight, std::int64_t dilation = 1,
                       Padding padding = Padding::Same);

template <typename T>
Tensor<T> spatial_conv(const Tensor<T>& x, const Tensor<T>& weight, std::span<const T> bias,
                       std::int64_t dilation = 1, Padding padding = Padding::Same);

template <typename T>
Tensor<T> temporal_conv(const Tensor<T>& x, const Tensor<T>& weight, std::span<const T> bias,
                        std::int64_t dilation = 1, Padding padding = Padding::Same);

namespace testing {
/// When set, weight gradients are deliberately scaled by 1.5. Used to check that
/// the gradient harness notices a broken backward pass.
void set_corrupt_conv_backward(bool on) noexcept;
bool corrupt_conv_backward() noexcept;
}  // namespace testing

}  // namespace stconv
