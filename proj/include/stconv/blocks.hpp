#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stconv/params.hpp"

namespace stconv {

enum class LayerRole { Pointwise, Spatial, Branch, Temporal, Full, Depthwise };

const char* role_name(LayerRole role) noexcept;

/// One convolution of a block, with its parameter prefix.
struct ConvLayer {
  std::string name;
  ConvSpec spec;
  bool bias = true;
  LayerRole role = LayerRole::Full;
};

struct LcamConfig {
  std::int64_t channels = 16;
  std::int64_t groups = 2;
  /// Spatial kernel size of each split branch; the first `groups` entries are used.
  std::vector<std::int64_t> kernel_ladder{3, 5, 7, 9};
  /// Per-branch dilation; empty means 1 everywhere.
  std::vector<std::int64_t> dilation{};
  bool residual = true;
  double dropout = 0.0;

  void validate() const;
};

/// Layers in execution order:
///   <p>.spatial  1x3x3, C->C, relu
///   <p>.branch.i 1xn_i xn_i on group i, C/g->C/g, linear
///   <p>.temporal 3x1x1, C->C, linear
///   <p>.aggregate 3x3x3, C->C, relu, then dropout
/// and an optional residual add of the block input.
std::vector<ConvLayer> lcam_layers(const LcamConfig& cfg, const std::string& prefix);

template <typename T>
void lcam_build(ParamStore<T>& store, const std::string& prefix, const LcamConfig& cfg, Rng& rng);

template <typename T>
ag::Var lcam_forward(const Context<T>& ctx, const std::string& prefix, ag::Var x, const LcamConfig& cfg);

/// Splits the channel axis into g contiguous, equally sized parts.
template <typename T>
std::vector<Tensor<T>> channel_split(const Tensor<T>& x, std::int64_t groups);
template <typename T>
std::vector<ag::Var> channel_split(ag::Tape<T>& tape, ag::Var x, std::int64_t groups);

/// Two 3x3x3 conv + relu layers, the plain 3D U-Net block. Used as the dense counterpart of LCAM.
std::vector<ConvLayer> double_conv_layers(std::int64_t channels, const std::string& prefix);
template <typename T>
void double_conv_build(ParamStore<T>& store, const std::string& prefix, std::int64_t channels, Rng& rng);
template <typename T>
ag::Var double_conv_forward(const Context<T>& ctx, const std::string& prefix, ag::Var x, std::int64_t channels,
                            double dropout);

enum class AttentionNorm { SoftmaxTime, Sigmoid };

struct StrConfig {
  std::int64_t channels = 1;
  AttentionNorm norm = AttentionNorm::SoftmaxTime;
  std::int64_t residual_blocks = 2;
  /// Replace the two-stage depthwise stack with one dense depthwise kernel of this size.
  bool dense_attention = false;
  std::int64_t dense_kernel = 7;
  /// Test hooks: a constant all-ones attention map, and identity instead of relu in the residual blocks.
  bool force_unit_attention = false;
  bool linear_residual = false;

  void validate() const;
};

/// Attention stack:
///   <p>.attn.dw    3x3x3 depthwise
///   <p>.attn.dwd   3x3x3 depthwise, dilation 3 (together 9x9x9)
///   <p>.attn.mix   1x1x1
/// (or <p>.attn.dense, k x k x k depthwise), then <p>.res.i.conv 3x3x3 per residual block.
std::vector<ConvLayer> str_layers(const StrConfig& cfg, const std::string& prefix);

/// The mix bias starts at 1 so that the initial gate passes y_early through.
template <typename T>
void str_build(ParamStore<T>& store, const std::string& prefix, const StrConfig& cfg, Rng& rng);

/// Normalized y_early pushed through the large-kernel stack.
template <typename T>
ag::Var str_attention(const Context<T>& ctx, const std::string& prefix, ag::Var y_early, const StrConfig& cfg);

/// y_final = residual blocks applied to attention(y_early) * y_early.
template <typename T>
ag::Var str_forward(const Context<T>& ctx, const std::string& prefix, ag::Var y_early, const StrConfig& cfg);

/// x + relu(conv(x)) with a same-padded cubic kernel.
template <typename T>
ag::Var residual_block(const Context<T>& ctx, const std::string& prefix, ag::Var x, const ConvSpec& spec,
                       bool linear = false);

}  // namespace stconv
