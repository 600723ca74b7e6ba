#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "stconv/blocks.hpp"
#include "stconv/flops.hpp"

namespace stconv {

/// sianet: LCAM trunk + STR. unet3d: the same U-Net with every LCAM replaced by two
/// dense 3x3x3 convolutions and no STR. single_conv: one 3x3x3 layer, analysis only.
enum class Arch { SIANet, UNet3D, SingleConv };

const char* arch_name(Arch a) noexcept;

struct ModelConfig {
  Arch arch = Arch::SIANet;
  std::int64_t in_channels = 11;
  std::int64_t t_in = 4;
  std::int64_t t_out = 32;
  std::int64_t init_filters = 32;
  std::int64_t levels = 3;
  std::int64_t crop_factor = 6;
  std::int64_t lcam_groups = 2;
  std::vector<std::int64_t> lcam_kernels{3, 5, 7, 9};
  bool lcam_residual = true;
  double dropout = 0.4;
  AttentionNorm str_norm = AttentionNorm::SoftmaxTime;
  std::int64_t str_residual_blocks = 2;
  bool str_dense_attention = false;

  void validate() const;
  /// Channels ahead of the fold: t_out / t_in.
  std::int64_t head_channels() const noexcept { return t_out / t_in; }
  std::int64_t width(std::int64_t level) const noexcept { return init_filters << level; }
  LcamConfig lcam(std::int64_t level) const;
  StrConfig str() const;
  bool has_str() const noexcept { return arch == Arch::SIANet; }

  /// Throws ShapeError naming expected and actual extents.
  void check_input(const Shape5& x) const;
  Shape5 output_shape(const Shape5& x) const;

  /// key=value lines that parse back into the same config.
  std::string to_text() const;
  /// Applies one key; returns false for keys that are not model keys.
  bool apply(const std::string& key, const std::string& value);
  static std::vector<std::string> keys();

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// One convolution of the assembled model with the input shape it sees.
struct ModelLayer {
  ConvLayer layer;
  Shape5 input;
  /// Enclosing block, e.g. "enc.0.b1"; empty for standalone layers.
  std::string block;
};

std::vector<ModelLayer> model_layers(const ModelConfig& cfg, const Shape5& input);

/// Nominal input used when no shape is given: (1, in_channels, t_in, 48, 48) rounded
/// up to satisfy the divisibility constraints.
Shape5 nominal_input(const ModelConfig& cfg);

template <typename T>
ParamStore<T> build(const ModelConfig& cfg, std::uint64_t seed);

struct ForwardHooks {
  /// Replace the skip tensor of this decoder level with zeros (-1: none).
  std::int64_t zero_skip_level = -1;
};

struct ModelOutput {
  ag::Var y_early;
  ag::Var y_final;
};

template <typename T>
ModelOutput forward(const Context<T>& ctx, ag::Var x, const ModelConfig& cfg, const ForwardHooks& hooks = {});

/// Convenience: forward on a fresh tape, returning (y_early, y_final) logits.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> predict(ParamStore<T>& params, const ModelConfig& cfg, const Tensor<T>& x,
                                        Mode mode = Mode::Eval, std::uint64_t seed = 0,
                                        const ForwardHooks& hooks = {});

struct FlopsRow {
  std::string name;
  std::string block;
  LayerRole role;
  ConvSpec spec;
  Shape5 input;
  Count params = 0;
  Count macs = 0;
  Count macs_per_frame = 0;
  /// Per-frame cost of this kernel as a dense 3D conv and as spatial+temporal passes.
  Count full_per_frame = 0;
  Count decomposed_per_frame = 0;
};

/// Per-LCAM comparison: its spatial, branch and temporal layers against the dense
/// 3D convolutions they stand in for (spatial 1xkxk -> 3xkxk, temporal absorbed).
struct FlopsStack {
  std::string block;
  Count decomposed_per_frame = 0;
  Count dense_per_frame = 0;
};

struct FlopsReport {
  Shape5 input;
  std::vector<FlopsRow> rows;
  std::vector<FlopsStack> stacks;
  Count total_params = 0;
  Count total_macs = 0;
  Count dense_params = 0;
  Count dense_macs = 0;
};

/// Per-layer parameters and MACs of `cfg` on `input`, and the totals of the dense
/// counterpart (unet3d of the same widths) for comparison.
FlopsReport count_model_flops(const ModelConfig& cfg, const Shape5& input);
Count count_params(const ModelConfig& cfg);

}  // namespace stconv
