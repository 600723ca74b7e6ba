#pragma once

#include <cstdint>

#include "stconv/conv.hpp"

namespace stconv {

/// Multiply-accumulate counts, per frame, as the cost model writes them (no x2 for adds).
using Count = std::uint64_t;

/// H * W * C_in * C_out * (K_t * K_h * K_w). Throws Error on zero arguments or overflow.
Count flops_full(Count h, Count w, Count c_in, Count c_out, Count k_t, Count k_h, Count k_w);

/// H * W * C_in * C_out * (K_t + K_h * K_w): the same layer split into a spatial
/// 1 x K_h x K_w pass and a temporal K_t x 1 x 1 pass.
Count flops_decomposed(Count h, Count w, Count c_in, Count c_out, Count k_t, Count k_h, Count k_w);

/// (c_in / groups) * c_out * k_t * k_h * k_w, plus c_out when `with_bias`.
Count param_count(const ConvSpec& spec, bool with_bias);

/// MACs a concrete layer performs on an input of the given shape: every output
/// element times every kernel tap, padded taps included.
Count conv_macs(const ConvSpec& spec, const Shape5& input);

/// a * b, throwing Error on overflow.
Count checked_mul(Count a, Count b);
Count checked_add(Count a, Count b);

}  // namespace stconv
