#include "stconv/flops.hpp"

#include <initializer_list>
#include <limits>

namespace stconv {

Count checked_mul(Count a, Count b) {
  if (a != 0 && b > std::numeric_limits<Count>::max() / a) throw Error("MAC count overflows 64 bits");
  return a * b;
}

Count checked_add(Count a, Count b) {
  if (b > std::numeric_limits<Count>::max() - a) throw Error("MAC count overflows 64 bits");
  return a + b;
}

namespace {
Count product(std::initializer_list<Count> xs) {
  Count p = 1;
  for (Count x : xs) {
    if (x == 0) throw Error("cost model arguments must be positive");
    p = checked_mul(p, x);
  }
  return p;
}
}  // namespace

Count flops_full(Count h, Count w, Count c_in, Count c_out, Count k_t, Count k_h, Count k_w) {
  return product({h, w, c_in, c_out, product({k_t, k_h, k_w})});
}

Count flops_decomposed(Count h, Count w, Count c_in, Count c_out, Count k_t, Count k_h, Count k_w) {
  const Count taps = checked_add(product({k_t}), product({k_h, k_w}));
  return product({h, w, c_in, c_out, taps});
}

Count param_count(const ConvSpec& spec, bool with_bias) {
  spec.validate();
  const Count weights = product({static_cast<Count>(spec.c_in / spec.groups), static_cast<Count>(spec.c_out),
                                 static_cast<Count>(spec.kernel.t), static_cast<Count>(spec.kernel.h),
                                 static_cast<Count>(spec.kernel.w)});
  return with_bias ? checked_add(weights, static_cast<Count>(spec.c_out)) : weights;
}

Count conv_macs(const ConvSpec& spec, const Shape5& input) {
  const Shape5 os = spec.output_shape(input);
  return product({static_cast<Count>(os.n), static_cast<Count>(os.t), static_cast<Count>(os.h),
                  static_cast<Count>(os.w), static_cast<Count>(spec.c_in / spec.groups),
                  static_cast<Count>(spec.c_out), static_cast<Count>(spec.kernel.volume())});
}

}  // namespace stconv
