#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace stconv {

/// Outcome of one self-check. `detail` holds the measured quantity so reports from
/// the same seed are byte-identical.
struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// "PASS <name>: <detail>" / "FAIL <name>: <detail>"
std::string format_check(const CheckResult& r);
bool all_passed(const std::vector<CheckResult>& results);

/// Central-difference checks in float64 of every differentiable op, both blocks
/// (tolerance 1e-4) and a tiny end-to-end model (1e-3).
std::vector<CheckResult> gradient_suite(std::uint64_t seed);

/// flops_full / flops_decomposed against arbitrary-precision evaluations on `tuples`
/// random shapes, plus the 3x3x3 ratio.
CheckResult flops_closed_forms(std::uint64_t seed, int tuples = 50);
/// Dense conv with an outer-product kernel against the spatial -> temporal pipeline.
CheckResult decomposition_oracle(std::uint64_t seed, int kernels = 20);
/// Fold / unfold round trip over random shapes, compared bit for bit.
CheckResult fold_round_trip(std::uint64_t seed);
/// (N, 11, 4, 48, 48) -> (N, 1, 32, 8, 8) through the default-depth model.
CheckResult shape_contract(std::uint64_t seed);
/// BCE and total-loss hand values.
CheckResult loss_arithmetic();
/// Parameter direction against the dense U-Net and the width-scaling ratio.
CheckResult efficiency_direction();

/// Everything above.
std::vector<CheckResult> selftest(std::uint64_t seed);

}  // namespace stconv
