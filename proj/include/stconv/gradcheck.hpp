#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "stconv/autograd.hpp"
#include "stconv/params.hpp"

namespace stconv {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Coordinates probed per leaf; all of them when the leaf is smaller.
  std::size_t max_coords = 24;
  std::uint64_t seed = 7;
};

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  bool passed = false;
};

/// Builds a scalar loss on a fresh tape from the given leaves.
using LossBuilder = std::function<ag::Var(ag::Tape<double>&, std::span<const ag::Var>)>;

/// Compares tape gradients with central differences (f(x+h) - f(x-h)) / 2h on a
/// random subset of coordinates of every leaf. The per-coordinate error is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-2 * largest |numeric|),
/// the floor keeping near-zero components from dominating.
GradCheckResult check_gradients(const std::string& name, std::vector<Tensor<double>> leaves,
                                const LossBuilder& loss, const GradCheckOptions& options = {});

using ParamLossBuilder = std::function<ag::Var(ag::Tape<double>&, ParamStore<double>&)>;

/// Same comparison over the scalars of a parameter store. `max_coords` scalars are
/// drawn uniformly from all parameters together.
GradCheckResult check_param_gradients(const std::string& name, ParamStore<double>& params,
                                      const ParamLossBuilder& loss, const GradCheckOptions& options = {});

/// Runs `loss` once and returns the scalar value.
double evaluate_loss(const std::vector<Tensor<double>>& leaves, const LossBuilder& loss);

}  // namespace stconv
