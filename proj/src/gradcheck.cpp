#include "stconv/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "stconv/rng.hpp"

namespace stconv {

double evaluate_loss(const std::vector<Tensor<double>>& leaves, const LossBuilder& loss) {
  ag::Tape<double> tape;
  std::vector<ag::Var> vars;
  vars.reserve(leaves.size());
  for (const auto& l : leaves) vars.push_back(tape.constant(l));
  return tape.value(loss(tape, vars))[0];
}

GradCheckResult check_gradients(const std::string& name, std::vector<Tensor<double>> leaves,
                                const LossBuilder& loss, const GradCheckOptions& options) {
  std::vector<Tensor<double>> analytic;
  {
    ag::Tape<double> tape;
    std::vector<ag::Var> vars;
    for (const auto& l : leaves) vars.push_back(tape.input(l));
    const ag::Var out = loss(tape, vars);
    tape.backward(out);
    for (ag::Var v : vars) analytic.push_back(tape.grad(v));
  }

  GradCheckResult result{name, 0.0, 0, true};
  Rng rng(options.seed);
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    const auto numel = static_cast<std::size_t>(leaves[li].numel());
    std::vector<std::size_t> coords(numel);
    std::iota(coords.begin(), coords.end(), 0);
    if (numel > options.max_coords) {
      for (std::size_t i = 0; i < options.max_coords; ++i)
        std::swap(coords[i], coords[i + static_cast<std::size_t>(rng.below(numel - i))]);
      coords.resize(options.max_coords);
    }
    std::vector<double> numeric;
    numeric.reserve(coords.size());
    for (std::size_t idx : coords) {
      auto& x = leaves[li][static_cast<std::int64_t>(idx)];
      const double orig = x;
      x = orig + options.step;
      const double fp = evaluate_loss(leaves, loss);
      x = orig - options.step;
      const double fm = evaluate_loss(leaves, loss);
      x = orig;
      numeric.push_back((fp - fm) / (2.0 * options.step));
    }
    double scale = 0.0;
    for (double n : numeric) scale = std::max(scale, std::abs(n));
    for (std::size_t k = 0; k < coords.size(); ++k) {
      const double a = analytic[li][static_cast<std::int64_t>(coords[k])];
      const double n = numeric[k];
      const double denom = std::max({std::abs(a), std::abs(n), 1e-2 * scale, 1e-300});
      const double err = (a == n) ? 0.0 : std::abs(a - n) / denom;
      result.max_rel_error = std::max(result.max_rel_error, err);
      ++result.coords_checked;
    }
  }
  result.passed = result.max_rel_error < options.tolerance;
  return result;
}

namespace {

double param_loss(ParamStore<double>& params, const ParamLossBuilder& loss) {
  ag::Tape<double> tape;
  return tape.value(loss(tape, params))[0];
}

}  // namespace

GradCheckResult check_param_gradients(const std::string& name, ParamStore<double>& params,
                                      const ParamLossBuilder& loss, const GradCheckOptions& options) {
  params.zero_grad();
  {
    ag::Tape<double> tape;
    tape.backward(loss(tape, params));
  }
  std::vector<ParamStore<double>::Entry*> entries;
  std::vector<std::int64_t> offsets;
  std::int64_t total = 0;
  for (auto& e : params) {
    entries.push_back(&e);
    offsets.push_back(total);
    total += e.value.numel();
  }
  std::vector<std::int64_t> coords(static_cast<std::size_t>(total));
  std::iota(coords.begin(), coords.end(), 0);
  Rng rng(options.seed);
  if (coords.size() > options.max_coords) {
    for (std::size_t i = 0; i < options.max_coords; ++i)
      std::swap(coords[i], coords[i + static_cast<std::size_t>(rng.below(coords.size() - i))]);
    coords.resize(options.max_coords);
  }
  std::vector<double> analytic, numeric;
  for (std::int64_t flat : coords) {
    const auto k = static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), flat) - offsets.begin() - 1);
    auto& e = *entries[k];
    const std::int64_t i = flat - offsets[k];
    analytic.push_back(e.grad[i]);
    const double orig = e.value[i];
    e.value[i] = orig + options.step;
    const double fp = param_loss(params, loss);
    e.value[i] = orig - options.step;
    const double fm = param_loss(params, loss);
    e.value[i] = orig;
    numeric.push_back((fp - fm) / (2.0 * options.step));
  }
  double scale = 0.0;
  for (double n : numeric) scale = std::max(scale, std::abs(n));
  GradCheckResult result{name, 0.0, 0, true};
  for (std::size_t k = 0; k < numeric.size(); ++k) {
    const double a = analytic[k], n = numeric[k];
    const double denom = std::max({std::abs(a), std::abs(n), 1e-2 * scale, 1e-300});
    result.max_rel_error = std::max(result.max_rel_error, a == n ? 0.0 : std::abs(a - n) / denom);
    ++result.coords_checked;
  }
  result.passed = result.max_rel_error < options.tolerance;
  return result;
}

}  // namespace stconv
