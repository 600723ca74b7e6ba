#pragma once

#include <cstdint>
#include <deque>
#include <string>
#include <unordered_map>

#include "stconv/autograd.hpp"
#include "stconv/conv.hpp"
#include "stconv/rng.hpp"
#include "stconv/tensor.hpp"

namespace stconv {

/// Named learnable tensors with same-shaped gradient buffers, kept in insertion order.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
  };

  Entry& add(const std::string& name, Tensor<T> value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Entry& at(const std::string& name);
  const Entry& at(const std::string& name) const;

  std::size_t size() const noexcept { return entries_.size(); }
  std::int64_t total_elements() const noexcept;
  void zero_grad();

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i)
      if (a.entries_[i].name != b.entries_[i].name || !(a.entries_[i].value == b.entries_[i].value)) return false;
    return true;
  }

 private:
  std::deque<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename To, typename From>
ParamStore<To> cast_params(const ParamStore<From>& p);

/// Creates `<prefix>.weight` (and `<prefix>.bias`) for a convolution. Weights are
/// uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases start at zero.
template <typename T>
void add_conv_params(ParamStore<T>& store, const std::string& prefix, const ConvSpec& spec, bool bias, Rng& rng);

/// What a forward pass needs besides its input: where to record, where the
/// parameters live, and the dropout mode.
template <typename T>
struct Context {
  ag::Tape<T>& tape;
  ParamStore<T>& params;
  Mode mode = Mode::Eval;
  std::uint64_t seed = 0;

  ag::Var param(const std::string& name) const {
    auto& e = params.at(name);
    return tape.parameter(name, e.value, &e.grad);
  }
  /// Dropout seed tied to the call site name, so reordering layers does not shift masks.
  std::uint64_t seed_for(const std::string& name) const;
};

/// Conv layer whose weights are `<prefix>.weight` / `<prefix>.bias` (bias optional).
template <typename T>
ag::Var conv_layer(const Context<T>& ctx, const std::string& prefix, ag::Var x, const ConvSpec& spec);

}  // namespace stconv
