#include "stconv/params.hpp"

#include <cmath>

namespace stconv {

template <typename T>
typename ParamStore<T>::Entry& ParamStore<T>::add(const std::string& name, Tensor<T> value) {
  if (contains(name)) throw ConfigError("duplicate parameter name " + name);
  Tensor<T> grad(value.shape());
  index_.emplace(name, entries_.size());
  entries_.push_back(Entry{name, std::move(value), std::move(grad)});
  return entries_.back();
}

template <typename T>
typename ParamStore<T>::Entry& ParamStore<T>::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter " + name);
  return entries_[it->second];
}

template <typename T>
const typename ParamStore<T>::Entry& ParamStore<T>::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter " + name);
  return entries_[it->second];
}

template <typename T>
std::int64_t ParamStore<T>::total_elements() const noexcept {
  std::int64_t n = 0;
  for (const auto& e : entries_) n += e.value.numel();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& e : entries_) e.grad.fill(T(0));
}

template <typename To, typename From>
ParamStore<To> cast_params(const ParamStore<From>& p) {
  ParamStore<To> out;
  for (const auto& e : p) out.add(e.name, tensor_cast<To>(e.value));
  return out;
}

template <typename T>
void add_conv_params(ParamStore<T>& store, const std::string& prefix, const ConvSpec& spec, bool bias, Rng& rng) {
  spec.validate();
  const Shape5 ws = spec.weight_shape();
  const double bound = 1.0 / std::sqrt(static_cast<double>(ws.c * spec.kernel.volume()));
  Tensor<T> w(ws);
  for (auto& v : w.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  store.add(prefix + ".weight", std::move(w));
  if (bias) store.add(prefix + ".bias", Tensor<T>(Shape5{1, 1, 1, 1, spec.c_out}));
}

template <typename T>
std::uint64_t Context<T>::seed_for(const std::string& name) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char ch : name) h = (h ^ ch) * 0x100000001b3ULL;
  return derive_seed(seed, h);
}

template <typename T>
ag::Var conv_layer(const Context<T>& ctx, const std::string& prefix, ag::Var x, const ConvSpec& spec) {
  const ag::Var w = ctx.param(prefix + ".weight");
  const ag::Var b = ctx.params.contains(prefix + ".bias") ? ctx.param(prefix + ".bias") : ag::Var{};
  return ag::conv3d(ctx.tape, x, w, b, spec);
}

template class ParamStore<float>;
template class ParamStore<double>;
template struct Context<float>;
template struct Context<double>;
template ParamStore<float> cast_params(const ParamStore<double>&);
template ParamStore<double> cast_params(const ParamStore<float>&);
template ParamStore<float> cast_params(const ParamStore<float>&);
template ParamStore<double> cast_params(const ParamStore<double>&);
template void add_conv_params(ParamStore<float>&, const std::string&, const ConvSpec&, bool, Rng&);
template void add_conv_params(ParamStore<double>&, const std::string&, const ConvSpec&, bool, Rng&);
template ag::Var conv_layer(const Context<float>&, const std::string&, ag::Var, const ConvSpec&);
template ag::Var conv_layer(const Context<double>&, const std::string&, ag::Var, const ConvSpec&);

}  // namespace stconv
