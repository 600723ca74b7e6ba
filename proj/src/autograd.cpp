#include "stconv/autograd.hpp"

#include <algorithm>
#include <cmath>

namespace stconv::ag {

template <typename T>
typename Tape<T>::Node& Tape<T>::node(Var v) {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw Error("tape: invalid variable handle");
  return nodes_[static_cast<std::size_t>(v.id)];
}

template <typename T>
const typename Tape<T>::Node& Tape<T>::node(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw Error("tape: invalid variable handle");
  return nodes_[static_cast<std::size_t>(v.id)];
}

template <typename T>
Var Tape<T>::constant(Tensor<T> value) {
  if (consumed_) throw Error("tape: already consumed by backward()");
  nodes_.push_back(Node{std::move(value), std::nullopt, {}, nullptr, false, true});
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

template <typename T>
Var Tape<T>::input(Tensor<T> value) {
  if (consumed_) throw Error("tape: already consumed by backward()");
  nodes_.push_back(Node{std::move(value), std::nullopt, {}, nullptr, true, true});
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

template <typename T>
Var Tape<T>::parameter(const std::string& name, const Tensor<T>& value, Tensor<T>* grad_sink) {
  if (auto it = params_.find(name); it != params_.end()) return Var{it->second};
  if (grad_sink) require_same_shape(grad_sink->shape(), value.shape(), "tape parameter " + name);
  Var v = input(value);
  node(v).grad_sink = grad_sink;
  params_.emplace(name, v.id);
  return v;
}

template <typename T>
Var Tape<T>::record(Tensor<T> value, std::span<const Var> inputs, BackwardFn fn) {
  if (consumed_) throw Error("tape: already consumed by backward()");
  bool needs = false;
  for (Var in : inputs)
    if (in.valid() && node(in).requires_grad) needs = true;
  nodes_.push_back(Node{std::move(value), std::nullopt, needs ? std::move(fn) : BackwardFn{}, nullptr, needs, false});
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

template <typename T>
const Tensor<T>& Tape<T>::value(Var v) const {
  return node(v).value;
}

template <typename T>
bool Tape<T>::requires_grad(Var v) const {
  return node(v).requires_grad;
}

template <typename T>
Tensor<T> Tape<T>::grad(Var v) const {
  const Node& n = node(v);
  return n.grad ? *n.grad : Tensor<T>(n.value.shape());
}

template <typename T>
void Tape<T>::accumulate(Var v, const Tensor<T>& g) {
  Node& n = node(v);
  if (!n.requires_grad) return;
  if (n.grad)
    axpy_inplace(*n.grad, T(1), g);
  else {
    require_same_shape(n.value.shape(), g.shape(), "tape accumulate");
    n.grad = g;
  }
}

template <typename T>
void Tape<T>::accumulate(Var v, Tensor<T>&& g) {
  Node& n = node(v);
  if (!n.requires_grad) return;
  if (n.grad)
    axpy_inplace(*n.grad, T(1), g);
  else {
    require_same_shape(n.value.shape(), g.shape(), "tape accumulate");
    n.grad = std::move(g);
  }
}

template <typename T>
void Tape<T>::backward(Var root) {
  if (node(root).value.numel() != 1) throw Error("tape: backward() without a seed needs a scalar root");
  backward(root, Tensor<T>::full(node(root).value.shape(), T(1)));
}

template <typename T>
void Tape<T>::backward(Var root, const Tensor<T>& seed) {
  if (consumed_) throw Error("tape: already consumed by backward()");
  consumed_ = true;
  require_same_shape(node(root).value.shape(), seed.shape(), "tape backward seed");
  accumulate(root, seed);
  for (std::int32_t i = root.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.grad || !n.requires_grad) continue;
    if (n.backward) n.backward(*this, *n.grad, n.value);
    if (!n.leaf) n.grad.reset();
  }
  for (Node& n : nodes_)
    if (n.grad_sink && n.grad) axpy_inplace(*n.grad_sink, T(1), *n.grad);
}

// ---------------------------------------------------------------------------

template <typename T>
Var conv3d(Tape<T>& tape, Var x, Var weight, Var bias, const ConvSpec& spec) {
  const Tensor<T>& xv = tape.value(x);
  const Tensor<T>& wv = tape.value(weight);
  std::span<const T> bv;
  if (bias.valid()) bv = tape.value(bias).data();
  Tensor<T> y = conv3d_forward(xv, wv, bv, spec);
  const Var ins[] = {x, weight, bias};
  return tape.record(std::move(y), ins, [x, weight, bias, spec](Tape<T>& tp, const Tensor<T>& gy, const Tensor<T>&) {
    const Tensor<T>& xv = tp.value(x);
    const Tensor<T>& wv = tp.value(weight);
    if (tp.requires_grad(weight) || (bias.valid() && tp.requires_grad(bias))) {
      Tensor<T> gw(wv.shape());
      std::optional<Tensor<T>> gb;
      if (bias.valid() && tp.requires_grad(bias)) gb.emplace(tp.value(bias).shape());
      conv3d_backward_weight(gy, xv, spec, gw, gb ? gb->data() : std::span<T>{});
      if (tp.requires_grad(weight)) tp.accumulate(weight, std::move(gw));
      if (gb) tp.accumulate(bias, std::move(*gb));
    }
    if (tp.requires_grad(x)) tp.accumulate(x, conv3d_backward_input(gy, wv, spec, xv.shape()));
  });
}

template <typename T>
Var relu(Tape<T>& tape, Var x) {
  const Var ins[] = {x};
  return tape.record(stconv::relu(tape.value(x)), ins, [x](Tape<T>& tp, const Tensor<T>& gy, const Tensor<T>&) {
    const Tensor<T>& xv = tp.value(x);
    Tensor<T> gx(xv.shape());
    for (std::int64_t i = 0; i < xv.numel(); ++i) gx[i] = xv[i] > T(0) ? gy[i] : T(0);
    tp.accumulate(x, std::move(gx));
  });
}

template <typename T>
Var sigmoid(Tape<T>& tape, Var x) {
  const Var ins[] = {x};
  return tape.record(stconv::sigmoid(tape.value(x)), ins, [x](Tape<T>& tp, const Tensor<T>& gy, const Tensor<T>& s) {
    Tensor<T> gx(s.shape());
    for (std::int64_t i = 0; i < s.numel(); ++i) gx[i] = gy[i] * s[i] * (T(1) - s[i]);
    tp.accumulate(x, std::move(gx));
  });
}

template <typename T>
Var softmax(Tape<T>& tape, Var x, Axis axis) {
  const Var ins[] = {x};
  return tape.record(stconv::softmax(tape.value(x), axis), ins,
                     [x, axis](Tape<T>& tp, const Tensor<T>& gy, const Tensor<T>& y) {
    const Shape5& s = y.shape();
    const std::int64_t len = axis == Axis::C ? s.c : s.t;
    const std::int64_t inner = axis == Axis::C ? s.t * s.h * s.w : s.h * s.w;
    const std::int64_t outer = y.numel() / (len * inner);
    Tensor<T> gx(s);
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t i = 0; i < inner; ++i) {
        const std::int64_t base = o * len * inner + i;
        T dot = 0;
        for (std::int64_t k = 0; k < len; ++k) dot += y[base + k * inner] * gy[base + k * inner];
        for (std::int64_t k = 0; k < len; ++k) {
          const std::int64_t idx = base + k * inner;
          gx[idx] = y[idx] * (gy[idx] - dot);
        }
      }
    tp.accumulate(x, std::move(gx));
  });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  const Var ins[] = {a, b};
  return tape.record(stconv::add(tape.value(a), tape.value(b)), ins, [a, b](Tape<T>& tp, const Tensor<T>& gy, const Tensor<T>&) {
    tp.accumulate(a, gy);
    tp.accumulate(b, gy);
  });
}

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
  const Var ins[] = {a, b};
  return tape.record(stconv::mul(tape.value(a), tape.value(b)), ins, [a, b](Tape<T>& tp, const Tensor<T>& gy, const Tensor<T>&) {
    if (tp.requires_grad(a)) tp.accumulate(a, stconv::mul(gy, tp.value(b)));
    if (tp.requires_grad(b)) tp.accumulate(b, stconv::mul(gy, tp.value(a)));
  });
}

template <typename T>
Var scale(Tape<T>& tape, Var a, T s) {
  const Var ins[] = {a};
  return tape.record(stconv::scale(tape.value(a), s), ins,
                     [a, s](Tape<T>& tp, const Tensor<T>& gy, const Tensor<T>&) { tp.accumulate(a, stconv::scale(gy, s)); });
}

template <typename T>
Var dropout(Tape<T>& tape, Var x, double rate, Mode mode, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate < 1.0)) throw Error("dropout: rate must lie in [0, 1)");
  if (mode == Mode::Eval || rate == 0.0) return x;
  const Var mask = tape.constant(dropout_mask<T>(tape.value(x).shape(), rate, seed));
  return mul(tape, x, mask);
}

template <typename T>
Var crop_center_spatial(Tape<T>& tape, Var x, std::int64_t factor) {
  const Var ins[] = {x};
  return tape.record(stconv::crop_center_spatial(tape.value(x), factor), ins,
                     [x, factor](Tape<T>& tp, const Tensor<T>& gy, const Tensor<T>&) {
                       tp.accumulate(x, embed_center_spatial(gy, factor));
                     });
}

template <typename T>
Var fold_channels_into_time(Tape<T>& tape, Var x) {
  const Var ins[] = {x};
  const std::int64_t channels = tape.value(x).shape().c;
  return tape.record(stconv::fold_channels_into_time(tape.value(x)), ins,
                     [x, channels](Tape<T>& tp, const Tensor<T>& gy, const Tensor<T>&) {
                       tp.accumulate(x, unfold_time_into_channels(gy, channels));
                     });
}

template <typename T>
Var slice_channels(Tape<T>& tape, Var x, std::int64_t begin, std::int64_t count) {
  const Var ins[] = {x};
  return tape.record(stconv::slice_channels(tape.value(x), begin, count), ins,
                     [x, begin, count](Tape<T>& tp, const Tensor<T>& gy, const Tensor<T>&) {
                       const Shape5& s = tp.value(x).shape();
                       Tensor<T> gx(s);
                       const std::int64_t vol = s.t * s.h * s.w;
                       for (std::int64_t n = 0; n < s.n; ++n) {
                         const T* src = &gy.at(n, 0, 0, 0, 0);
                         std::copy(src, src + count * vol, &gx.at(n, begin, 0, 0, 0));
                       }
                       tp.accumulate(x, std::move(gx));
                     });
}

template <typename T>
Var concat_channels(Tape<T>& tape, std::span<const Var> parts) {
  std::vector<Tensor<T>> values;
  values.reserve(parts.size());
  std::vector<std::int64_t> widths;
  for (Var p : parts) {
    values.push_back(tape.value(p));
    widths.push_back(tape.value(p).shape().c);
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return tape.record(stconv::concat_channels<T>(values), ins, [ins, widths](Tape<T>& tp, const Tensor<T>& gy, const Tensor<T>&) {
    std::int64_t offset = 0;
    for (std::size_t i = 0; i < ins.size(); ++i) {
      if (tp.requires_grad(ins[i])) tp.accumulate(ins[i], stconv::slice_channels(gy, offset, widths[i]));
      offset += widths[i];
    }
  });
}

template <typename T>
Var max_pool_spatial2(Tape<T>& tape, Var x) {
  std::vector<std::int64_t> argmax;
  Tensor<T> y = stconv::max_pool_spatial2(tape.value(x), &argmax);
  const Var ins[] = {x};
  return tape.record(std::move(y), ins, [x, argmax = std::move(argmax)](Tape<T>& tp, const Tensor<T>& gy, const Tensor<T>&) {
    Tensor<T> gx(tp.value(x).shape());
    for (std::int64_t i = 0; i < gy.numel(); ++i) gx[argmax[static_cast<std::size_t>(i)]] += gy[i];
    tp.accumulate(x, std::move(gx));
  });
}

template <typename T>
Var upsample_nearest_spatial2(Tape<T>& tape, Var x) {
  const Var ins[] = {x};
  return tape.record(stconv::upsample_nearest_spatial2(tape.value(x)), ins,
                     [x](Tape<T>& tp, const Tensor<T>& gy, const Tensor<T>&) { tp.accumulate(x, upsample_nearest_spatial2_adjoint(gy)); });
}

template <typename T>
Var sum(Tape<T>& tape, Var x) {
  const Var ins[] = {x};
  return tape.record(Tensor<T>::full(Shape5{}, stconv::sum(tape.value(x))), ins,
                     [x](Tape<T>& tp, const Tensor<T>& gy, const Tensor<T>&) {
                       tp.accumulate(x, Tensor<T>::full(tp.value(x).shape(), gy[0]));
                     });
}

template <typename T>
Var mean(Tape<T>& tape, Var x) {
  const auto n = static_cast<T>(tape.value(x).numel());
  return scale(tape, sum(tape, x), T(1) / n);
}

template <typename T>
Var dot_const(Tape<T>& tape, Var x, const Tensor<T>& coeffs) {
  require_same_shape(tape.value(x).shape(), coeffs.shape(), "dot_const");
  const Var c = tape.constant(coeffs);
  return sum(tape, mul(tape, x, c));
}

#define STCONV_INSTANTIATE(T)                                                     \
  template class Tape<T>;                                                         \
  template Var conv3d(Tape<T>&, Var, Var, Var, const ConvSpec&);                  \
  template Var relu(Tape<T>&, Var);                                               \
  template Var sigmoid(Tape<T>&, Var);                                            \
  template Var softmax(Tape<T>&, Var, Axis);                                      \
  template Var add(Tape<T>&, Var, Var);                                           \
  template Var mul(Tape<T>&, Var, Var);                                           \
  template Var scale(Tape<T>&, Var, T);                                           \
  template Var dropout(Tape<T>&, Var, double, Mode, std::uint64_t);               \
  template Var crop_center_spatial(Tape<T>&, Var, std::int64_t);                  \
  template Var fold_channels_into_time(Tape<T>&, Var);                            \
  template Var slice_channels(Tape<T>&, Var, std::int64_t, std::int64_t);         \
  template Var concat_channels(Tape<T>&, std::span<const Var>);                   \
  template Var max_pool_spatial2(Tape<T>&, Var);                                  \
  template Var upsample_nearest_spatial2(Tape<T>&, Var);                          \
  template Var sum(Tape<T>&, Var);                                                \
  template Var mean(Tape<T>&, Var);                                               \
  template Var dot_const(Tape<T>&, Var, const Tensor<T>&);

STCONV_INSTANTIATE(float)
STCONV_INSTANTIATE(double)
#undef STCONV_INSTANTIATE

}  // namespace stconv::ag
