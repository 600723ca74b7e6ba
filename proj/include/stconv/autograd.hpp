#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "stconv/conv.hpp"
#include "stconv/tensor.hpp"

namespace stconv::ag {

/// Handle to a value recorded on a Tape.
struct Var {
  std::int32_t id = -1;
  bool valid() const noexcept { return id >= 0; }
};

/// Reverse-mode tape. Records are appended in execution order, so the record
/// list is already topologically sorted; backward() walks it once in reverse.
/// A tape is single-use: a second backward() throws.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_out, const Tensor<T>& out_value)>;

  /// Value that never receives a gradient.
  Var constant(Tensor<T> value);
  /// Leaf whose gradient is kept and readable through grad().
  Var input(Tensor<T> value);
  /// Learnable leaf. The same name always maps to the same record; after
  /// backward() its gradient is added into `grad_sink` exactly once.
  Var parameter(const std::string& name, const Tensor<T>& value, Tensor<T>* grad_sink);

  /// Appends an operation record. `fn` runs during backward only if the output
  /// requires a gradient, which holds when any input does.
  Var record(Tensor<T> value, std::span<const Var> inputs, BackwardFn fn);

  const Tensor<T>& value(Var v) const;
  bool requires_grad(Var v) const;
  /// Gradient of a leaf after backward(); zeros if none flowed.
  Tensor<T> grad(Var v) const;

  void accumulate(Var v, const Tensor<T>& g);
  void accumulate(Var v, Tensor<T>&& g);

  /// Seeds d(root)/d(root) = 1; root must hold a single element.
  void backward(Var root);
  void backward(Var root, const Tensor<T>& seed);

  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

 private:
  struct Node {
    Tensor<T> value;
    std::optional<Tensor<T>> grad;
    BackwardFn backward;
    Tensor<T>* grad_sink = nullptr;
    bool requires_grad = false;
    bool leaf = false;
  };
  Node& node(Var v);
  const Node& node(Var v) const;

  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::int32_t> params_;
  bool consumed_ = false;
};

// Differentiable operations. Each reads its inputs from the tape and records one node.

template <typename T>
Var conv3d(Tape<T>& tape, Var x, Var weight, Var bias, const ConvSpec& spec);
template <typename T>
Var relu(Tape<T>& tape, Var x);
template <typename T>
Var sigmoid(Tape<T>& tape, Var x);
template <typename T>
Var softmax(Tape<T>& tape, Var x, Axis axis);
template <typename T>
Var add(Tape<T>& tape, Var a, Var b);
template <typename T>
Var mul(Tape<T>& tape, Var a, Var b);
template <typename T>
Var scale(Tape<T>& tape, Var a, T s);
template <typename T>
Var dropout(Tape<T>& tape, Var x, double rate, Mode mode, std::uint64_t seed);
template <typename T>
Var crop_center_spatial(Tape<T>& tape, Var x, std::int64_t factor);
template <typename T>
Var fold_channels_into_time(Tape<T>& tape, Var x);
template <typename T>
Var slice_channels(Tape<T>& tape, Var x, std::int64_t begin, std::int64_t count);
template <typename T>
Var concat_channels(Tape<T>& tape, std::span<const Var> parts);
template <typename T>
Var max_pool_spatial2(Tape<T>& tape, Var x);
template <typename T>
Var upsample_nearest_spatial2(Tape<T>& tape, Var x);
/// Scalar (1,1,1,1,1) sum and mean of all elements.
template <typename T>
Var sum(Tape<T>& tape, Var x);
template <typename T>
Var mean(Tape<T>& tape, Var x);
/// Weighted sum of all elements with fixed coefficients, a generic scalar probe loss.
template <typename T>
Var dot_const(Tape<T>& tape, Var x, const Tensor<T>& coeffs);

}  // namespace stconv::ag
