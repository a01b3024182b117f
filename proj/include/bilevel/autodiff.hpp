#pragma once

#include <cstdint>
#include <deque>
#include <span>
#include <stdexcept>
#include <vector>

#include "bilevel/tensor.hpp"

namespace bilevel::ad {

/// Misuse of a tape: foreign nodes, non-scalar losses, wrong mode.
class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class TapeMode {
  ValuesOnly,      // gradients come back as plain tensors
  Differentiable,  // gradients are themselves recorded, so they can be differentiated again
};

enum class OpKind : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  ScalarMul,
  AddScalar,
  MatMul,
  Transpose,
  Conv2d,
  Conv2dInputGrad,
  Conv2dWeightGrad,
  BiasAdd,
  ChannelSum,
  ChannelBroadcast,
  SumChannels,
  BroadcastChannels,
  Upsample2,
  AvgPool2,
  Relu,
  LeakyRelu,
  Tanh,
  Sigmoid,
  Log,
  Sqrt,
  Square,
  Abs,
  Clamp,
  ReduceSum,
  ReduceMean,
  BroadcastScalar,
  ConcatChannels,
  SliceChannels,
  EmbedChannels,
  PadReflect,
  PadReflectAdjoint,
};

const char* op_name(OpKind op);

struct OpAttrs {
  int stride = 1;
  int pad = 0;
  double scalar = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  std::size_t begin = 0;
  std::size_t count = 0;
  Shape shape;
};

struct Node {
  OpKind op = OpKind::Leaf;
  std::int32_t inputs[2] = {-1, -1};
  std::uint8_t arity = 0;
  bool requires_grad = false;
  OpAttrs attrs;
  Tensor value;
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::int32_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }
  Tape* tape() const { return tape_; }
  std::int32_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::int32_t id_ = -1;
};

/// Ordered record of primitive ops. Inputs always precede the ops that use
/// them, so a reverse sweep visits each op once. Single writer.
class Tape {
 public:
  explicit Tape(TapeMode mode = TapeMode::ValuesOnly) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  TapeMode mode() const { return mode_; }
  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::int32_t id) const { return nodes_.at(static_cast<std::size_t>(id)); }

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Computes the op forward, checks finiteness and records it.
  Var apply(OpKind op, std::span<const Var> inputs, OpAttrs attrs = {});

  /// d loss / d v for each v in wrt, as values. Works in either mode.
  std::vector<Tensor> gradients(const Var& loss, std::span<const Var> wrt);

  /// Same, but each gradient is recorded on this tape so it can itself be
  /// differentiated. Requires TapeMode::Differentiable.
  std::vector<Var> gradients_on_tape(const Var& loss, std::span<const Var> wrt);

  /// Recomputes every recorded op from new leaf values (given in leaf
  /// creation order). Returns the number of nodes recomputed.
  std::size_t replay(std::span<const Tensor> leaf_values);

  void check_owned(const Var& v, const char* what) const;

 private:
  friend class Var;
  TapeMode mode_;
  std::deque<Node> nodes_;
};

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scalar_mul(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var conv2d(const Var& x, const Var& w, int stride, int pad);
Var conv2d_input_grad(const Var& g, const Var& w, const Shape& input_shape, int stride, int pad);
Var conv2d_weight_grad(const Var& x, const Var& g, const Shape& weight_shape, int stride, int pad);
Var bias_add(const Var& x, const Var& b);
Var channel_sum(const Var& x);
Var channel_broadcast(const Var& b, const Shape& shape);
Var sum_channels(const Var& x);
Var broadcast_channels(const Var& x, std::size_t channels);
Var upsample2(const Var& x);
Var avg_pool2(const Var& x);
Var relu(const Var& x);
Var leaky_relu(const Var& x, double slope = 0.2);
Var tanh(const Var& x);
Var sigmoid(const Var& x);
Var log(const Var& x);
Var sqrt(const Var& x);
Var square(const Var& x);
Var abs(const Var& x);
Var clamp(const Var& x, double lo, double hi);
Var reduce_sum(const Var& x);
Var reduce_mean(const Var& x);
Var broadcast_scalar(const Var& s, const Shape& shape);
Var concat_channels(const Var& a, const Var& b);
Var slice_channels(const Var& x, std::size_t begin, std::size_t count);
Var embed_channels(const Var& x, std::size_t begin, std::size_t total);
Var pad_reflect(const Var& x, int pad);
Var pad_reflect_adjoint(const Var& g, int pad);

}  // namespace bilevel::ad
