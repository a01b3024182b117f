#include "bilevel/autodiff.hpp"

#include <algorithm>
#include <optional>
#include <string>

namespace bilevel::ad {

namespace {

Tensor forward(OpKind op, const Tensor* in[2], const OpAttrs& at) {
  switch (op) {
    case OpKind::Leaf: break;
    case OpKind::Add: return add(*in[0], *in[1]);
    case OpKind::Sub: return sub(*in[0], *in[1]);
    case OpKind::Mul: return mul(*in[0], *in[1]);
    case OpKind::Div: return div(*in[0], *in[1]);
    case OpKind::ScalarMul: return scalar_mul(*in[0], at.scalar);
    case OpKind::AddScalar: return add_scalar(*in[0], at.scalar);
    case OpKind::MatMul: return matmul(*in[0], *in[1]);
    case OpKind::Transpose: return transpose(*in[0]);
    case OpKind::Conv2d: return conv2d(*in[0], *in[1], at.stride, at.pad);
    case OpKind::Conv2dInputGrad: return conv2d_input_grad(*in[0], *in[1], at.shape, at.stride, at.pad);
    case OpKind::Conv2dWeightGrad: return conv2d_weight_grad(*in[0], *in[1], at.shape, at.stride, at.pad);
    case OpKind::BiasAdd: return bias_add(*in[0], *in[1]);
    case OpKind::ChannelSum: return channel_sum(*in[0]);
    case OpKind::ChannelBroadcast: return channel_broadcast(*in[0], at.shape);
    case OpKind::SumChannels: return sum_channels(*in[0]);
    case OpKind::BroadcastChannels: return broadcast_channels(*in[0], at.count);
    case OpKind::Upsample2: return upsample2(*in[0]);
    case OpKind::AvgPool2: return avg_pool2(*in[0]);
    case OpKind::Relu: return relu(*in[0]);
    case OpKind::LeakyRelu: return leaky_relu(*in[0], at.scalar);
    case OpKind::Tanh: return tanh(*in[0]);
    case OpKind::Sigmoid: return sigmoid(*in[0]);
    case OpKind::Log: return log(*in[0]);
    case OpKind::Sqrt: return sqrt(*in[0]);
    case OpKind::Square: return square(*in[0]);
    case OpKind::Abs: return abs(*in[0]);
    case OpKind::Clamp: return clamp(*in[0], at.lo, at.hi);
    case OpKind::ReduceSum: return reduce_sum(*in[0]);
    case OpKind::ReduceMean: return reduce_mean(*in[0]);
    case OpKind::BroadcastScalar: return broadcast_scalar(*in[0], at.shape);
    case OpKind::ConcatChannels: return concat_channels(*in[0], *in[1]);
    case OpKind::SliceChannels: return slice_channels(*in[0], at.begin, at.count);
    case OpKind::EmbedChannels: return embed_channels(*in[0], at.begin, at.count);
    case OpKind::PadReflect: return pad_reflect(*in[0], at.pad);
    case OpKind::PadReflectAdjoint: return pad_reflect_adjoint(*in[0], at.pad);
  }
  throw TapeError("forward: leaf nodes have no forward rule");
}

const Tensor& value_of(const Tensor& t) { return t; }
const Tensor& value_of(const Var& v) { return v.value(); }

// Accumulates input gradients of one node during the reverse sweep. V is
// Tensor for plain values or Var when the gradient itself is recorded.
struct ValueCtx {
  using V = Tensor;
  const Tape& tape;
  const Node& node;
  std::int32_t id;
  std::vector<std::optional<Tensor>>& grads;
  const std::vector<char>& reach;

  const Tensor& in(int i) const { return tape.node(node.inputs[i]).value; }
  const Tensor& out() const { return node.value; }
  Tensor constant(Tensor t) const { return t; }
  bool wants(int i) const { return reach[static_cast<std::size_t>(node.inputs[i])] != 0; }
  void accumulate(int i, Tensor g) {
    auto& slot = grads[static_cast<std::size_t>(node.inputs[i])];
    if (!slot) {
      slot = std::move(g);
      return;
    }
    double* dst = slot->ptr();
    const double* src = g.ptr();
    for (std::size_t k = 0; k < g.size(); ++k) dst[k] += src[k];
  }
};

struct TapeCtx {
  using V = Var;
  Tape& tape;
  const Node& node;
  std::int32_t id;
  std::vector<std::optional<Var>>& grads;
  const std::vector<char>& reach;

  Var in(int i) const { return Var(&tape, node.inputs[i]); }
  Var out() const { return Var(&tape, id); }
  Var constant(Tensor t) const { return tape.constant(std::move(t)); }
  bool wants(int i) const { return reach[static_cast<std::size_t>(node.inputs[i])] != 0; }
  void accumulate(int i, Var g) {
    auto& slot = grads[static_cast<std::size_t>(node.inputs[i])];
    slot = slot ? add(*slot, g) : g;
  }
};

// Each rule is written once against the shared Tensor/Var overload set, so
// the same code yields plain gradients or recorded (differentiable) ones.
template <class Ctx, class V>
void propagate(Ctx& c, const V& g) {
  const OpAttrs& at = c.node.attrs;
  switch (c.node.op) {
    case OpKind::Leaf:
      return;
    case OpKind::Add:
      if (c.wants(0)) c.accumulate(0, g);
      if (c.wants(1)) c.accumulate(1, g);
      return;
    case OpKind::Sub:
      if (c.wants(0)) c.accumulate(0, g);
      if (c.wants(1)) c.accumulate(1, scalar_mul(g, -1.0));
      return;
    case OpKind::Mul: {
      const auto& a = c.in(0);
      const auto& b = c.in(1);
      const bool a_scalar = value_of(a).rank() == 0 && value_of(b).rank() != 0;
      const bool b_scalar = value_of(b).rank() == 0 && value_of(a).rank() != 0;
      if (c.wants(0)) c.accumulate(0, a_scalar ? reduce_sum(mul(g, b)) : mul(g, b));
      if (c.wants(1)) c.accumulate(1, b_scalar ? reduce_sum(mul(g, a)) : mul(g, a));
      return;
    }
    case OpKind::Div: {
      const auto& b = c.in(1);
      if (c.wants(0)) c.accumulate(0, div(g, b));
      if (c.wants(1)) c.accumulate(1, scalar_mul(div(mul(g, c.out()), b), -1.0));
      return;
    }
    case OpKind::ScalarMul:
      c.accumulate(0, scalar_mul(g, at.scalar));
      return;
    case OpKind::AddScalar:
      c.accumulate(0, g);
      return;
    case OpKind::MatMul:
      if (c.wants(0)) c.accumulate(0, matmul(g, transpose(c.in(1))));
      if (c.wants(1)) c.accumulate(1, matmul(transpose(c.in(0)), g));
      return;
    case OpKind::Transpose:
      c.accumulate(0, transpose(g));
      return;
    case OpKind::Conv2d: {
      const auto& x = c.in(0);
      const auto& w = c.in(1);
      if (c.wants(0)) c.accumulate(0, conv2d_input_grad(g, w, value_of(x).shape(), at.stride, at.pad));
      if (c.wants(1)) c.accumulate(1, conv2d_weight_grad(x, g, value_of(w).shape(), at.stride, at.pad));
      return;
    }
    case OpKind::Conv2dInputGrad: {
      const auto& src = c.in(0);
      const auto& w = c.in(1);
      if (c.wants(0)) c.accumulate(0, conv2d(g, w, at.stride, at.pad));
      if (c.wants(1)) c.accumulate(1, conv2d_weight_grad(g, src, value_of(w).shape(), at.stride, at.pad));
      return;
    }
    case OpKind::Conv2dWeightGrad: {
      const auto& x = c.in(0);
      const auto& src = c.in(1);
      if (c.wants(0)) c.accumulate(0, conv2d_input_grad(src, g, value_of(x).shape(), at.stride, at.pad));
      if (c.wants(1)) c.accumulate(1, conv2d(x, g, at.stride, at.pad));
      return;
    }
    case OpKind::BiasAdd:
      if (c.wants(0)) c.accumulate(0, g);
      if (c.wants(1)) c.accumulate(1, channel_sum(g));
      return;
    case OpKind::ChannelSum:
      c.accumulate(0, channel_broadcast(g, value_of(c.in(0)).shape()));
      return;
    case OpKind::ChannelBroadcast:
      c.accumulate(0, channel_sum(g));
      return;
    case OpKind::SumChannels:
      c.accumulate(0, broadcast_channels(g, value_of(c.in(0)).dim(1)));
      return;
    case OpKind::BroadcastChannels:
      c.accumulate(0, sum_channels(g));
      return;
    case OpKind::Upsample2:
      c.accumulate(0, scalar_mul(avg_pool2(g), 4.0));
      return;
    case OpKind::AvgPool2:
      c.accumulate(0, scalar_mul(upsample2(g), 0.25));
      return;
    case OpKind::Relu:
      c.accumulate(0, mul(g, c.constant(relu_mask(value_of(c.in(0))))));
      return;
    case OpKind::LeakyRelu:
      c.accumulate(0, mul(g, c.constant(leaky_relu_mask(value_of(c.in(0)), at.scalar))));
      return;
    case OpKind::Tanh:
      c.accumulate(0, mul(g, add_scalar(scalar_mul(square(c.out()), -1.0), 1.0)));
      return;
    case OpKind::Sigmoid: {
      const auto& y = c.out();
      c.accumulate(0, mul(g, mul(y, add_scalar(scalar_mul(y, -1.0), 1.0))));
      return;
    }
    case OpKind::Log:
      c.accumulate(0, div(g, c.in(0)));
      return;
    case OpKind::Sqrt:
      c.accumulate(0, div(scalar_mul(g, 0.5), c.out()));
      return;
    case OpKind::Square:
      c.accumulate(0, mul(g, scalar_mul(c.in(0), 2.0)));
      return;
    case OpKind::Abs:
      c.accumulate(0, mul(g, c.constant(sign(value_of(c.in(0))))));
      return;
    case OpKind::Clamp:
      c.accumulate(0, mul(g, c.constant(clamp_mask(value_of(c.in(0)), at.lo, at.hi))));
      return;
    case OpKind::ReduceSum:
      c.accumulate(0, broadcast_scalar(g, value_of(c.in(0)).shape()));
      return;
    case OpKind::ReduceMean: {
      const auto& shape = value_of(c.in(0)).shape();
      c.accumulate(0, scalar_mul(broadcast_scalar(g, shape), 1.0 / static_cast<double>(shape_numel(shape))));
      return;
    }
    case OpKind::BroadcastScalar:
      c.accumulate(0, reduce_sum(g));
      return;
    case OpKind::ConcatChannels: {
      const std::size_t ca = value_of(c.in(0)).dim(1);
      const std::size_t cb = value_of(c.in(1)).dim(1);
      if (c.wants(0)) c.accumulate(0, slice_channels(g, 0, ca));
      if (c.wants(1)) c.accumulate(1, slice_channels(g, ca, cb));
      return;
    }
    case OpKind::SliceChannels:
      c.accumulate(0, embed_channels(g, at.begin, value_of(c.in(0)).dim(1)));
      return;
    case OpKind::EmbedChannels:
      c.accumulate(0, slice_channels(g, at.begin, value_of(c.in(0)).dim(1)));
      return;
    case OpKind::PadReflect:
      c.accumulate(0, pad_reflect_adjoint(g, at.pad));
      return;
    case OpKind::PadReflectAdjoint:
      c.accumulate(0, pad_reflect(g, at.pad));
      return;
  }
}

void check_scalar_loss(const Var& loss) {
  if (loss.value().rank() != 0) {
    throw TapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
}

Var unary(OpKind op, const Var& x, OpAttrs attrs = {}) {
  if (!x.valid()) throw TapeError(std::string(op_name(op)) + ": input is not on a tape");
  const Var in[1] = {x};
  return x.tape()->apply(op, in, std::move(attrs));
}

Var binary(OpKind op, const Var& a, const Var& b, OpAttrs attrs = {}) {
  if (!a.valid()) throw TapeError(std::string(op_name(op)) + ": input is not on a tape");
  const Var in[2] = {a, b};
  return a.tape()->apply(op, in, std::move(attrs));
}


// Marks nodes in [lowest, loss] through which a gradient can reach one of
// the requested nodes; the reverse sweep skips everything else.
std::vector<char> reachable(const std::deque<Node>& nodes, std::span<const Var> wrt, std::int32_t lowest,
                            std::int32_t loss) {
  std::vector<char> reach(nodes.size(), 0);
  for (const auto& v : wrt) reach[static_cast<std::size_t>(v.id())] = 1;
  for (std::int32_t id = lowest; id <= loss; ++id) {
    const Node& n = nodes[static_cast<std::size_t>(id)];
    if (n.op == OpKind::Leaf) continue;
    for (std::size_t i = 0; i < n.arity; ++i) {
      if (reach[static_cast<std::size_t>(n.inputs[i])]) reach[static_cast<std::size_t>(id)] = 1;
    }
  }
  return reach;
}

}  // namespace

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::ScalarMul: return "scalar_mul";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::MatMul: return "matmul";
    case OpKind::Transpose: return "transpose";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Conv2dInputGrad: return "conv2d_input_grad";
    case OpKind::Conv2dWeightGrad: return "conv2d_weight_grad";
    case OpKind::BiasAdd: return "bias_add";
    case OpKind::ChannelSum: return "channel_sum";
    case OpKind::ChannelBroadcast: return "channel_broadcast";
    case OpKind::SumChannels: return "sum_channels";
    case OpKind::BroadcastChannels: return "broadcast_channels";
    case OpKind::Upsample2: return "upsample2";
    case OpKind::AvgPool2: return "avg_pool2";
    case OpKind::Relu: return "relu";
    case OpKind::LeakyRelu: return "leaky_relu";
    case OpKind::Tanh: return "tanh";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Log: return "log";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::Square: return "square";
    case OpKind::Abs: return "abs";
    case OpKind::Clamp: return "clamp";
    case OpKind::ReduceSum: return "reduce_sum";
    case OpKind::ReduceMean: return "reduce_mean";
    case OpKind::BroadcastScalar: return "broadcast_scalar";
    case OpKind::ConcatChannels: return "concat_channels";
    case OpKind::SliceChannels: return "slice_channels";
    case OpKind::EmbedChannels: return "embed_channels";
    case OpKind::PadReflect: return "pad_reflect";
    case OpKind::PadReflectAdjoint: return "pad_reflect_adjoint";
  }
  return "?";
}

const Tensor& Var::value() const {
  if (!tape_) throw TapeError("var: not bound to a tape");
  return tape_->node(id_).value;
}

bool Var::requires_grad() const { return tape_ && tape_->node(id_).requires_grad; }

void Tape::check_owned(const Var& v, const char* what) const {
  if (v.tape() != this || v.id() < 0 || static_cast<std::size_t>(v.id()) >= nodes_.size()) {
    throw TapeError(std::string(what) + ": node is not on this tape");
  }
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.op = OpKind::Leaf;
  n.requires_grad = requires_grad;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::int32_t>(nodes_.size() - 1));
}

Var Tape::apply(OpKind op, std::span<const Var> inputs, OpAttrs attrs) {
  if (inputs.size() > 2 || op == OpKind::Leaf) throw TapeError("apply: bad op arity");
  Node n;
  n.op = op;
  n.arity = static_cast<std::uint8_t>(inputs.size());
  const Tensor* in[2] = {nullptr, nullptr};
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    check_owned(inputs[i], op_name(op));
    n.inputs[i] = inputs[i].id();
    in[i] = &nodes_[static_cast<std::size_t>(inputs[i].id())].value;
    n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(inputs[i].id())].requires_grad;
  }
  n.value = forward(op, in, attrs);
  if (!n.value.all_finite()) throw NumericError(std::string(op_name(op)) + ": non-finite output");
  n.attrs = std::move(attrs);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::int32_t>(nodes_.size() - 1));
}

std::vector<Tensor> Tape::gradients(const Var& loss, std::span<const Var> wrt) {
  check_owned(loss, "backward");
  check_scalar_loss(loss);
  std::vector<char> keep(nodes_.size(), 0);
  std::int32_t lowest = loss.id();
  for (const auto& v : wrt) {
    check_owned(v, "backward");
    keep[static_cast<std::size_t>(v.id())] = 1;
    lowest = std::min(lowest, v.id());
  }
  const auto reach = reachable(nodes_, wrt, lowest, loss.id());
  std::vector<std::optional<Tensor>> grads(nodes_.size());
  grads[static_cast<std::size_t>(loss.id())] = Tensor::scalar(1.0);
  for (std::int32_t id = loss.id(); id > lowest; --id) {
    auto& slot = grads[static_cast<std::size_t>(id)];
    const Node& node = nodes_[static_cast<std::size_t>(id)];
    if (!slot || !reach[static_cast<std::size_t>(id)] || node.op == OpKind::Leaf) continue;
    ValueCtx ctx{*this, node, id, grads, reach};
    if (keep[static_cast<std::size_t>(id)]) {
      propagate(ctx, *slot);
    } else {
      Tensor g = std::move(*slot);
      slot.reset();
      propagate(ctx, g);
    }
  }
  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const auto& v : wrt) {
    auto& slot = grads[static_cast<std::size_t>(v.id())];
    out.push_back(slot ? *slot : Tensor(v.shape()));
  }
  return out;
}

std::vector<Var> Tape::gradients_on_tape(const Var& loss, std::span<const Var> wrt) {
  if (mode_ != TapeMode::Differentiable) {
    throw TapeError("backward: recorded gradients need a tape in differentiable mode");
  }
  check_owned(loss, "backward");
  check_scalar_loss(loss);
  std::int32_t lowest = loss.id();
  for (const auto& v : wrt) {
    check_owned(v, "backward");
    lowest = std::min(lowest, v.id());
  }
  const auto reach = reachable(nodes_, wrt, lowest, loss.id());
  std::vector<std::optional<Var>> grads(nodes_.size());
  grads[static_cast<std::size_t>(loss.id())] = constant(Tensor::scalar(1.0));
  for (std::int32_t id = loss.id(); id > lowest; --id) {
    const auto& slot = grads[static_cast<std::size_t>(id)];
    const Node& node = nodes_[static_cast<std::size_t>(id)];
    if (!slot || !reach[static_cast<std::size_t>(id)] || node.op == OpKind::Leaf) continue;
    TapeCtx ctx{*this, node, id, grads, reach};
    const Var g = *slot;
    propagate(ctx, g);
  }
  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const auto& v : wrt) {
    const auto& slot = grads[static_cast<std::size_t>(v.id())];
    out.push_back(slot ? *slot : constant(Tensor(v.shape())));
  }
  return out;
}

std::size_t Tape::replay(std::span<const Tensor> leaf_values) {
  std::size_t next_leaf = 0;
  std::size_t recomputed = 0;
  for (auto& n : nodes_) {
    if (n.op == OpKind::Leaf) {
      if (next_leaf >= leaf_values.size()) throw TapeError("replay: too few leaf values");
      if (leaf_values[next_leaf].shape() != n.value.shape()) {
        throw ShapeError("replay: leaf " + std::to_string(next_leaf) + " expects shape " + shape_str(n.value.shape()));
      }
      n.value = leaf_values[next_leaf++];
      continue;
    }
    const Tensor* in[2] = {nullptr, nullptr};
    for (std::size_t i = 0; i < n.arity; ++i) in[i] = &nodes_[static_cast<std::size_t>(n.inputs[i])].value;
    n.value = forward(n.op, in, n.attrs);
    if (!n.value.all_finite()) throw NumericError(std::string(op_name(n.op)) + ": non-finite output");
    ++recomputed;
  }
  if (next_leaf != leaf_values.size()) throw TapeError("replay: too many leaf values");
  return recomputed;
}

Var add(const Var& a, const Var& b) { return binary(OpKind::Add, a, b); }
Var sub(const Var& a, const Var& b) { return binary(OpKind::Sub, a, b); }
Var mul(const Var& a, const Var& b) { return binary(OpKind::Mul, a, b); }
Var div(const Var& a, const Var& b) { return binary(OpKind::Div, a, b); }

Var scalar_mul(const Var& a, double s) {
  OpAttrs at;
  at.scalar = s;
  return unary(OpKind::ScalarMul, a, at);
}

Var add_scalar(const Var& a, double s) {
  OpAttrs at;
  at.scalar = s;
  return unary(OpKind::AddScalar, a, at);
}

Var matmul(const Var& a, const Var& b) { return binary(OpKind::MatMul, a, b); }
Var transpose(const Var& a) { return unary(OpKind::Transpose, a); }

Var conv2d(const Var& x, const Var& w, int stride, int pad) {
  OpAttrs at;
  at.stride = stride;
  at.pad = pad;
  return binary(OpKind::Conv2d, x, w, at);
}

Var conv2d_input_grad(const Var& g, const Var& w, const Shape& input_shape, int stride, int pad) {
  OpAttrs at;
  at.stride = stride;
  at.pad = pad;
  at.shape = input_shape;
  return binary(OpKind::Conv2dInputGrad, g, w, at);
}

Var conv2d_weight_grad(const Var& x, const Var& g, const Shape& weight_shape, int stride, int pad) {
  OpAttrs at;
  at.stride = stride;
  at.pad = pad;
  at.shape = weight_shape;
  return binary(OpKind::Conv2dWeightGrad, x, g, at);
}

Var bias_add(const Var& x, const Var& b) { return binary(OpKind::BiasAdd, x, b); }
Var channel_sum(const Var& x) { return unary(OpKind::ChannelSum, x); }

Var channel_broadcast(const Var& b, const Shape& shape) {
  OpAttrs at;
  at.shape = shape;
  return unary(OpKind::ChannelBroadcast, b, at);
}

Var sum_channels(const Var& x) { return unary(OpKind::SumChannels, x); }

Var broadcast_channels(const Var& x, std::size_t channels) {
  OpAttrs at;
  at.count = channels;
  return unary(OpKind::BroadcastChannels, x, at);
}

Var upsample2(const Var& x) { return unary(OpKind::Upsample2, x); }
Var avg_pool2(const Var& x) { return unary(OpKind::AvgPool2, x); }
Var relu(const Var& x) { return unary(OpKind::Relu, x); }

Var leaky_relu(const Var& x, double slope) {
  OpAttrs at;
  at.scalar = slope;
  return unary(OpKind::LeakyRelu, x, at);
}

Var tanh(const Var& x) { return unary(OpKind::Tanh, x); }
Var sigmoid(const Var& x) { return unary(OpKind::Sigmoid, x); }
Var log(const Var& x) { return unary(OpKind::Log, x); }
Var sqrt(const Var& x) { return unary(OpKind::Sqrt, x); }
Var square(const Var& x) { return unary(OpKind::Square, x); }
Var abs(const Var& x) { return unary(OpKind::Abs, x); }

Var clamp(const Var& x, double lo, double hi) {
  OpAttrs at;
  at.lo = lo;
  at.hi = hi;
  return unary(OpKind::Clamp, x, at);
}

Var reduce_sum(const Var& x) { return unary(OpKind::ReduceSum, x); }
Var reduce_mean(const Var& x) { return unary(OpKind::ReduceMean, x); }

Var broadcast_scalar(const Var& s, const Shape& shape) {
  OpAttrs at;
  at.shape = shape;
  return unary(OpKind::BroadcastScalar, s, at);
}

Var concat_channels(const Var& a, const Var& b) { return binary(OpKind::ConcatChannels, a, b); }

Var slice_channels(const Var& x, std::size_t begin, std::size_t count) {
  OpAttrs at;
  at.begin = begin;
  at.count = count;
  return unary(OpKind::SliceChannels, x, at);
}

Var embed_channels(const Var& x, std::size_t begin, std::size_t total) {
  OpAttrs at;
  at.begin = begin;
  at.count = total;
  return unary(OpKind::EmbedChannels, x, at);
}

Var pad_reflect(const Var& x, int pad) {
  OpAttrs at;
  at.pad = pad;
  return unary(OpKind::PadReflect, x, at);
}

Var pad_reflect_adjoint(const Var& g, int pad) {
  OpAttrs at;
  at.pad = pad;
  return unary(OpKind::PadReflectAdjoint, g, at);
}

}  // namespace bilevel::ad
