#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bilevel {

/// Raised when operand shapes do not satisfy an op's shape rule.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a computation produces NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles. Rank 0 is a scalar holding one value.
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor(Shape{}, value); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* ptr() { return data_.data(); }
  const double* ptr() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Value of a single-element tensor.
  double item() const;

  // [N,C,H,W] element access.
  double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  bool all_finite() const;
  Tensor reshaped(Shape shape) const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Eager kernels. Each validates its shape rule and throws ShapeError naming
// the op and the offending shapes.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
/// Elementwise product; either operand may be a scalar.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// x: [N,Cin,H,W], w: [Cout,Cin,k,k]; zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);
/// Adjoint of conv2d with respect to its input; input_shape is x's shape.
Tensor conv2d_input_grad(const Tensor& g, const Tensor& w, const Shape& input_shape, int stride, int pad);
/// Adjoint of conv2d with respect to its weight; weight_shape is w's shape.
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& g, const Shape& weight_shape, int stride, int pad);

Tensor bias_add(const Tensor& x, const Tensor& b);
Tensor channel_sum(const Tensor& x);
Tensor channel_broadcast(const Tensor& b, const Shape& shape);
Tensor sum_channels(const Tensor& x);
Tensor broadcast_channels(const Tensor& x, std::size_t channels);

Tensor upsample2(const Tensor& x);
Tensor avg_pool2(const Tensor& x);

Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor reduce_sum(const Tensor& x);
Tensor reduce_mean(const Tensor& x);
Tensor broadcast_scalar(const Tensor& s, const Shape& shape);

Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t count);
Tensor embed_channels(const Tensor& x, std::size_t begin, std::size_t total);

Tensor pad_reflect(const Tensor& x, int pad);
Tensor pad_reflect_adjoint(const Tensor& g, int pad);

// Piecewise-constant derivative masks. The derivative at a kink is 0.
Tensor relu_mask(const Tensor& x);
Tensor leaky_relu_mask(const Tensor& x, double slope);
Tensor sign(const Tensor& x);
Tensor clamp_mask(const Tensor& x, double lo, double hi);

}  // namespace ad
}  // namespace bilevel
