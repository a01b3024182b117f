#include "bilevel/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace bilevel::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

[[noreturn]] void shape_fail(const char* op, const Shape& a) {
  throw ShapeError(std::string(op) + ": bad shape " + shape_str(a));
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail(op, a.shape(), b.shape());
}

void require_rank4(const char* op, const Tensor& x) {
  if (x.rank() != 4) shape_fail(op, x.shape());
}

template <class F>
Tensor map_unary(const Tensor& x, F f) {
  Tensor out(x.shape());
  const double* src = x.ptr();
  double* dst = out.ptr();
  for (std::size_t i = 0; i < x.size(); ++i) dst[i] = f(src[i]);
  return out;
}

template <class F>
Tensor map_binary(const Tensor& a, const Tensor& b, F f) {
  Tensor out(a.shape());
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  double* dst = out.ptr();
  for (std::size_t i = 0; i < a.size(); ++i) dst[i] = f(pa[i], pb[i]);
  return out;
}

struct ConvGeom {
  std::size_t n, ci, h, w, co, k, ho, wo;
  int stride, pad;
  std::size_t patch() const { return ci * k * k; }
  std::size_t out_pixels() const { return ho * wo; }
};

ConvGeom conv_geom(const char* op, const Shape& x, const Shape& w, int stride, int pad) {
  if (x.size() != 4 || w.size() != 4 || w[2] != w[3] || x[1] != w[1]) shape_fail(op, x, w);
  if (stride < 1 || pad < 0) throw ShapeError(std::string(op) + ": stride must be >= 1 and pad >= 0");
  const auto k = w[2];
  const auto ph = x[2] + 2 * static_cast<std::size_t>(pad);
  const auto pw = x[3] + 2 * static_cast<std::size_t>(pad);
  if (ph < k || pw < k) shape_fail(op, x, w);
  return ConvGeom{x[0], x[1], x[2], x[3], w[0], k,
                  (ph - k) / static_cast<std::size_t>(stride) + 1,
                  (pw - k) / static_cast<std::size_t>(stride) + 1, stride, pad};
}

// cols: [Ci*k*k, Ho*Wo]
void im2col(const double* x, const ConvGeom& g, double* cols) {
  const long pad = g.pad;
  const long s = g.stride;
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.ci; ++c) {
    const double* plane = x + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj, ++row) {
        double* dst = cols + row * g.out_pixels();
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const long ih = static_cast<long>(oh) * s - pad + static_cast<long>(ki);
          double* drow = dst + oh * g.wo;
          if (ih < 0 || ih >= static_cast<long>(g.h)) {
            std::fill(drow, drow + g.wo, 0.0);
            continue;
          }
          const double* srow = plane + static_cast<std::size_t>(ih) * g.w;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const long iw = static_cast<long>(ow) * s - pad + static_cast<long>(kj);
            drow[ow] = (iw < 0 || iw >= static_cast<long>(g.w)) ? 0.0 : srow[iw];
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeom& g, double* x) {
  const long pad = g.pad;
  const long s = g.stride;
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.ci; ++c) {
    double* plane = x + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj, ++row) {
        const double* src = cols + row * g.out_pixels();
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const long ih = static_cast<long>(oh) * s - pad + static_cast<long>(ki);
          if (ih < 0 || ih >= static_cast<long>(g.h)) continue;
          double* drow = plane + static_cast<std::size_t>(ih) * g.w;
          const double* srow = src + oh * g.wo;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const long iw = static_cast<long>(ow) * s - pad + static_cast<long>(kj);
            if (iw >= 0 && iw < static_cast<long>(g.w)) drow[iw] += srow[ow];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeom& g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

std::size_t reflect_index(long i, std::size_t n) {
  if (i < 0) i = -i;
  if (i >= static_cast<long>(n)) i = 2 * static_cast<long>(n) - 2 - i;
  return static_cast<std::size_t>(i);
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_numel(shape_)) {
    throw ShapeError("tensor: " + std::to_string(data_.size()) + " values for shape " + shape_str(shape_));
  }
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape_) + " is not a scalar");
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) shape_fail("reshape", shape_, shape);
  return Tensor(std::move(shape), data_);
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  return map_binary(a, b, [](double x, double y) { return x + y; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  return map_binary(a, b, [](double x, double y) { return x - y; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return map_binary(a, b, [](double x, double y) { return x * y; });
  if (a.rank() == 0) return scalar_mul(b, a[0]);
  if (b.rank() == 0) return scalar_mul(a, b[0]);
  shape_fail("mul", a.shape(), b.shape());
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same("div", a, b);
  return map_binary(a, b, [](double x, double y) { return x / y; });
}

Tensor scalar_mul(const Tensor& a, double s) {
  return map_unary(a, [s](double x) { return x * s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return map_unary(a, [s](double x) { return x + s; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_fail("matmul", a.shape(), b.shape());
  Tensor out({a.dim(0), b.dim(1)});
  ConstMapMat ma(a.ptr(), a.dim(0), a.dim(1));
  ConstMapMat mb(b.ptr(), b.dim(0), b.dim(1));
  MapMat mo(out.ptr(), a.dim(0), b.dim(1));
  mo.noalias() = ma * mb;
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) shape_fail("transpose", a.shape());
  Tensor out({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) out[j * a.dim(0) + i] = a[i * a.dim(1) + j];
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  const auto g = conv_geom("conv2d", x.shape(), w.shape(), stride, pad);
  Tensor out({g.n, g.co, g.ho, g.wo});
  ConstMapMat mw(w.ptr(), g.co, g.patch());
  RowMat cols(g.patch(), g.out_pixels());
  for (std::size_t n = 0; n < g.n; ++n) {
    const double* xn = x.ptr() + n * g.ci * g.h * g.w;
    MapMat mo(out.ptr() + n * g.co * g.out_pixels(), g.co, g.out_pixels());
    if (is_pointwise(g)) {
      mo.noalias() = mw * ConstMapMat(xn, g.ci, g.out_pixels());
    } else {
      im2col(xn, g, cols.data());
      mo.noalias() = mw * cols;
    }
  }
  return out;
}

Tensor conv2d_input_grad(const Tensor& gout, const Tensor& w, const Shape& input_shape, int stride, int pad) {
  const auto g = conv_geom("conv2d_input_grad", input_shape, w.shape(), stride, pad);
  if (gout.shape() != Shape{g.n, g.co, g.ho, g.wo}) shape_fail("conv2d_input_grad", gout.shape(), w.shape());
  Tensor gx(input_shape);
  ConstMapMat mw(w.ptr(), g.co, g.patch());
  RowMat cols(g.patch(), g.out_pixels());
  for (std::size_t n = 0; n < g.n; ++n) {
    ConstMapMat mg(gout.ptr() + n * g.co * g.out_pixels(), g.co, g.out_pixels());
    double* gxn = gx.ptr() + n * g.ci * g.h * g.w;
    if (is_pointwise(g)) {
      MapMat(gxn, g.ci, g.out_pixels()).noalias() = mw.transpose() * mg;
    } else {
      cols.noalias() = mw.transpose() * mg;
      col2im_add(cols.data(), g, gxn);
    }
  }
  return gx;
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& gout, const Shape& weight_shape, int stride, int pad) {
  const auto g = conv_geom("conv2d_weight_grad", x.shape(), weight_shape, stride, pad);
  if (gout.shape() != Shape{g.n, g.co, g.ho, g.wo}) shape_fail("conv2d_weight_grad", x.shape(), gout.shape());
  Tensor gw(weight_shape);
  MapMat mgw(gw.ptr(), g.co, g.patch());
  RowMat cols(g.patch(), g.out_pixels());
  for (std::size_t n = 0; n < g.n; ++n) {
    const double* xn = x.ptr() + n * g.ci * g.h * g.w;
    ConstMapMat mg(gout.ptr() + n * g.co * g.out_pixels(), g.co, g.out_pixels());
    if (is_pointwise(g)) {
      mgw.noalias() += mg * ConstMapMat(xn, g.ci, g.out_pixels()).transpose();
    } else {
      im2col(xn, g, cols.data());
      mgw.noalias() += mg * cols.transpose();
    }
  }
  return gw;
}

Tensor bias_add(const Tensor& x, const Tensor& b) {
  if (x.rank() != 4 || b.rank() != 1 || b.dim(0) != x.dim(1)) shape_fail("bias_add", x.shape(), b.shape());
  Tensor out = x;
  const std::size_t plane = x.dim(2) * x.dim(3);
  double* p = out.ptr();
  for (std::size_t n = 0; n < x.dim(0); ++n)
    for (std::size_t c = 0; c < x.dim(1); ++c, p += plane)
      for (std::size_t i = 0; i < plane; ++i) p[i] += b[c];
  return out;
}

Tensor channel_sum(const Tensor& x) {
  require_rank4("channel_sum", x);
  Tensor out({x.dim(1)});
  const std::size_t plane = x.dim(2) * x.dim(3);
  const double* p = x.ptr();
  for (std::size_t n = 0; n < x.dim(0); ++n)
    for (std::size_t c = 0; c < x.dim(1); ++c, p += plane) {
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      out[c] += acc;
    }
  return out;
}

Tensor channel_broadcast(const Tensor& b, const Shape& shape) {
  if (shape.size() != 4 || b.rank() != 1 || b.dim(0) != shape[1]) shape_fail("channel_broadcast", b.shape(), shape);
  return bias_add(Tensor(shape), b);
}

Tensor sum_channels(const Tensor& x) {
  require_rank4("sum_channels", x);
  const std::size_t plane = x.dim(2) * x.dim(3);
  Tensor out({x.dim(0), 1, x.dim(2), x.dim(3)});
  for (std::size_t n = 0; n < x.dim(0); ++n) {
    double* dst = out.ptr() + n * plane;
    for (std::size_t c = 0; c < x.dim(1); ++c) {
      const double* src = x.ptr() + (n * x.dim(1) + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] += src[i];
    }
  }
  return out;
}

Tensor broadcast_channels(const Tensor& x, std::size_t channels) {
  if (x.rank() != 4 || x.dim(1) != 1) shape_fail("broadcast_channels", x.shape());
  const std::size_t plane = x.dim(2) * x.dim(3);
  Tensor out({x.dim(0), channels, x.dim(2), x.dim(3)});
  for (std::size_t n = 0; n < x.dim(0); ++n)
    for (std::size_t c = 0; c < channels; ++c)
      std::copy_n(x.ptr() + n * plane, plane, out.ptr() + (n * channels + c) * plane);
  return out;
}

Tensor upsample2(const Tensor& x) {
  require_rank4("upsample2", x);
  const std::size_t h = x.dim(2), w = x.dim(3);
  Tensor out({x.dim(0), x.dim(1), 2 * h, 2 * w});
  for (std::size_t p = 0; p < x.dim(0) * x.dim(1); ++p) {
    const double* src = x.ptr() + p * h * w;
    double* dst = out.ptr() + p * 4 * h * w;
    for (std::size_t i = 0; i < 2 * h; ++i)
      for (std::size_t j = 0; j < 2 * w; ++j) dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
  }
  return out;
}

Tensor avg_pool2(const Tensor& x) {
  require_rank4("avg_pool2", x);
  if (x.dim(2) % 2 || x.dim(3) % 2) shape_fail("avg_pool2", x.shape());
  const std::size_t h = x.dim(2) / 2, w = x.dim(3) / 2;
  Tensor out({x.dim(0), x.dim(1), h, w});
  for (std::size_t p = 0; p < x.dim(0) * x.dim(1); ++p) {
    const double* src = x.ptr() + p * 4 * h * w;
    double* dst = out.ptr() + p * h * w;
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const double* s = src + 2 * i * 2 * w + 2 * j;
        dst[i * w + j] = 0.25 * (s[0] + s[1] + s[2 * w] + s[2 * w + 1]);
      }
  }
  return out;
}

Tensor relu(const Tensor& x) {
  return map_unary(x, [](double v) { return v > 0.0 ? v : 0.0; });
}

Tensor leaky_relu(const Tensor& x, double slope) {
  return map_unary(x, [slope](double v) { return v > 0.0 ? v : slope * v; });
}

Tensor tanh(const Tensor& x) {
  return map_unary(x, [](double v) { return std::tanh(v); });
}

Tensor sigmoid(const Tensor& x) {
  return map_unary(x, [](double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
}

Tensor log(const Tensor& x) {
  return map_unary(x, [](double v) { return std::log(v); });
}

Tensor sqrt(const Tensor& x) {
  return map_unary(x, [](double v) { return std::sqrt(v); });
}

Tensor square(const Tensor& x) {
  return map_unary(x, [](double v) { return v * v; });
}

Tensor abs(const Tensor& x) {
  return map_unary(x, [](double v) { return std::fabs(v); });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return map_unary(x, [lo, hi](double v) { return std::clamp(v, lo, hi); });
}

Tensor reduce_sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return Tensor::scalar(acc);
}

Tensor reduce_mean(const Tensor& x) {
  return Tensor::scalar(reduce_sum(x)[0] / static_cast<double>(x.size()));
}

Tensor broadcast_scalar(const Tensor& s, const Shape& shape) {
  if (s.rank() != 0) shape_fail("broadcast_scalar", s.shape(), shape);
  return Tensor(shape, s[0]);
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    shape_fail("concat_channels", a.shape(), b.shape());
  const std::size_t plane = a.dim(2) * a.dim(3);
  const std::size_t ca = a.dim(1), cb = b.dim(1);
  Tensor out({a.dim(0), ca + cb, a.dim(2), a.dim(3)});
  for (std::size_t n = 0; n < a.dim(0); ++n) {
    double* dst = out.ptr() + n * (ca + cb) * plane;
    std::copy_n(a.ptr() + n * ca * plane, ca * plane, dst);
    std::copy_n(b.ptr() + n * cb * plane, cb * plane, dst + ca * plane);
  }
  return out;
}

Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t count) {
  if (x.rank() != 4 || begin + count > x.dim(1) || count == 0) shape_fail("slice_channels", x.shape());
  const std::size_t plane = x.dim(2) * x.dim(3);
  Tensor out({x.dim(0), count, x.dim(2), x.dim(3)});
  for (std::size_t n = 0; n < x.dim(0); ++n)
    std::copy_n(x.ptr() + (n * x.dim(1) + begin) * plane, count * plane, out.ptr() + n * count * plane);
  return out;
}

Tensor embed_channels(const Tensor& x, std::size_t begin, std::size_t total) {
  if (x.rank() != 4 || begin + x.dim(1) > total) shape_fail("embed_channels", x.shape());
  const std::size_t plane = x.dim(2) * x.dim(3);
  Tensor out({x.dim(0), total, x.dim(2), x.dim(3)});
  for (std::size_t n = 0; n < x.dim(0); ++n)
    std::copy_n(x.ptr() + n * x.dim(1) * plane, x.dim(1) * plane, out.ptr() + (n * total + begin) * plane);
  return out;
}

Tensor pad_reflect(const Tensor& x, int pad) {
  require_rank4("pad_reflect", x);
  const std::size_t h = x.dim(2), w = x.dim(3);
  if (pad < 0 || static_cast<std::size_t>(pad) >= h || static_cast<std::size_t>(pad) >= w)
    shape_fail("pad_reflect", x.shape());
  const std::size_t p = static_cast<std::size_t>(pad);
  const std::size_t oh = h + 2 * p, ow = w + 2 * p;
  Tensor out({x.dim(0), x.dim(1), oh, ow});
  for (std::size_t q = 0; q < x.dim(0) * x.dim(1); ++q) {
    const double* src = x.ptr() + q * h * w;
    double* dst = out.ptr() + q * oh * ow;
    for (std::size_t i = 0; i < oh; ++i) {
      const std::size_t si = reflect_index(static_cast<long>(i) - pad, h);
      for (std::size_t j = 0; j < ow; ++j) dst[i * ow + j] = src[si * w + reflect_index(static_cast<long>(j) - pad, w)];
    }
  }
  return out;
}

Tensor pad_reflect_adjoint(const Tensor& g, int pad) {
  require_rank4("pad_reflect_adjoint", g);
  const std::size_t p = static_cast<std::size_t>(pad);
  if (pad < 0 || g.dim(2) <= 3 * p || g.dim(3) <= 3 * p) shape_fail("pad_reflect_adjoint", g.shape());
  const std::size_t oh = g.dim(2), ow = g.dim(3);
  const std::size_t h = oh - 2 * p, w = ow - 2 * p;
  Tensor out({g.dim(0), g.dim(1), h, w});
  for (std::size_t q = 0; q < g.dim(0) * g.dim(1); ++q) {
    const double* src = g.ptr() + q * oh * ow;
    double* dst = out.ptr() + q * h * w;
    for (std::size_t i = 0; i < oh; ++i) {
      const std::size_t si = reflect_index(static_cast<long>(i) - pad, h);
      for (std::size_t j = 0; j < ow; ++j) dst[si * w + reflect_index(static_cast<long>(j) - pad, w)] += src[i * ow + j];
    }
  }
  return out;
}

Tensor relu_mask(const Tensor& x) {
  return map_unary(x, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor leaky_relu_mask(const Tensor& x, double slope) {
  return map_unary(x, [slope](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? slope : 0.0); });
}

Tensor sign(const Tensor& x) {
  return map_unary(x, [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor clamp_mask(const Tensor& x, double lo, double hi) {
  return map_unary(x, [lo, hi](double v) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

}  // namespace bilevel::ad
