#include "bilevel/gradcheck.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <stdexcept>

namespace bilevel {

ParameterSet finite_diff_gradient(const ScalarFn& f, const ParameterSet& theta, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_gradient: eps must be positive");
  const double base = f(theta);
  if (std::bit_cast<std::uint64_t>(base) != std::bit_cast<std::uint64_t>(f(theta))) {
    throw std::invalid_argument("finite_diff_gradient: function is not deterministic");
  }
  ParameterSet probe = theta;
  ParameterSet grad = theta.zeros_like();
  for (std::size_t t = 0; t < theta.size(); ++t) {
    for (std::size_t i = 0; i < theta[t].size(); ++i) {
      const double orig = theta[t][i];
      probe[t][i] = orig + eps;
      const double up = f(probe);
      probe[t][i] = orig - eps;
      const double down = f(probe);
      probe[t][i] = orig;
      grad[t][i] = (up - down) / (2.0 * eps);
    }
  }
  return grad;
}

double max_relative_error(std::span<const double> a, std::span<const double> b, double floor) {
  if (a.size() != b.size()) throw std::invalid_argument("max_relative_error: size mismatch");
  double diff = 0.0;
  double scale = floor;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::fabs(a[i] - b[i]));
    scale = std::max(scale, std::fabs(b[i]));
  }
  return diff / scale;
}

double max_relative_error(const ParameterSet& a, const ParameterSet& b, double floor) {
  if (!a.same_layout(b)) throw std::invalid_argument("max_relative_error: layouts differ");
  std::vector<double> fa, fb;
  for (std::size_t t = 0; t < a.size(); ++t) {
    fa.insert(fa.end(), a[t].data().begin(), a[t].data().end());
    fb.insert(fb.end(), b[t].data().begin(), b[t].data().end());
  }
  return max_relative_error(fa, fb, floor);
}

}  // namespace bilevel
