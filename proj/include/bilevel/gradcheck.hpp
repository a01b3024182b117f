#pragma once

#include <functional>
#include <span>

#include "bilevel/params.hpp"

namespace bilevel {

using ScalarFn = std::function<double(const ParameterSet&)>;

/// Central-difference estimate (f(θ+εe) − f(θ−εe)) / 2ε for every scalar
/// coordinate of θ. f must be deterministic: it is evaluated twice at θ and a
/// mismatch is rejected with std::invalid_argument.
ParameterSet finite_diff_gradient(const ScalarFn& f, const ParameterSet& theta, double eps);

/// max_i |a_i − b_i| / max(max_i |b_i|, floor). Sets must share a layout.
double max_relative_error(const ParameterSet& a, const ParameterSet& b, double floor = 1e-12);
double max_relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-12);

}  // namespace bilevel
