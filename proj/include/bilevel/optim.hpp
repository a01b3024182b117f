#pragma once

#include <cstdint>
#include <vector>

#include "bilevel/params.hpp"

namespace bilevel::optim {

/// Per-parameter Adam moments. m and v mirror the layout of the parameters
/// they were created for.
struct AdamState {
  ParameterSet m;
  ParameterSet v;
  std::uint64_t t = 0;
  double rate = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;

  AdamState() = default;
  AdamState(const ParameterSet& params, double rate);

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// One bias-corrected Adam step applied in place to theta. grads must carry
/// exactly theta's names and shapes, all finite; otherwise std::invalid_argument
/// and neither theta nor state is modified.
void adam_step(AdamState& state, ParameterSet& theta, const ParameterSet& grads);

struct SgdConfig {
  double rate = 0.01;
  void validate() const;
};

/// theta − rate·grads as plain values.
ParameterSet sgd_step(const ParameterSet& theta, const ParameterSet& grads, double rate);

/// theta' = theta − rate·grads recorded on the tape, so outer gradients flow
/// through the update. All vars must live on one Differentiable tape.
std::vector<ad::Var> sgd_step_differentiable(const std::vector<ad::Var>& theta, const std::vector<ad::Var>& grads,
                                             double rate);

}  // namespace bilevel::optim
