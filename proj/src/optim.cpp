#include "bilevel/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace bilevel::optim {
namespace {

void check_grads(const ParameterSet& theta, const ParameterSet& grads, const char* what) {
  if (grads.names() != theta.names()) {
    for (const auto& n : theta.names()) {
      try {
        grads.index(n);
      } catch (const std::out_of_range&) {
        throw std::invalid_argument(std::string(what) + ": missing gradient for '" + n + "'");
      }
    }
    for (const auto& n : grads.names()) {
      try {
        theta.index(n);
      } catch (const std::out_of_range&) {
        throw std::invalid_argument(std::string(what) + ": unexpected gradient '" + n + "'");
      }
    }
    throw std::invalid_argument(std::string(what) + ": gradient order differs from parameters");
  }
  for (std::size_t i = 0; i < theta.size(); ++i) {
    if (grads[i].shape() != theta[i].shape()) {
      throw std::invalid_argument(std::string(what) + ": gradient shape mismatch for '" + theta.name(i) + "'");
    }
    if (!grads[i].all_finite()) {
      throw std::invalid_argument(std::string(what) + ": non-finite gradient for '" + theta.name(i) + "'");
    }
  }
}

}  // namespace

AdamState::AdamState(const ParameterSet& params, double rate_)
    : m(params.zeros_like()), v(params.zeros_like()), rate(rate_) {}

void adam_step(AdamState& s, ParameterSet& theta, const ParameterSet& grads) {
  check_grads(theta, grads, "adam_step");
  if (!s.m.same_layout(theta)) throw std::invalid_argument("adam_step: optimizer state does not match parameters");
  s.t += 1;
  const double t = static_cast<double>(s.t);
  const double c1 = 1.0 - std::pow(s.beta1, t);
  const double c2 = 1.0 - std::pow(s.beta2, t);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    auto p = theta[i].data();
    auto m = s.m[i].data();
    auto v = s.v[i].data();
    auto g = grads[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = s.beta1 * m[k] + (1.0 - s.beta1) * g[k];
      v[k] = s.beta2 * v[k] + (1.0 - s.beta2) * g[k] * g[k];
      p[k] -= s.rate * (m[k] / c1) / (std::sqrt(v[k] / c2) + s.eps);
    }
  }
}

void SgdConfig::validate() const {
  if (!(rate > 0.0) || !std::isfinite(rate)) throw std::invalid_argument("SGD rate must be positive and finite");
}

ParameterSet sgd_step(const ParameterSet& theta, const ParameterSet& grads, double rate) {
  check_grads(theta, grads, "sgd_step");
  ParameterSet out = theta;
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto p = out[i].data();
    auto g = grads[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) p[k] -= rate * g[k];
  }
  return out;
}

std::vector<ad::Var> sgd_step_differentiable(const std::vector<ad::Var>& theta, const std::vector<ad::Var>& grads,
                                             double rate) {
  if (theta.size() != grads.size()) throw std::invalid_argument("sgd_step_differentiable: size mismatch");
  std::vector<ad::Var> out;
  out.reserve(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    ad::Tape* tape = theta[i].tape();
    if (tape == nullptr || grads[i].tape() != tape || tape != theta[0].tape()) {
      throw ad::TapeError("sgd_step_differentiable: parameters and gradients must share one tape");
    }
    if (tape->mode() != ad::TapeMode::Differentiable) {
      throw ad::TapeError("sgd_step_differentiable: tape is not in differentiable mode");
    }
    out.push_back(ad::sub(theta[i], ad::scalar_mul(grads[i], rate)));
  }
  return out;
}

}  // namespace bilevel::optim
