#include "bilevel/params.hpp"

#include <cstring>
#include <stdexcept>

namespace bilevel {

namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ull;
constexpr std::uint64_t kFnvPrime = 1099511628211ull;

void fnv(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
}

}  // namespace

const char* role_name(NetRole role) {
  switch (role) {
    case NetRole::Generator: return "generator";
    case NetRole::Discriminator: return "discriminator";
    case NetRole::Features: return "features";
  }
  return "?";
}

const char* mode_name(NetMode mode) { return mode == NetMode::Pg2 ? "pg2" : "pix2pix"; }

void ParameterSet::add(std::string name, ad::Tensor value) {
  for (const auto& n : names_) {
    if (n == name) throw std::invalid_argument("parameter set: duplicate name '" + name + "'");
  }
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
}

std::size_t ParameterSet::index(std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return i;
  }
  throw std::out_of_range("parameter set: no tensor named '" + std::string(name) + "'");
}

std::size_t ParameterSet::count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

ParameterSet ParameterSet::with_values(std::vector<ad::Tensor> values) const {
  if (values.size() != values_.size()) throw ShapeError("parameter set: wrong number of tensors");
  ParameterSet out(role_, mode_);
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i].shape() != values_[i].shape()) {
      throw ShapeError("parameter set: tensor '" + names_[i] + "' expects shape " + ad::shape_str(values_[i].shape()) +
                       ", got " + ad::shape_str(values[i].shape()));
    }
  }
  out.names_ = names_;
  out.values_ = std::move(values);
  return out;
}

ParameterSet ParameterSet::zeros_like() const {
  std::vector<ad::Tensor> zeros;
  zeros.reserve(values_.size());
  for (const auto& v : values_) zeros.emplace_back(v.shape());
  return with_values(std::move(zeros));
}

bool ParameterSet::same_layout(const ParameterSet& other) const {
  if (names_ != other.names_) return false;
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (values_[i].shape() != other.values_[i].shape()) return false;
  }
  return true;
}

std::uint64_t ParameterSet::fingerprint() const {
  std::uint64_t h = kFnvOffset;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    fnv(h, names_[i].data(), names_[i].size());
    for (auto d : values_[i].shape()) {
      const std::uint64_t d64 = d;
      fnv(h, &d64, sizeof d64);
    }
    fnv(h, values_[i].ptr(), values_[i].size() * sizeof(double));
  }
  return h;
}

BoundParams::BoundParams(const ParameterSet* layout, std::vector<ad::Var> vars)
    : layout_(layout), vars_(std::move(vars)) {
  if (layout_->size() != vars_.size()) throw ShapeError("bind: var count does not match parameter set");
}

BoundParams bind(ad::Tape& tape, const ParameterSet& params, bool requires_grad) {
  std::vector<ad::Var> vars;
  vars.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) vars.push_back(tape.leaf(params[i], requires_grad));
  return BoundParams(&params, std::move(vars));
}

ParameterSet values_of(const ParameterSet& layout, const std::vector<ad::Var>& vars) {
  std::vector<ad::Tensor> values;
  values.reserve(vars.size());
  for (const auto& v : vars) values.push_back(v.value());
  return layout.with_values(std::move(values));
}

}  // namespace bilevel
