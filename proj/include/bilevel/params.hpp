#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "bilevel/autodiff.hpp"

namespace bilevel {

enum class NetRole { Generator, Discriminator, Features };
enum class NetMode { Pg2, Pix2pix };

const char* role_name(NetRole role);
const char* mode_name(NetMode mode);

/// Named, ordered collection of trainable tensors for one network.
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(NetRole role, NetMode mode) : role_(role), mode_(mode) {}

  NetRole role() const { return role_; }
  NetMode mode() const { return mode_; }

  void add(std::string name, ad::Tensor value);

  std::size_t size() const { return names_.size(); }
  bool empty() const { return names_.empty(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  const ad::Tensor& operator[](std::size_t i) const { return values_[i]; }
  ad::Tensor& operator[](std::size_t i) { return values_[i]; }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<ad::Tensor>& values() const { return values_; }

  /// Index of a name; throws std::out_of_range when absent.
  std::size_t index(std::string_view name) const;
  const ad::Tensor& get(std::string_view name) const { return values_[index(name)]; }

  /// Total number of scalar parameters.
  std::size_t count() const;

  /// Same names, role and mode with new values.
  ParameterSet with_values(std::vector<ad::Tensor> values) const;
  /// Same names and shapes, all zero.
  ParameterSet zeros_like() const;

  bool same_layout(const ParameterSet& other) const;

  /// FNV-1a over names, shapes and value bits.
  std::uint64_t fingerprint() const;

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    return a.role_ == b.role_ && a.mode_ == b.mode_ && a.names_ == b.names_ && a.values_ == b.values_;
  }

 private:
  NetRole role_ = NetRole::Generator;
  NetMode mode_ = NetMode::Pg2;
  std::vector<std::string> names_;
  std::vector<ad::Tensor> values_;
};

/// A ParameterSet placed on a tape, one Var per tensor in set order.
class BoundParams {
 public:
  BoundParams() = default;
  BoundParams(const ParameterSet* layout, std::vector<ad::Var> vars);

  const ParameterSet& layout() const { return *layout_; }
  const std::vector<ad::Var>& vars() const { return vars_; }
  ad::Var operator[](std::string_view name) const { return vars_[layout_->index(name)]; }

 private:
  const ParameterSet* layout_ = nullptr;
  std::vector<ad::Var> vars_;
};

BoundParams bind(ad::Tape& tape, const ParameterSet& params, bool requires_grad);

/// Reads the current values of bound vars back into a set with params' layout.
ParameterSet values_of(const ParameterSet& layout, const std::vector<ad::Var>& vars);

}  // namespace bilevel
