#pragma once

#include <cstdint>
#include <optional>
#include <utility>

#include "bilevel/params.hpp"

namespace bilevel::nets {

enum class Arch {
  UNet,  // residual U-net generator + strided patch discriminator
  Tiny,  // single-layer generator, for gradient verification at small sizes
};

struct NetConfig {
  int height = 32;
  int width = 32;
  int classes = 5;
  NetMode mode = NetMode::Pg2;
  int base_width = 16;
  int depth = 3;
  Arch arch = Arch::UNet;

  int ref_channels() const { return mode == NetMode::Pg2 ? 3 : 0; }
  int patch_height() const { return height >> depth; }
  int patch_width() const { return width >> depth; }

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;

  friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

/// Randomly initialized generator and discriminator. Weights are zero-mean
/// normal with He fan-in scaling, biases zero; deterministic per seed.
std::pair<ParameterSet, ParameterSet> init_params(const NetConfig& config, std::uint64_t seed);

/// x_s: one-hot structure [N,C,H,W]; x_r: reference [N,3,H,W], required in
/// pg2 mode and rejected in pix2pix mode. Returns an image in (−1,1).
ad::Var generator_forward(const NetConfig& config, const BoundParams& g, const ad::Var& x_s,
                          const std::optional<ad::Var>& x_r);

/// Patch logits [N,1,H/2^depth,W/2^depth] for the pair (x_s, img).
ad::Var discriminator_forward(const NetConfig& config, const BoundParams& d, const ad::Var& x_s,
                              const ad::Var& img);

}  // namespace bilevel::nets
