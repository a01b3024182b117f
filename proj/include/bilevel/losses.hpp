#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "bilevel/nets.hpp"

namespace bilevel::losses {

struct LossWeights {
  double lambda_a = 10.0;  // adversarial
  double lambda_b = 2.0;   // perceptual
  /// Generator minimizes −log D(fake) instead of log(1 − D(fake)).
  bool nonsaturating = false;

  /// Throws std::invalid_argument unless both weights are finite and ≥ 0.
  void validate() const;

  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

/// Probabilities are clamped to [kProbClamp, 1 − kProbClamp] before logs.
inline constexpr double kProbClamp = 1e-7;

/// Frozen random-weight conv stack whose stage outputs define the perceptual
/// distance. Stage s: 3x3 conv to 8·2^s channels, leaky ReLU(0.2), then 2x2
/// average pooling before the next stage when both dimensions are even.
class FeatureExtractor {
 public:
  static constexpr int kStages = 3;

  explicit FeatureExtractor(std::uint64_t seed);
  /// Rebuilds from stored weights (checkpoint load); the layout must match.
  FeatureExtractor(std::uint64_t seed, ParameterSet params);

  std::uint64_t seed() const { return seed_; }
  const ParameterSet& params() const { return params_; }

  /// Stage outputs for img [N,3,H,W]. Weights enter the tape as constants.
  std::vector<ad::Var> features(const ad::Var& img) const;

 private:
  std::uint64_t seed_;
  ParameterSet params_;
};

/// mean |a − b|.
ad::Var l1_loss(const ad::Var& a, const ad::Var& b);

struct AdversarialLosses {
  ad::Var loss_d;
  ad::Var loss_g;
};

/// Patch-mean minimax losses for D on (x_s, y_real) vs (x_s, y_fake).
AdversarialLosses adversarial_losses(const nets::NetConfig& config, const BoundParams& d, const ad::Var& x_s,
                                     const ad::Var& y_real, const ad::Var& y_fake, bool nonsaturating = false);

/// Σ over stages of mean squared distance between channel-normalized features.
ad::Var perceptual_loss(const FeatureExtractor& phi, const ad::Var& a, const ad::Var& b);

/// l1 + λa·adv + λb·perceptual.
ad::Var weighted_total(const ad::Var& l1, const ad::Var& adv, const ad::Var& perceptual, const LossWeights& weights);

struct LossTerms {
  ad::Var g_total;  // L1 + λa·adv + λb·perceptual, minimized by G
  ad::Var d;        // minimized by D
  ad::Var l1;
  ad::Var adv_g;
  ad::Var perceptual;
  ad::Var fake;  // generated image
};

/// Full objective on a batch: x_s one-hot [N,C,H,W], x_r [N,3,H,W] in pg2
/// mode, y [N,3,H,W].
LossTerms total_loss(const nets::NetConfig& config, const BoundParams& g, const BoundParams& d,
                     const FeatureExtractor& phi, const LossWeights& weights, const ad::Var& x_s,
                     const std::optional<ad::Var>& x_r, const ad::Var& y);

}  // namespace bilevel::losses
