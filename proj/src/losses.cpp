#include "bilevel/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "bilevel/random.hpp"

namespace bilevel::losses {
namespace {

constexpr double kNormEps = 1e-10;

ParameterSet random_features(std::uint64_t seed) {
  ParameterSet p(NetRole::Features, NetMode::Pg2);
  std::size_t cin = 3;
  for (int s = 0; s < FeatureExtractor::kStages; ++s) {
    const std::size_t cout = std::size_t{8} << s;
    const std::string name = "phi" + std::to_string(s);
    Rng rng = make_rng(seed, "features/" + name);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / (1.04 * static_cast<double>(cin * 9))));
    ad::Tensor w({cout, cin, 3, 3});
    for (double& v : w.data()) v = dist(rng);
    p.add(name + ".w", std::move(w));
    p.add(name + ".b", ad::Tensor({cout}, 0.0));
    cin = cout;
  }
  return p;
}

ad::Var normalize_channels(const ad::Var& f) {
  const ad::Var norm = ad::sqrt(ad::add_scalar(ad::sum_channels(ad::square(f)), kNormEps));
  return ad::div(f, ad::broadcast_channels(norm, f.shape()[1]));
}

ad::Var one_minus(const ad::Var& p) { return ad::add_scalar(ad::scalar_mul(p, -1.0), 1.0); }

ad::Var clamped(const ad::Var& p) { return ad::clamp(p, kProbClamp, 1.0 - kProbClamp); }

void require_same_shape(const char* what, const ad::Var& a, const ad::Var& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": incompatible shapes " + ad::shape_str(a.shape()) + " and " +
                     ad::shape_str(b.shape()));
  }
}

}  // namespace

void LossWeights::validate() const {
  if (!std::isfinite(lambda_a) || lambda_a < 0.0) throw std::invalid_argument("lambda_a must be finite and >= 0");
  if (!std::isfinite(lambda_b) || lambda_b < 0.0) throw std::invalid_argument("lambda_b must be finite and >= 0");
}

FeatureExtractor::FeatureExtractor(std::uint64_t seed) : seed_(seed), params_(random_features(seed)) {}

FeatureExtractor::FeatureExtractor(std::uint64_t seed, ParameterSet params) : seed_(seed), params_(std::move(params)) {
  if (!params_.same_layout(random_features(0))) throw std::invalid_argument("FeatureExtractor: unexpected layout");
}

std::vector<ad::Var> FeatureExtractor::features(const ad::Var& img) const {
  if (img.shape().size() != 4 || img.shape()[1] != 3) {
    throw ShapeError("features: expected [N,3,H,W], got " + ad::shape_str(img.shape()));
  }
  ad::Tape& tape = *img.tape();
  std::vector<ad::Var> taps;
  ad::Var h = img;
  for (int s = 0; s < kStages; ++s) {
    if (s > 0 && h.shape()[2] % 2 == 0 && h.shape()[3] % 2 == 0) h = ad::avg_pool2(h);
    const std::string name = "phi" + std::to_string(s);
    const ad::Var w = tape.constant(params_.get(name + ".w"));
    const ad::Var b = tape.constant(params_.get(name + ".b"));
    h = ad::leaky_relu(ad::bias_add(ad::conv2d(h, w, 1, 1), b), 0.2);
    taps.push_back(h);
  }
  return taps;
}

ad::Var l1_loss(const ad::Var& a, const ad::Var& b) {
  require_same_shape("l1_loss", a, b);
  return ad::reduce_mean(ad::abs(ad::sub(a, b)));
}

AdversarialLosses adversarial_losses(const nets::NetConfig& config, const BoundParams& d, const ad::Var& x_s,
                                     const ad::Var& y_real, const ad::Var& y_fake, bool nonsaturating) {
  require_same_shape("adversarial_losses", y_real, y_fake);
  const ad::Var p_real = ad::sigmoid(nets::discriminator_forward(config, d, x_s, y_real));
  const ad::Var p_fake = ad::sigmoid(nets::discriminator_forward(config, d, x_s, y_fake));
  const ad::Var log_fake_term = ad::reduce_mean(ad::log(clamped(one_minus(p_fake))));
  const ad::Var loss_d =
      ad::scalar_mul(ad::add(ad::reduce_mean(ad::log(clamped(p_real))), log_fake_term), -1.0);
  const ad::Var loss_g =
      nonsaturating ? ad::scalar_mul(ad::reduce_mean(ad::log(clamped(p_fake))), -1.0) : log_fake_term;
  return {loss_d, loss_g};
}

ad::Var perceptual_loss(const FeatureExtractor& phi, const ad::Var& a, const ad::Var& b) {
  require_same_shape("perceptual_loss", a, b);
  const auto fa = phi.features(a);
  const auto fb = phi.features(b);
  ad::Var total;
  for (std::size_t s = 0; s < fa.size(); ++s) {
    const ad::Var term = ad::reduce_mean(ad::square(ad::sub(normalize_channels(fa[s]), normalize_channels(fb[s]))));
    total = s == 0 ? term : ad::add(total, term);
  }
  return total;
}

ad::Var weighted_total(const ad::Var& l1, const ad::Var& adv, const ad::Var& perceptual, const LossWeights& weights) {
  return ad::add(ad::add(l1, ad::scalar_mul(adv, weights.lambda_a)), ad::scalar_mul(perceptual, weights.lambda_b));
}

LossTerms total_loss(const nets::NetConfig& config, const BoundParams& g, const BoundParams& d,
                     const FeatureExtractor& phi, const LossWeights& weights, const ad::Var& x_s,
                     const std::optional<ad::Var>& x_r, const ad::Var& y) {
  LossTerms t;
  t.fake = nets::generator_forward(config, g, x_s, x_r);
  t.l1 = l1_loss(t.fake, y);
  const auto adv = adversarial_losses(config, d, x_s, y, t.fake, weights.nonsaturating);
  t.adv_g = adv.loss_g;
  t.d = adv.loss_d;
  t.perceptual = perceptual_loss(phi, t.fake, y);
  t.g_total = weighted_total(t.l1, t.adv_g, t.perceptual, weights);
  return t;
}

}  // namespace bilevel::losses
