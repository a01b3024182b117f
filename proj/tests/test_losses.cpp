#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "bilevel/gradcheck.hpp"
#include "bilevel/losses.hpp"
#include "support/checks.hpp"

using namespace bilevel;
using ad::Tape;
using ad::Tensor;
using losses::FeatureExtractor;
using losses::LossWeights;
using nets::NetConfig;

namespace {

NetConfig tiny_config() {
  NetConfig c;
  c.height = c.width = 8;
  c.classes = 2;
  c.depth = 1;
  c.arch = nets::Arch::Tiny;
  return c;
}

NetConfig small_config() {
  NetConfig c;
  c.height = c.width = 8;
  c.classes = 3;
  c.base_width = 4;
  c.depth = 2;
  return c;
}

struct Batch {
  Tensor x_s, x_r, y;
};

Batch random_batch(const NetConfig& c, Rng& rng, std::size_t n = 2) {
  const auto h = static_cast<std::size_t>(c.height), w = static_cast<std::size_t>(c.width);
  return {checks::random_one_hot(rng, n, static_cast<std::size_t>(c.classes), h, w), checks::random_image(rng, n, h, w),
          checks::random_image(rng, n, h, w)};
}

}  // namespace

TEST_CASE("l1 examples and oracle") {
  Tape tape;
  Rng rng(1);
  const Tensor x = checks::random_image(rng, 2, 4, 4);
  CHECK(losses::l1_loss(tape.constant(x), tape.constant(x)).item() == 0.0);
  CHECK(losses::l1_loss(tape.constant(Tensor({2, 3}, 0.5)), tape.constant(Tensor({2, 3}, 0.0))).item() == 0.5);

  const Tensor y = checks::random_image(rng, 2, 4, 4);
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += std::fabs(x[i] - y[i]);
  CHECK(losses::l1_loss(tape.constant(x), tape.constant(y)).item() == acc / static_cast<double>(x.size()));
  CHECK_THROWS_AS(losses::l1_loss(tape.constant(x), tape.constant(Tensor({3}))), ShapeError);
}

TEST_CASE("adversarial losses with an undecided discriminator") {
  const NetConfig c = tiny_config();
  const auto [g, d] = nets::init_params(c, 2);
  const ParameterSet zero_d = d.zeros_like();
  Rng rng(2);
  const Batch b = random_batch(c, rng);
  Tape tape;
  const auto adv = losses::adversarial_losses(c, bind(tape, zero_d, false), tape.constant(b.x_s), tape.constant(b.y),
                                              tape.constant(b.x_r));
  CHECK(std::fabs(adv.loss_d.item() - 2.0 * std::log(2.0)) < 1e-12);
  CHECK(std::fabs(adv.loss_g.item() - (-std::log(2.0))) < 1e-12);
  const auto ns = losses::adversarial_losses(c, bind(tape, zero_d, false), tape.constant(b.x_s), tape.constant(b.y),
                                             tape.constant(b.x_r), true);
  CHECK(std::fabs(ns.loss_g.item() - std::log(2.0)) < 1e-12);
}

TEST_CASE("adversarial losses with a perfect discriminator") {
  const NetConfig c = tiny_config();
  const auto [g, d0] = nets::init_params(c, 2);
  // Only the centre tap of the image channels is nonzero: the logit is a large
  // multiple of the pixel's channel sum.
  ParameterSet d = d0.zeros_like();
  Tensor& w = d[d.index("d1.w")];
  for (std::size_t ch = 2; ch < 5; ++ch) w[(ch * 3 + 1) * 3 + 1] = 100.0;
  Rng rng(3);
  const Batch b = random_batch(c, rng);
  Tape tape;
  const auto adv = losses::adversarial_losses(c, bind(tape, d, false), tape.constant(b.x_s),
                                              tape.constant(Tensor({2, 3, 8, 8}, 0.9)),
                                              tape.constant(Tensor({2, 3, 8, 8}, -0.9)));
  CHECK(adv.loss_d.item() >= 0.0);
  CHECK(adv.loss_d.item() < 2e-7 * 1.01);
  CHECK(std::fabs(adv.loss_g.item() - std::log1p(-1e-7)) < 1e-12);
}

TEST_CASE("generator adversarial gradient matches central differences") {
  for (const NetConfig& c : {tiny_config(), small_config()}) {
    const auto [g, d] = nets::init_params(c, 4);
    Rng rng(4);
    const Batch b = random_batch(c, rng);
    const auto loss = [&](Tape& t, const BoundParams& gp) {
      const auto fake = nets::generator_forward(c, gp, t.constant(b.x_s), t.constant(b.x_r));
      return losses::adversarial_losses(c, bind(t, d, false), t.constant(b.x_s), t.constant(b.y), fake).loss_g;
    };
    Tape tape;
    const auto bound = bind(tape, g, true);
    const ParameterSet analytic = g.with_values(tape.gradients(loss(tape, bound), bound.vars()));
    const ParameterSet numeric = finite_diff_gradient(
        [&](const ParameterSet& p) {
          Tape t;
          return loss(t, bind(t, p, false)).item();
        },
        g, 1e-6);
    CHECK(max_relative_error(analytic, numeric) < 1e-5);
  }
}

TEST_CASE("perceptual loss identity, positivity and oracle") {
  const FeatureExtractor phi(17);
  Rng rng(5);
  Tape tape;
  const Tensor x = checks::random_image(rng, 1, 8, 8);
  CHECK(losses::perceptual_loss(phi, tape.constant(x), tape.constant(x)).item() == 0.0);

  int positive = 0;
  for (int i = 0; i < 100; ++i) {
    Tape t;
    const Tensor a = checks::random_image(rng, 1, 8, 8);
    const Tensor b = checks::random_image(rng, 1, 8, 8);
    positive += losses::perceptual_loss(phi, t.constant(a), t.constant(b)).item() > 0.0;
  }
  CHECK(positive == 100);

  for (const auto& dims : {std::pair<std::size_t, std::size_t>{8, 8}, {6, 10}, {5, 7}}) {
    const Tensor a = checks::random_image(rng, 2, dims.first, dims.second);
    const Tensor b = checks::random_image(rng, 2, dims.first, dims.second);
    const double got = losses::perceptual_loss(phi, tape.constant(a), tape.constant(b)).item();
    const double want = checks::naive_perceptual(phi.params(), a, b);
    CHECK(std::fabs(got - want) / want < 1e-10);
  }
}

TEST_CASE("feature extractor is fixed by its seed") {
  const FeatureExtractor a(3), b(3), c(4);
  CHECK(a.params() == b.params());
  CHECK_FALSE(a.params() == c.params());
  CHECK(a.params().role() == NetRole::Features);
  const FeatureExtractor restored(3, a.params());
  CHECK(restored.params() == a.params());
  CHECK_THROWS_AS(FeatureExtractor(3, ParameterSet{}), std::invalid_argument);
}

TEST_CASE("weighted total arithmetic") {
  Tape tape;
  const auto v = [&](double x) { return tape.constant(Tensor::scalar(x)); };
  CHECK(std::fabs(losses::weighted_total(v(0.3), v(0.7), v(0.05), LossWeights{}).item() - 7.4) < 1e-12);
  LossWeights bad;
  bad.lambda_a = -1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad.lambda_a = std::nan("");
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("total loss composition") {
  const NetConfig c = small_config();
  const auto [g, d] = nets::init_params(c, 6);
  const FeatureExtractor phi(6);
  Rng rng(6);
  const Batch b = random_batch(c, rng);
  const auto run = [&](const LossWeights& w) {
    Tape t;
    const auto terms = losses::total_loss(c, bind(t, g, false), bind(t, d, false), phi, w, t.constant(b.x_s),
                                          t.constant(b.x_r), t.constant(b.y));
    return std::array<double, 5>{terms.g_total.item(), terms.d.item(), terms.l1.item(), terms.adv_g.item(),
                                 terms.perceptual.item()};
  };

  const auto zero = run(LossWeights{0.0, 0.0});
  CHECK(zero[0] == zero[2]);

  const auto std_w = run(LossWeights{});
  {
    // independent recomputation from the component ops
    Tape t;
    const auto fake = nets::generator_forward(c, bind(t, g, false), t.constant(b.x_s), t.constant(b.x_r));
    const double l1 = losses::l1_loss(fake, t.constant(b.y)).item();
    const auto adv = losses::adversarial_losses(c, bind(t, d, false), t.constant(b.x_s), t.constant(b.y), fake);
    const double p = losses::perceptual_loss(phi, fake, t.constant(b.y)).item();
    CHECK(std_w[0] == (l1 + 10.0 * adv.loss_g.item()) + 2.0 * p);
    CHECK(std_w[1] == adv.loss_d.item());
    CHECK(std_w[1] >= 0.0);
    CHECK(std_w[2] >= 0.0);
    CHECK(std_w[4] >= 0.0);
  }

  // linear in the weights: the midpoint setting interpolates the endpoints
  const auto w1 = run(LossWeights{2.0, 1.0});
  const auto w2 = run(LossWeights{6.0, 5.0});
  const auto mid = run(LossWeights{4.0, 3.0});
  CHECK(std::fabs(mid[0] - 0.5 * (w1[0] + w2[0])) < 1e-12 * std::fabs(mid[0]) + 1e-13);
}

TEST_CASE("total loss is differentiable twice with respect to the generator") {
  const NetConfig c = tiny_config();
  const auto [g, d] = nets::init_params(c, 8);
  const FeatureExtractor phi(8);
  Rng rng(8);
  const Batch b = random_batch(c, rng, 1);
  std::vector<Tensor> dirs;
  for (const auto& t : g.values()) dirs.push_back(checks::random_tensor(rng, t.shape()));
  const auto loss = [&](Tape& t, const BoundParams& gp) {
    return losses::total_loss(c, gp, bind(t, d, false), phi, LossWeights{}, t.constant(b.x_s), t.constant(b.x_r),
                              t.constant(b.y))
        .g_total;
  };
  Tape tape(ad::TapeMode::Differentiable);
  const auto bound = bind(tape, g, true);
  const auto grads = tape.gradients_on_tape(loss(tape, bound), bound.vars());
  ad::Var h = ad::reduce_sum(ad::mul(grads[0], tape.constant(dirs[0])));
  for (std::size_t i = 1; i < grads.size(); ++i) h = ad::add(h, ad::reduce_sum(ad::mul(grads[i], tape.constant(dirs[i]))));
  const ParameterSet analytic = g.with_values(tape.gradients(h, bound.vars()));
  const ParameterSet numeric = finite_diff_gradient(
      [&](const ParameterSet& p) {
        Tape t;
        const auto bp = bind(t, p, true);
        const auto gv = t.gradients(loss(t, bp), bp.vars());
        double acc = 0.0;
        for (std::size_t i = 0; i < gv.size(); ++i)
          for (std::size_t k = 0; k < gv[i].size(); ++k) acc += gv[i][k] * dirs[i][k];
        return acc;
      },
      g, 1e-6);
  CHECK(max_relative_error(analytic, numeric) < 1e-5);
}
