#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "bilevel/gradcheck.hpp"
#include "bilevel/nets.hpp"
#include "support/checks.hpp"

using namespace bilevel;
using ad::Tape;
using ad::Tensor;
using nets::Arch;
using nets::NetConfig;

namespace {

NetConfig small_config(NetMode mode) {
  NetConfig c;
  c.height = 8;
  c.width = 8;
  c.classes = 3;
  c.mode = mode;
  c.base_width = 4;
  c.depth = 2;
  return c;
}

}  // namespace

TEST_CASE("config validation") {
  NetConfig c;
  CHECK_NOTHROW(c.validate());
  c.height = 36;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.height = 32;
  c.base_width = 3;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.base_width = 16;
  c.depth = 0;
  CHECK_THROWS_AS(nets::init_params(c, 1), std::invalid_argument);
}

TEST_CASE("initialization is deterministic per seed") {
  const NetConfig c;
  const auto [g1, d1] = nets::init_params(c, 7);
  const auto [g2, d2] = nets::init_params(c, 7);
  const auto [g3, d3] = nets::init_params(c, 8);
  CHECK(g1 == g2);
  CHECK(d1 == d2);
  CHECK_FALSE(g1 == g3);
  CHECK_FALSE(d1 == d3);
  CHECK(g1.count() == g3.count());
  CHECK(d1.count() == d3.count());
  for (std::size_t i = 0; i < g1.size(); ++i) {
    if (g1.name(i).ends_with(".b")) {
      for (double v : g1[i].data()) CHECK(v == 0.0);
    }
  }
}

TEST_CASE("parameter counts match a layer-by-layer count") {
  for (NetMode mode : {NetMode::Pg2, NetMode::Pix2pix}) {
    for (Arch arch : {Arch::UNet, Arch::Tiny}) {
      NetConfig c;
      c.mode = mode;
      c.arch = arch;
      const auto [g, d] = nets::init_params(c, 1);
      CHECK(g.count() == checks::expected_parameter_count(c, NetRole::Generator));
      CHECK(d.count() == checks::expected_parameter_count(c, NetRole::Discriminator));
    }
  }
  NetConfig tiny;
  tiny.height = tiny.width = 8;
  tiny.classes = 2;
  tiny.depth = 1;
  tiny.arch = Arch::Tiny;
  const auto [g, d] = nets::init_params(tiny, 1);
  CHECK(g.count() + d.count() <= 200);
}

TEST_CASE("generator output shape and range") {
  const NetConfig c;
  const auto [g, d] = nets::init_params(c, 3);
  Rng rng(3);
  Tape tape;
  const auto x_s = tape.constant(checks::random_one_hot(rng, 2, 5, 32, 32));
  const auto x_r = tape.constant(checks::random_image(rng, 2, 32, 32));
  const auto out = nets::generator_forward(c, bind(tape, g, false), x_s, x_r);
  CHECK(out.shape() == ad::Shape{2, 3, 32, 32});
  for (double v : out.value().data()) {
    CHECK(v > -1.0);
    CHECK(v < 1.0);
  }
  const auto again = nets::generator_forward(c, bind(tape, g, false), x_s, x_r);
  CHECK(again.value() == out.value());
}

TEST_CASE("generator rejects mode and input mismatches") {
  NetConfig c = small_config(NetMode::Pix2pix);
  const auto [g, d] = nets::init_params(c, 3);
  Rng rng(1);
  Tape tape;
  const auto x_s = tape.constant(checks::random_one_hot(rng, 1, 3, 8, 8));
  const auto x_r = tape.constant(checks::random_image(rng, 1, 8, 8));
  CHECK_THROWS_AS(nets::generator_forward(c, bind(tape, g, false), x_s, x_r), std::invalid_argument);
  CHECK_NOTHROW(nets::generator_forward(c, bind(tape, g, false), x_s, std::nullopt));

  NetConfig p = small_config(NetMode::Pg2);
  const auto [gp, dp] = nets::init_params(p, 3);
  CHECK_THROWS_AS(nets::generator_forward(p, bind(tape, gp, false), x_s, std::nullopt), std::invalid_argument);
  // parameters of the other mode
  CHECK_THROWS_AS(nets::generator_forward(p, bind(tape, g, false), x_s, x_r), std::invalid_argument);
  const auto wrong = tape.constant(checks::random_one_hot(rng, 1, 4, 8, 8));
  CHECK_THROWS_AS(nets::generator_forward(p, bind(tape, gp, false), wrong, x_r), ShapeError);
}

TEST_CASE("discriminator emits a patch logit map") {
  const NetConfig c;
  const auto [g, d] = nets::init_params(c, 3);
  Rng rng(5);
  Tape tape;
  const auto x_s = tape.constant(checks::random_one_hot(rng, 1, 5, 32, 32));
  const auto img = tape.constant(checks::random_image(rng, 1, 32, 32));
  const auto logits = nets::discriminator_forward(c, bind(tape, d, false), x_s, img);
  CHECK(logits.shape() == ad::Shape{1, 1, 4, 4});
  CHECK_THROWS_AS(nets::discriminator_forward(c, bind(tape, d, false), x_s, x_s), ShapeError);
}

TEST_CASE("discriminator logits respond only to nearby pixels") {
  const NetConfig c;
  const auto [g, d] = nets::init_params(c, 9);
  Rng rng(9);
  const Tensor x_s = checks::random_one_hot(rng, 1, 5, 32, 32);
  const Tensor img = checks::random_image(rng, 1, 32, 32);
  const auto logits_of = [&](const Tensor& image) {
    Tape tape;
    return nets::discriminator_forward(c, bind(tape, d, false), tape.constant(x_s), tape.constant(image)).value();
  };
  const Tensor base = logits_of(img);

  // The receptive field of logit (i,j) spans input rows [8i-15, 8i+22] for
  // three 4x4/2 convs followed by a 3x3 conv, so a change in the top-left
  // 2x2 block reaches only logits with i,j <= 2.
  Tensor moved = img;
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 2; ++j) moved[(ch * 32 + i) * 32 + j] = -moved[(ch * 32 + i) * 32 + j];
  const Tensor shifted = logits_of(moved);
  bool any_changed = false;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      const bool changed = shifted.at(0, 0, i, j) != base.at(0, 0, i, j);
      if (i > 2 || j > 2) CHECK_FALSE(changed);
      any_changed = any_changed || changed;
    }
  CHECK(any_changed);
}

TEST_CASE("network gradients match central differences") {
  for (NetMode mode : {NetMode::Pg2, NetMode::Pix2pix}) {
    const NetConfig c = small_config(mode);
    CHECK(checks::network_fd_error(c, NetRole::Generator, 11) < 1e-5);
    CHECK(checks::network_fd_error(c, NetRole::Discriminator, 12) < 1e-5);
  }
  NetConfig tiny = small_config(NetMode::Pg2);
  tiny.arch = Arch::Tiny;
  tiny.classes = 2;
  tiny.depth = 1;
  CHECK(checks::network_fd_error(tiny, NetRole::Generator, 13) < 1e-5);
  CHECK(checks::network_fd_error(tiny, NetRole::Discriminator, 14) < 1e-5);
}

TEST_CASE("generator is differentiable twice") {
  // Gradient-of-gradient through the generator agrees with differences of
  // plain gradients along a random direction.
  NetConfig c = small_config(NetMode::Pg2);
  c.height = c.width = 4;
  c.depth = 1;
  const auto [g, d] = nets::init_params(c, 21);
  Rng rng(21);
  const Tensor x_s = checks::random_one_hot(rng, 1, 3, 4, 4);
  const Tensor x_r = checks::random_image(rng, 1, 4, 4);
  std::vector<Tensor> dirs;
  for (const auto& t : g.values()) dirs.push_back(checks::random_tensor(rng, t.shape()));

  const auto loss = [&](Tape& t, const BoundParams& p) {
    return ad::reduce_mean(ad::square(nets::generator_forward(c, p, t.constant(x_s), t.constant(x_r))));
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
        const auto b = bind(t, p, true);
        const auto gv = t.gradients(loss(t, b), b.vars());
        double acc = 0.0;
        for (std::size_t i = 0; i < gv.size(); ++i)
          for (std::size_t k = 0; k < gv[i].size(); ++k) acc += gv[i][k] * dirs[i][k];
        return acc;
      },
      g, 1e-6);
  CHECK(max_relative_error(analytic, numeric) < 1e-5);
}
