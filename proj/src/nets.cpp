#include "bilevel/nets.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "bilevel/random.hpp"

namespace bilevel::nets {
namespace {

constexpr double kLeakySlope = 0.2;

// Variance gain of the activation that follows a layer. Damped layers end a
// residual branch or feed the output tanh and start near the identity.
enum class Gain { Relu, Leaky, Linear, Damped };

double gain_factor(Gain g) {
  switch (g) {
    case Gain::Relu: return 2.0;
    case Gain::Leaky: return 2.0 / (1.0 + kLeakySlope * kLeakySlope);
    case Gain::Linear: return 1.0;
    case Gain::Damped: return 0.01;
  }
  return 1.0;
}

class Builder {
 public:
  Builder(ParameterSet& set, std::uint64_t seed) : set_(set), seed_(seed) {}

  void conv(const std::string& name, std::size_t cout, std::size_t cin, std::size_t k, Gain gain) {
    Rng rng = make_rng(seed_, std::string(role_name(set_.role())) + "/" + name);
    const double fan_in = static_cast<double>(cin * k * k);
    std::normal_distribution<double> dist(0.0, std::sqrt(gain_factor(gain) / fan_in));
    ad::Tensor w({cout, cin, k, k});
    for (double& v : w.data()) v = dist(rng);
    set_.add(name + ".w", std::move(w));
    set_.add(name + ".b", ad::Tensor({cout}, 0.0));
  }

 private:
  ParameterSet& set_;
  std::uint64_t seed_;
};

std::size_t chan(const NetConfig& c, int level) { return static_cast<std::size_t>(c.base_width) << level; }

ad::Var conv(const BoundParams& p, const std::string& name, const ad::Var& x, int stride, int pad) {
  return ad::bias_add(ad::conv2d(x, p[name + ".w"], stride, pad), p[name + ".b"]);
}

ad::Var residual(const BoundParams& p, const std::string& name, const ad::Var& h) {
  const ad::Var a = ad::relu(conv(p, name + ".a", h, 1, 1));
  return ad::add(h, conv(p, name + ".b", a, 1, 1));
}

void check_input(const NetConfig& c, const char* what, const ad::Var& x, std::size_t channels) {
  const ad::Shape& s = x.shape();
  if (s.size() != 4 || s[1] != channels || s[2] != static_cast<std::size_t>(c.height) ||
      s[3] != static_cast<std::size_t>(c.width)) {
    throw ShapeError(std::string(what) + ": expected [N," + std::to_string(channels) + "," +
                     std::to_string(c.height) + "," + std::to_string(c.width) + "], got " + ad::shape_str(s));
  }
}

void check_layout(const NetConfig& c, const BoundParams& p, NetRole role, const char* what) {
  if (p.layout().role() != role || p.layout().mode() != c.mode) {
    throw std::invalid_argument(std::string(what) + ": parameter set is " + role_name(p.layout().role()) + "/" +
                                mode_name(p.layout().mode()) + ", expected " + role_name(role) + "/" +
                                mode_name(c.mode));
  }
}

}  // namespace

void NetConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("NetConfig: " + msg); };
  if (depth < 1 || depth > 8) fail("depth must be in [1, 8], got " + std::to_string(depth));
  if (height <= 0 || width <= 0) fail("image dimensions must be positive");
  const int unit = 1 << depth;
  if (height % unit != 0 || width % unit != 0) {
    fail("height and width must be divisible by 2^depth = " + std::to_string(unit) + ", got " +
         std::to_string(height) + "x" + std::to_string(width));
  }
  if (base_width < 4) fail("base_width must be at least 4, got " + std::to_string(base_width));
  if (classes < 1 || classes > 255) fail("classes must be in [1, 255], got " + std::to_string(classes));
}

std::pair<ParameterSet, ParameterSet> init_params(const NetConfig& c, std::uint64_t seed) {
  c.validate();
  ParameterSet g(NetRole::Generator, c.mode);
  ParameterSet d(NetRole::Discriminator, c.mode);
  Builder gb(g, seed), db(d, seed);
  const auto classes = static_cast<std::size_t>(c.classes);
  const std::size_t g_in = classes + static_cast<std::size_t>(c.ref_channels());
  const std::size_t d_in = classes + 3;

  if (c.arch == Arch::Tiny) {
    gb.conv("out", 3, g_in, 3, Gain::Linear);
    db.conv("d1", 1, d_in, 3, c.depth > 1 ? Gain::Leaky : Gain::Linear);
    for (int i = 2; i <= c.depth; ++i) {
      db.conv("d" + std::to_string(i), 1, 1, 3, i < c.depth ? Gain::Leaky : Gain::Linear);
    }
    return {std::move(g), std::move(d)};
  }

  gb.conv("in", chan(c, 0), g_in, 3, Gain::Relu);
  for (int i = 1; i <= c.depth; ++i) {
    const std::string name = "enc" + std::to_string(i);
    gb.conv(name + ".down", chan(c, i), chan(c, i - 1), 3, Gain::Relu);
    gb.conv(name + ".res.a", chan(c, i), chan(c, i), 3, Gain::Relu);
    gb.conv(name + ".res.b", chan(c, i), chan(c, i), 3, Gain::Damped);
  }
  for (int i = c.depth; i >= 1; --i) {
    const std::string name = "dec" + std::to_string(i);
    gb.conv(name + ".up", chan(c, i - 1), chan(c, i) + chan(c, i - 1), 3, Gain::Relu);
    gb.conv(name + ".res.a", chan(c, i - 1), chan(c, i - 1), 3, Gain::Relu);
    gb.conv(name + ".res.b", chan(c, i - 1), chan(c, i - 1), 3, Gain::Damped);
  }
  gb.conv("out", 3, chan(c, 0), 3, Gain::Damped);

  std::size_t prev = d_in;
  for (int i = 1; i <= c.depth; ++i) {
    db.conv("d" + std::to_string(i), chan(c, i - 1), prev, 4, Gain::Leaky);
    prev = chan(c, i - 1);
  }
  db.conv("out", 1, prev, 3, Gain::Linear);
  return {std::move(g), std::move(d)};
}

ad::Var generator_forward(const NetConfig& c, const BoundParams& g, const ad::Var& x_s,
                          const std::optional<ad::Var>& x_r) {
  check_layout(c, g, NetRole::Generator, "generator_forward");
  if (c.mode == NetMode::Pg2 && !x_r) {
    throw std::invalid_argument("generator_forward: pg2 mode requires a reference image");
  }
  if (c.mode == NetMode::Pix2pix && x_r) {
    throw std::invalid_argument("generator_forward: pix2pix mode takes no reference image");
  }
  check_input(c, "generator_forward x_s", x_s, static_cast<std::size_t>(c.classes));
  ad::Var input = x_s;
  if (x_r) {
    check_input(c, "generator_forward x_r", *x_r, 3);
    if (x_r->shape()[0] != x_s.shape()[0]) throw ShapeError("generator_forward: batch sizes of x_s and x_r differ");
    input = ad::concat_channels(x_s, *x_r);
  }

  if (c.arch == Arch::Tiny) return ad::tanh(conv(g, "out", input, 1, 1));

  std::vector<ad::Var> skips;
  ad::Var h = ad::relu(conv(g, "in", input, 1, 1));
  for (int i = 1; i <= c.depth; ++i) {
    skips.push_back(h);
    const std::string name = "enc" + std::to_string(i);
    h = ad::relu(conv(g, name + ".down", h, 2, 1));
    h = residual(g, name + ".res", h);
  }
  for (int i = c.depth; i >= 1; --i) {
    const std::string name = "dec" + std::to_string(i);
    h = ad::concat_channels(ad::upsample2(h), skips[static_cast<std::size_t>(i - 1)]);
    h = ad::relu(conv(g, name + ".up", h, 1, 1));
    h = residual(g, name + ".res", h);
  }
  return ad::tanh(conv(g, "out", h, 1, 1));
}

ad::Var discriminator_forward(const NetConfig& c, const BoundParams& d, const ad::Var& x_s, const ad::Var& img) {
  check_layout(c, d, NetRole::Discriminator, "discriminator_forward");
  check_input(c, "discriminator_forward x_s", x_s, static_cast<std::size_t>(c.classes));
  check_input(c, "discriminator_forward img", img, 3);
  if (img.shape()[0] != x_s.shape()[0]) throw ShapeError("discriminator_forward: batch sizes of x_s and img differ");
  ad::Var h = ad::concat_channels(x_s, img);

  if (c.arch == Arch::Tiny) {
    for (int i = 1; i <= c.depth; ++i) {
      h = conv(d, "d" + std::to_string(i), h, 2, 1);
      if (i < c.depth) h = ad::leaky_relu(h, kLeakySlope);
    }
    return h;
  }

  for (int i = 1; i <= c.depth; ++i) h = ad::leaky_relu(conv(d, "d" + std::to_string(i), h, 2, 1), kLeakySlope);
  return conv(d, "out", h, 1, 1);
}

}  // namespace bilevel::nets
