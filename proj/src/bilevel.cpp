#include "bilevel/bilevel.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "bilevel/autodiff.hpp"
#include "bilevel/random.hpp"

namespace bilevel::train {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("train config: " + what);
}

struct BoundBatch {
  ad::Var x_s;
  std::optional<ad::Var> x_r;
  ad::Var y;
};

BoundBatch bind_batch(ad::Tape& tape, const Batch& batch) {
  BoundBatch b{tape.constant(batch.x_s), std::nullopt, tape.constant(batch.y)};
  if (batch.x_r) b.x_r = tape.constant(*batch.x_r);
  return b;
}

// Discriminator objective alone; skips the perceptual features.
ad::Var d_loss(const TrainConfig& config, const BoundParams& g, const BoundParams& d, const BoundBatch& b) {
  const ad::Var fake = nets::generator_forward(config.net, g, b.x_s, b.x_r);
  return losses::adversarial_losses(config.net, d, b.x_s, b.y, fake, config.weights.nonsaturating).loss_d;
}

LossValues values_of_terms(const losses::LossTerms& t) {
  return {t.g_total.item(), t.d.item(), t.l1.item(), t.adv_g.item(), t.perceptual.item()};
}

losses::LossTerms full_terms(const TrainConfig& config, const losses::FeatureExtractor& phi, const BoundParams& g,
                             const BoundParams& d, const BoundBatch& b) {
  return losses::total_loss(config.net, g, d, phi, config.weights, b.x_s, b.x_r, b.y);
}

void accumulate(ParameterSet& acc, const ParameterSet& x) {
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] = ad::add(acc[i], x[i]);
}

void scale(ParameterSet& acc, double s) {
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] = ad::scalar_mul(acc[i], s);
}

void add_losses(LossValues& acc, const LossValues& x, double w) {
  acc.g_total += w * x.g_total;
  acc.d += w * x.d;
  acc.l1 += w * x.l1;
  acc.adv += w * x.adv;
  acc.perceptual += w * x.perceptual;
}

// Fresh nodes equal to vs. Gradients taken with respect to them are partial
// derivatives: paths into vs through other parameters are excluded.
std::vector<ad::Var> alias(const std::vector<ad::Var>& vs) {
  std::vector<ad::Var> out;
  out.reserve(vs.size());
  for (const auto& v : vs) out.push_back(ad::scalar_mul(v, 1.0));
  return out;
}

// Inner SGD recorded on a differentiable tape. Returns the adapted vars.
// Each player steps along its partial gradient with the other player held.
std::pair<std::vector<ad::Var>, std::vector<ad::Var>> unrolled_adapt(
    const TrainConfig& config, const losses::FeatureExtractor& phi, ad::Tape& tape, const NetPair& gp,
    std::vector<ad::Var> gv, std::vector<ad::Var> dv, std::span<const tasks::TranslationSample> samples,
    std::uint64_t seed) {
  for (int it = 0; it < config.inner_iters; ++it) {
    const auto chosen = inner_batch(config, samples, seed, it);
    const BoundBatch b = bind_batch(tape, make_batch(config.net, chosen));
    const std::vector<ad::Var> d_own = alias(dv);
    const ad::Var ld = d_loss(config, BoundParams(&gp.g, gv), BoundParams(&gp.d, d_own), b);
    dv = optim::sgd_step_differentiable(d_own, tape.gradients_on_tape(ld, d_own), config.sgd_rate);
    const std::vector<ad::Var> g_own = alias(gv);
    const auto t = full_terms(config, phi, BoundParams(&gp.g, g_own), BoundParams(&gp.d, dv), b);
    gv = optim::sgd_step_differentiable(g_own, tape.gradients_on_tape(t.g_total, g_own), config.sgd_rate);
  }
  return {std::move(gv), std::move(dv)};
}

std::vector<tasks::RetrievalKey> scene_keys(std::span<const tasks::SceneData> scenes) {
  std::vector<tasks::RetrievalKey> keys;
  keys.reserve(scenes.size());
  for (const auto& s : scenes) {
    if (s.samples.empty()) throw std::invalid_argument("training scene " + std::to_string(s.scene.id) + " has no samples");
    keys.push_back({s.scene.id, &s.samples.front().x_s});
  }
  return keys;
}

}  // namespace

const char* meta_mode_name(MetaMode mode) {
  return mode == MetaMode::FirstOrder ? "first-order" : "full-unrolled";
}

MetaMode parse_meta_mode(const std::string& name) {
  if (name == "first-order") return MetaMode::FirstOrder;
  if (name == "full-unrolled") return MetaMode::FullUnrolled;
  throw std::invalid_argument("unknown meta mode '" + name + "' (expected first-order or full-unrolled)");
}

void TrainConfig::validate() const {
  net.validate();
  weights.validate();
  require(n_shot == 1 || n_shot == 5, "n_shot must be 1 or 5");
  require(n_test >= 1, "n_test must be >= 1");
  require(inner_iters >= 0, "inner_iters must be >= 0");
  require(inner_batch >= 1, "inner_batch must be >= 1");
  require(meta_batch >= 1, "meta_batch must be >= 1");
  require(pretrain_batch >= 1, "pretrain_batch must be >= 1");
  require(pretrain_iters >= 0, "pretrain_iters must be >= 0");
  require(metatrain_iters >= 0, "metatrain_iters must be >= 0");
  for (double r : {lr_pretrain, lr_is, lr_gp, sgd_rate}) require(std::isfinite(r) && r > 0, "learning rates must be finite and > 0");
  require(aux_k >= 1, "aux_k must be >= 1");
  require(aux_iters >= 0, "aux_iters must be >= 0");
  require(jobs >= 1, "jobs must be >= 1");
}

Batch make_batch(const nets::NetConfig& net, std::span<const tasks::TranslationSample> samples) {
  if (samples.empty()) throw std::invalid_argument("make_batch: no samples");
  const std::size_t n = samples.size(), c = static_cast<std::size_t>(net.classes);
  const std::size_t h = static_cast<std::size_t>(net.height), w = static_cast<std::size_t>(net.width);
  const bool with_ref = net.mode == NetMode::Pg2;
  Batch b{ad::Tensor({n, c, h, w}), std::nullopt, ad::Tensor({n, 3, h, w})};
  if (with_ref) b.x_r = ad::Tensor({n, 3, h, w});
  const std::size_t img = 3 * h * w;
  for (std::size_t k = 0; k < n; ++k) {
    const auto& s = samples[k];
    if (s.x_s.height != net.height || s.x_s.width != net.width || s.x_s.classes != net.classes)
      throw ShapeError("make_batch: sample geometry does not match the network");
    const ad::Tensor oh = tasks::one_hot(s.x_s);
    std::copy(oh.data().begin(), oh.data().end(), b.x_s.data().begin() + static_cast<std::ptrdiff_t>(k * c * h * w));
    if (s.y.shape() != ad::Shape{3, h, w}) throw ShapeError("make_batch: target shape mismatch");
    std::copy(s.y.data().begin(), s.y.data().end(), b.y.data().begin() + static_cast<std::ptrdiff_t>(k * img));
    if (with_ref) {
      if (!s.x_r) throw std::invalid_argument("make_batch: pg2 mode needs reference images");
      if (s.x_r->shape() != ad::Shape{3, h, w}) throw ShapeError("make_batch: reference shape mismatch");
      std::copy(s.x_r->data().begin(), s.x_r->data().end(), b.x_r->data().begin() + static_cast<std::ptrdiff_t>(k * img));
    }
  }
  return b;
}

BiLevelState init_state(const TrainConfig& config, std::uint64_t seed) {
  config.validate();
  BiLevelState s;
  s.config = config;
  s.seed = seed;
  auto [g, d] = nets::init_params(config.net, derive_seed(seed, "init"));
  s.gp = {std::move(g), std::move(d)};
  s.phi = losses::FeatureExtractor(derive_seed(seed, "phi"));
  s.pre_g = optim::AdamState(s.gp.g, config.lr_pretrain);
  s.pre_d = optim::AdamState(s.gp.d, config.lr_pretrain);
  s.meta_g = optim::AdamState(s.gp.g, config.lr_gp);
  s.meta_d = optim::AdamState(s.gp.d, config.lr_gp);
  return s;
}

LossValues evaluate(const TrainConfig& config, const losses::FeatureExtractor& phi, const NetPair& net,
                    const Batch& batch) {
  ad::Tape tape;
  const BoundBatch b = bind_batch(tape, batch);
  return values_of_terms(full_terms(config, phi, bind(tape, net.g, false), bind(tape, net.d, false), b));
}

LossValues gan_step(const TrainConfig& config, const losses::FeatureExtractor& phi, NetPair& net,
                    optim::AdamState& adam_g, optim::AdamState& adam_d, const Batch& batch) {
  {
    ad::Tape tape;
    const BoundBatch b = bind_batch(tape, batch);
    const BoundParams g = bind(tape, net.g, false), d = bind(tape, net.d, true);
    const ad::Var loss = d_loss(config, g, d, b);
    optim::adam_step(adam_d, net.d, net.d.with_values(tape.gradients(loss, d.vars())));
  }
  ad::Tape tape;
  const BoundBatch b = bind_batch(tape, batch);
  const BoundParams g = bind(tape, net.g, true), d = bind(tape, net.d, false);
  const auto terms = full_terms(config, phi, g, d, b);
  optim::adam_step(adam_g, net.g, net.g.with_values(tape.gradients(terms.g_total, g.vars())));
  return values_of_terms(terms);
}

void pretrain(BiLevelState& state, std::span<const tasks::SceneData> scenes, int iters, const Observer& observer) {
  if (iters < 0) throw std::invalid_argument("pretrain: negative iteration count");
  std::vector<std::pair<std::size_t, std::size_t>> pool;
  for (std::size_t s = 0; s < scenes.size(); ++s)
    for (std::size_t k = 0; k < scenes[s].samples.size(); ++k) pool.push_back({s, k});
  if (pool.empty()) throw std::invalid_argument("pretrain: no training samples");
  const auto& cfg = state.config;
  for (int it = 0; it < iters; ++it) {
    const auto start = Clock::now();
    Rng rng = make_rng(state.seed, "pretrain", state.pretrain_step);
    std::vector<tasks::TranslationSample> chosen;
    for (int b = 0; b < cfg.pretrain_batch; ++b) {
      const auto [s, k] = pool[uniform_index(rng, pool.size())];
      chosen.push_back(scenes[s].samples[k]);
    }
    const LossValues loss = gan_step(cfg, state.phi, state.gp, state.pre_g, state.pre_d, make_batch(cfg.net, chosen));
    ++state.pretrain_step;
    if (observer) observer({"pretrain", state.pretrain_step, loss, seconds_since(start)});
  }
}

std::vector<tasks::TranslationSample> inner_batch(const TrainConfig& config,
                                                  std::span<const tasks::TranslationSample> samples,
                                                  std::uint64_t seed, int iter) {
  if (samples.empty()) throw std::invalid_argument("inner_batch: no adaptation samples");
  tasks::TaskConfig aug;
  aug.height = config.net.height;
  aug.width = config.net.width;
  aug.classes = config.net.classes;
  aug.crop_max = std::min(aug.crop_max, config.net.height / 4);
  std::vector<tasks::TranslationSample> out;
  out.reserve(static_cast<std::size_t>(config.inner_batch));
  for (int b = 0; b < config.inner_batch; ++b) {
    const std::size_t pos = static_cast<std::size_t>(iter) * static_cast<std::size_t>(config.inner_batch) + static_cast<std::size_t>(b);
    tasks::TranslationSample s = samples[pos % samples.size()];
    if (pos >= samples.size()) {
      auto [y, seg] = tasks::augment(s.y, s.x_s, derive_seed(seed, "inner/augment", static_cast<std::uint64_t>(iter), static_cast<std::uint64_t>(b)), aug);
      s.y = std::move(y);
      s.x_s = std::move(seg);
    }
    out.push_back(std::move(s));
  }
  return out;
}

NetPair inner_adapt(const TrainConfig& config, const losses::FeatureExtractor& phi, const NetPair& gp,
                    std::span<const tasks::TranslationSample> samples, std::uint64_t seed, MetaMode mode) {
  if (samples.empty()) throw std::invalid_argument("inner_adapt: no adaptation samples");
  if (mode == MetaMode::FullUnrolled) {
    ad::Tape tape(ad::TapeMode::Differentiable);
    auto [gv, dv] = unrolled_adapt(config, phi, tape, gp, bind(tape, gp.g, true).vars(), bind(tape, gp.d, true).vars(),
                                   samples, seed);
    return {values_of(gp.g, gv), values_of(gp.d, dv)};
  }
  NetPair is = gp;
  optim::AdamState adam_g(is.g, config.lr_is), adam_d(is.d, config.lr_is);
  for (int it = 0; it < config.inner_iters; ++it)
    gan_step(config, phi, is, adam_g, adam_d, make_batch(config.net, inner_batch(config, samples, seed, it)));
  return is;
}

MetaGradient episode_meta_gradient(const TrainConfig& config, const losses::FeatureExtractor& phi,
                                   const NetPair& gp, const tasks::TaskEpisode& episode, std::uint64_t seed,
                                   MetaMode mode) {
  if (episode.train.empty() || episode.test.empty())
    throw std::invalid_argument("meta-gradient: episode needs both training and test samples");
  const Batch test = make_batch(config.net, episode.test);
  MetaGradient out;
  if (mode == MetaMode::FullUnrolled) {
    ad::Tape tape(ad::TapeMode::Differentiable);
    const BoundParams g0 = bind(tape, gp.g, true), d0 = bind(tape, gp.d, true);
    auto [gv, dv] = unrolled_adapt(config, phi, tape, gp, g0.vars(), d0.vars(), episode.train, seed);
    const auto t = full_terms(config, phi, BoundParams(&gp.g, gv), BoundParams(&gp.d, dv), bind_batch(tape, test));
    out.grad.g = gp.g.with_values(tape.gradients(t.g_total, g0.vars()));
    out.grad.d = gp.d.with_values(tape.gradients(t.d, d0.vars()));
    out.test = values_of_terms(t);
    return out;
  }
  const NetPair is = inner_adapt(config, phi, gp, episode.train, seed, mode);
  ad::Tape tape;
  const BoundParams g = bind(tape, is.g, true), d = bind(tape, is.d, true);
  const auto t = full_terms(config, phi, g, d, bind_batch(tape, test));
  out.grad.g = gp.g.with_values(tape.gradients(t.g_total, g.vars()));
  out.grad.d = gp.d.with_values(tape.gradients(t.d, d.vars()));
  out.test = values_of_terms(t);
  return out;
}

LossValues meta_update(BiLevelState& state, std::span<const tasks::TaskEpisode> episodes) {
  if (episodes.empty()) throw std::invalid_argument("meta_update: no episodes");
  const auto& cfg = state.config;
  const std::uint64_t step = state.meta_g.t;
  std::vector<MetaGradient> parts(episodes.size());
  parallel_for(episodes.size(), cfg.jobs, [&](std::size_t i) {
    parts[i] = episode_meta_gradient(cfg, state.phi, state.gp, episodes[i], derive_seed(state.seed, "meta", step, i),
                                     cfg.meta_mode);
  });
  NetPair mean = parts.front().grad;
  LossValues loss;
  const double w = 1.0 / static_cast<double>(parts.size());
  add_losses(loss, parts.front().test, w);
  for (std::size_t i = 1; i < parts.size(); ++i) {
    accumulate(mean.g, parts[i].grad.g);
    accumulate(mean.d, parts[i].grad.d);
    add_losses(loss, parts[i].test, w);
  }
  scale(mean.g, w);
  scale(mean.d, w);
  optim::adam_step(state.meta_g, state.gp.g, mean.g);
  optim::adam_step(state.meta_d, state.gp.d, mean.d);
  return loss;
}

tasks::TaskEpisode pool_episode(const tasks::SceneData& scene, int n_shot, int n_test, Rng& rng) {
  const std::size_t need = static_cast<std::size_t>(n_shot) + static_cast<std::size_t>(n_test);
  if (n_shot < 1 || n_test < 1 || need > scene.samples.size())
    throw std::invalid_argument("pool_episode: scene " + std::to_string(scene.scene.id) + " has " +
                                std::to_string(scene.samples.size()) + " samples, needs " + std::to_string(need));
  std::vector<std::size_t> idx(scene.samples.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < need; ++i) std::swap(idx[i], idx[i + uniform_index(rng, idx.size() - i)]);
  tasks::TaskEpisode ep;
  ep.scene = scene.scene;
  for (std::size_t i = 0; i < need; ++i)
    (i < static_cast<std::size_t>(n_shot) ? ep.train : ep.test).push_back(scene.samples[idx[i]]);
  return ep;
}

void metatrain(BiLevelState& state, std::span<const tasks::SceneData> scenes, int iters, const Observer& observer) {
  if (iters < 0) throw std::invalid_argument("metatrain: negative iteration count");
  const auto& cfg = state.config;
  if (scenes.size() < static_cast<std::size_t>(cfg.meta_batch))
    throw std::invalid_argument("metatrain: fewer training scenes than meta_batch");
  for (int it = 0; it < iters; ++it) {
    const auto start = Clock::now();
    Rng rng = make_rng(state.seed, "metatrain", state.metatrain_step);
    std::vector<std::size_t> idx(scenes.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::vector<tasks::TaskEpisode> eps;
    for (std::size_t i = 0; i < static_cast<std::size_t>(cfg.meta_batch); ++i) {
      std::swap(idx[i], idx[i + uniform_index(rng, idx.size() - i)]);
      eps.push_back(pool_episode(scenes[idx[i]], cfg.n_shot, cfg.n_test, rng));
    }
    const LossValues loss = meta_update(state, eps);
    ++state.metatrain_step;
    if (observer) observer({"metatrain", state.metatrain_step, loss, seconds_since(start)});
  }
}

std::vector<ad::Tensor> predict(const TrainConfig& config, const ParameterSet& g,
                                std::span<const tasks::TranslationSample> samples) {
  const Batch batch = make_batch(config.net, samples);
  ad::Tape tape;
  const BoundBatch b = bind_batch(tape, batch);
  const ad::Tensor& out = nets::generator_forward(config.net, bind(tape, g, false), b.x_s, b.x_r).value();
  const std::size_t img = out.size() / samples.size();
  std::vector<ad::Tensor> images;
  for (std::size_t k = 0; k < samples.size(); ++k) {
    const auto first = out.data().begin() + static_cast<std::ptrdiff_t>(k * img);
    images.emplace_back(ad::Shape{3, out.dim(2), out.dim(3)}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(img)));
  }
  return images;
}

AdaptResult test_adapt(const BiLevelState& state, const tasks::TaskEpisode& episode,
                       std::span<const tasks::SceneData> train_scenes, int k, bool use_aux, const Observer& observer) {
  if (episode.train.empty()) throw std::invalid_argument("test_adapt: unseen episode has no training samples");
  if (episode.test.empty()) throw std::invalid_argument("test_adapt: unseen episode has no test samples");
  const auto& cfg = state.config;
  AdaptResult out;
  NetPair gp = state.gp;
  if (use_aux) {
    if (k < 1 || static_cast<std::size_t>(k) > train_scenes.size())
      throw std::invalid_argument("test_adapt: K must be in [1, " + std::to_string(train_scenes.size()) + "]");
    const auto keys = scene_keys(train_scenes);
    out.aux = tasks::retrieve_topk(episode.train.front().x_s, keys, k);
    BiLevelState copy = state;
    for (int it = 0; it < cfg.aux_iters; ++it) {
      const auto start = Clock::now();
      Rng rng = make_rng(state.seed, "aux", episode.scene.id, static_cast<std::uint64_t>(it));
      std::vector<tasks::TaskEpisode> eps;
      for (const auto& hit : out.aux) eps.push_back(pool_episode(train_scenes[hit.index], cfg.n_shot, cfg.n_test, rng));
      const LossValues loss = meta_update(copy, eps);
      if (observer) observer({"aux", static_cast<std::uint64_t>(it + 1), loss, seconds_since(start)});
    }
    gp = std::move(copy.gp);
  }
  out.is = inner_adapt(cfg, state.phi, gp, episode.train, derive_seed(state.seed, "adapt", episode.scene.id),
                       cfg.meta_mode);
  out.predictions = predict(cfg, out.is.g, episode.test);
  return out;
}

void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(jobs, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace bilevel::train
