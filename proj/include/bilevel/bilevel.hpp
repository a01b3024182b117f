#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bilevel/dataset.hpp"
#include "bilevel/losses.hpp"
#include "bilevel/nets.hpp"
#include "bilevel/optim.hpp"
#include "bilevel/random.hpp"
#include "bilevel/tasks.hpp"

namespace bilevel::train {

enum class MetaMode {
  FirstOrder,    // test-loss gradient at the adapted parameters, applied to the GP model
  FullUnrolled,  // gradient through every inner update; inner loop is plain SGD
};

const char* meta_mode_name(MetaMode mode);
/// Accepts "first-order" and "full-unrolled". Throws std::invalid_argument.
MetaMode parse_meta_mode(const std::string& name);

struct TrainConfig {
  nets::NetConfig net;
  losses::LossWeights weights;
  int n_shot = 5;
  int n_test = 5;            // test samples per meta-training episode
  int inner_iters = 20;
  int inner_batch = 5;
  int meta_batch = 5;
  int pretrain_batch = 5;
  int pretrain_iters = 2000;
  int metatrain_iters = 1000;
  double lr_pretrain = 1e-4;
  double lr_is = 1e-4;       // inner Adam rate α
  double lr_gp = 1e-4;       // meta Adam rate β
  double sgd_rate = 0.01;    // inner rate when unrolled
  MetaMode meta_mode = MetaMode::FirstOrder;
  int aux_k = 3;
  int aux_iters = 50;        // alternating GP fine-tuning iterations on auxiliary tasks
  int jobs = 1;              // worker threads for per-episode work

  /// Throws std::invalid_argument naming the first violated constraint.
  void validate() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// A mini-batch in network layout.
struct Batch {
  ad::Tensor x_s;                  // one-hot [N,C,H,W]
  std::optional<ad::Tensor> x_r;   // [N,3,H,W] in pg2 mode
  ad::Tensor y;                    // [N,3,H,W]
};

/// References are dropped in pix2pix mode.
Batch make_batch(const nets::NetConfig& net, std::span<const tasks::TranslationSample> samples);

/// Loss values of one batch evaluation.
struct LossValues {
  double g_total = 0.0;
  double d = 0.0;
  double l1 = 0.0;
  double adv = 0.0;
  double perceptual = 0.0;
};

struct NetPair {
  ParameterSet g;
  ParameterSet d;
};

/// General-purpose model plus everything needed to continue training it.
/// All randomness is a function of (seed, phase, step), so the step counters
/// are the only random state.
struct BiLevelState {
  TrainConfig config;
  std::uint64_t seed = 0;
  NetPair gp;
  losses::FeatureExtractor phi{0};
  optim::AdamState pre_g, pre_d;    // rate lr_pretrain
  optim::AdamState meta_g, meta_d;  // rate lr_gp; t counts meta updates
  std::uint64_t pretrain_step = 0;
  std::uint64_t metatrain_step = 0;
};

BiLevelState init_state(const TrainConfig& config, std::uint64_t seed);

struct LogEntry {
  std::string phase;  // "pretrain" | "metatrain" | "aux"
  std::uint64_t step = 0;
  LossValues loss;    // batch losses; mean test losses for meta steps
  double seconds = 0.0;
};
using Observer = std::function<void(const LogEntry&)>;

/// Loss values of (g, d) on a batch, without gradients.
LossValues evaluate(const TrainConfig& config, const losses::FeatureExtractor& phi, const NetPair& net,
                    const Batch& batch);

/// One discriminator Adam step with the generator fixed, then one generator
/// Adam step against the updated discriminator. Returns the losses seen by
/// the generator step.
LossValues gan_step(const TrainConfig& config, const losses::FeatureExtractor& phi, NetPair& net,
                    optim::AdamState& adam_g, optim::AdamState& adam_d, const Batch& batch);

/// Runs iters pretraining steps on mini-batches drawn from every scene's pool.
void pretrain(BiLevelState& state, std::span<const tasks::SceneData> scenes, int iters,
              const Observer& observer = {});

/// Inner batch of iteration `iter`: cycles through the samples; indices past
/// the first pass are augmented copies.
std::vector<tasks::TranslationSample> inner_batch(const TrainConfig& config,
                                                  std::span<const tasks::TranslationSample> samples,
                                                  std::uint64_t seed, int iter);

/// IS model adapted from gp on samples for config.inner_iters iterations with
/// the inner optimizer of mode. gp is never modified.
NetPair inner_adapt(const TrainConfig& config, const losses::FeatureExtractor& phi, const NetPair& gp,
                    std::span<const tasks::TranslationSample> samples, std::uint64_t seed, MetaMode mode);

struct MetaGradient {
  NetPair grad;       // d(test g_total)/dθ_G and d(test loss_d)/dθ_D
  LossValues test;    // test losses at the adapted parameters
};

/// Meta-gradient of one episode: inner adaptation on episode.train, then the
/// losses on all of episode.test.
MetaGradient episode_meta_gradient(const TrainConfig& config, const losses::FeatureExtractor& phi,
                                   const NetPair& gp, const tasks::TaskEpisode& episode, std::uint64_t seed,
                                   MetaMode mode);

/// Averages the episodes' meta-gradients and applies exactly one Adam step
/// to each GP network. Returns the mean test losses.
LossValues meta_update(BiLevelState& state, std::span<const tasks::TaskEpisode> episodes);

/// Meta-training episode from a training scene's fixed pool: n_shot training
/// and n_test test samples, disjoint.
tasks::TaskEpisode pool_episode(const tasks::SceneData& scene, int n_shot, int n_test, Rng& rng);

/// Runs iters meta-training iterations, each a meta_update on meta_batch
/// distinct training scenes.
void metatrain(BiLevelState& state, std::span<const tasks::SceneData> scenes, int iters,
               const Observer& observer = {});

struct AdaptResult {
  NetPair is;
  std::vector<ad::Tensor> predictions;  // one [3,H,W] image per test sample
  std::vector<tasks::RetrievalHit> aux;
};

/// Generator outputs for every test sample of episode.
std::vector<ad::Tensor> predict(const TrainConfig& config, const ParameterSet& g,
                                std::span<const tasks::TranslationSample> samples);

/// Test-time adaptation to an unseen episode. With use_aux the top-K training
/// scenes by structure similarity to episode.train[0] fine-tune a copy of the
/// GP model for aux_iters meta updates first. state is never modified.
AdaptResult test_adapt(const BiLevelState& state, const tasks::TaskEpisode& episode,
                       std::span<const tasks::SceneData> train_scenes, int k, bool use_aux,
                       const Observer& observer = {});

/// Runs fn(i) for i in [0, n) on up to jobs threads. Exceptions are rethrown
/// on the calling thread, lowest index first.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn);

}  // namespace bilevel::train
