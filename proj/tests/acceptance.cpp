// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Arguments select criteria by number (criterion 6 runs with 4).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <set>
#include <sstream>
#include <string>

#include "bilevel/experiment.hpp"
#include "bilevel/gradcheck.hpp"
#include "bilevel/metrics.hpp"
#include "support/checks.hpp"

using namespace bilevel;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Desk-scale trend experiments: 16x16 scenes, 100 training scenes with fixed
// pools of 10, 20 unseen scenes, 20 adaptation iterations.
constexpr int kSeeds = 5;
constexpr int kTrainScenes = 100;
constexpr int kUnseenScenes = 20;
constexpr int kPretrainIters = 800;

struct TrendSetup {
  int n_shot = 5;
  int clusters = 0;
  int metatrain_iters = 200;
  int aux_iters = 0;
  double lambda_a = 1.0;
  double lr_is = 2e-3;
  double lr_gp = 5e-4;
};

train::TrainConfig trend_train_config(const TrendSetup& s) {
  train::TrainConfig c;
  c.net.height = c.net.width = 16;
  c.net.base_width = 4;
  c.net.depth = 2;
  c.weights.lambda_a = s.lambda_a;
  c.weights.nonsaturating = true;
  c.n_shot = s.n_shot;
  c.lr_pretrain = 1e-3;
  c.lr_is = s.lr_is;
  c.lr_gp = s.lr_gp;
  c.aux_k = 3;
  c.aux_iters = s.aux_iters;
  return c;
}

tasks::DatasetConfig trend_data_config(const TrendSetup& s) {
  tasks::DatasetConfig d;
  d.task.height = d.task.width = 16;
  d.task.crop_max = 2;
  d.train_scenes = kTrainScenes;
  d.samples_per_scene = 10;
  d.unseen_scenes = kUnseenScenes;
  d.clusters = s.clusters;
  return d;
}

std::uint64_t gp_hash(const train::BiLevelState& s) { return s.gp.g.fingerprint() ^ (s.gp.d.fingerprint() * 31); }

// Alternation contracts observed during a trend run.
struct Contracts {
  std::size_t meta_steps = 0;
  std::size_t adapt_calls = 0;
  std::vector<std::string> violations;

  void expect(bool ok, const std::string& what) {
    if (!ok && violations.size() < 5) violations.push_back(what);
  }
};

struct Trained {
  tasks::Dataset data;
  train::BiLevelState base;  // pretrained only
  train::BiLevelState bil;   // pretrained then metatrained
};

Trained train_trend(const TrendSetup& setup, std::uint64_t seed, Contracts& contracts) {
  Trained t{tasks::generate_dataset(trend_data_config(setup), derive_seed(seed, "data")), {}, {}};
  train::BiLevelState s = train::init_state(trend_train_config(setup), seed);
  train::pretrain(s, t.data.train, kPretrainIters);
  t.base = s;
  Rng probe = make_rng(seed, "contract-probe");
  for (int it = 0; it < setup.metatrain_iters; ++it) {
    const std::uint64_t g0 = s.meta_g.t, d0 = s.meta_d.t, p0 = s.pre_g.t;
    train::metatrain(s, t.data.train, 1);
    ++contracts.meta_steps;
    contracts.expect(s.meta_g.t == g0 + 1 && s.meta_d.t == d0 + 1,
                     fmt("meta step %d advanced GP Adam t by %llu/%llu", it, (unsigned long long)(s.meta_g.t - g0),
                         (unsigned long long)(s.meta_d.t - d0)));
    contracts.expect(s.pre_g.t == p0, "meta step touched the pretraining Adam state");
    if (it % 20 == 0) {
      const auto& scene = t.data.train[uniform_index(probe, t.data.train.size())];
      const tasks::TaskEpisode ep = train::pool_episode(scene, setup.n_shot, s.config.n_test, probe);
      const std::uint64_t h = gp_hash(s);
      train::inner_adapt(s.config, s.phi, s.gp, ep.train, probe(), s.config.meta_mode);
      ++contracts.adapt_calls;
      contracts.expect(gp_hash(s) == h, fmt("inner_adapt changed the GP hash at meta step %d", it));
    }
  }
  t.bil = std::move(s);
  return t;
}

struct Scores {
  double mse = 0.0;
  double ssim = 0.0;
};

Scores score(const train::BiLevelState& s, const std::vector<tasks::TaskEpisode>& eps,
             const std::function<std::vector<ad::Tensor>(const tasks::TaskEpisode&)>& predict) {
  std::vector<metrics::SampleMetrics> rows;
  for (const auto& ep : eps) {
    const auto pred = predict(ep);
    for (std::size_t k = 0; k < ep.test.size(); ++k)
      rows.push_back(metrics::measure(s.phi, ep.scene.id, static_cast<int>(k), pred[k], ep.test[k].y));
  }
  const auto r = metrics::summarize(s.phi.seed(), std::move(rows));
  return {r.mean_mse, r.mean_ssim};
}

std::vector<tasks::TaskEpisode> unseen(const tasks::Dataset& d, int n_shot) {
  std::vector<tasks::TaskEpisode> eps = d.unseen;
  for (auto& ep : eps) ep.train.resize(static_cast<std::size_t>(n_shot));
  return eps;
}

// test_adapt with contract checks around it.
train::AdaptResult checked_adapt(const train::BiLevelState& s, const tasks::TaskEpisode& ep,
                                 const tasks::Dataset& d, bool aux, Contracts& contracts) {
  const std::uint64_t h = gp_hash(s), t = s.meta_g.t;
  train::AdaptResult r = train::test_adapt(s, ep, d.train, s.config.aux_k, aux);
  ++contracts.adapt_calls;
  contracts.expect(gp_hash(s) == h && s.meta_g.t == t,
                   fmt("test_adapt changed the GP model on unseen scene %llu", (unsigned long long)ep.scene.id));
  return r;
}

// ---------------------------------------------------------------------------

Outcome criterion1() {
  Rng rng(2024);
  double worst = 0.0;
  std::string worst_name;
  for (const auto& pc : checks::primitive_cases()) {
    const double e = checks::primitive_fd_error(pc, rng, 50);
    if (!(e <= worst)) {
      worst = e;
      worst_name = pc.name;
    }
  }
  double net = 0.0;
  std::uint64_t seed = 100;
  for (NetMode mode : {NetMode::Pg2, NetMode::Pix2pix}) {
    nets::NetConfig c;
    c.height = c.width = 8;
    c.classes = 3;
    c.mode = mode;
    c.base_width = 4;
    c.depth = 2;
    for (NetRole role : {NetRole::Generator, NetRole::Discriminator})
      net = std::max(net, checks::network_fd_error(c, role, seed++));
  }
  const bool pass = worst < 1e-6 && net < 1e-5;
  return {pass, fmt("%zu primitives x 50 instances, worst rel err %.2e (%s) < 1e-6; generator/discriminator %.2e < 1e-5",
                    checks::primitive_cases().size(), worst, worst_name.c_str(), net)};
}

Outcome criterion2() {
  double worst = 0.0;
  for (int steps : {1, 2})
    for (std::uint64_t seed : {3u, 17u}) {
      const auto e = checks::meta_gradient_fd_error(steps, seed);
      worst = std::max({worst, e.g, e.d});
    }
  const train::TrainConfig tc = checks::tiny_train_config(0);
  double gap = 0.0;
  for (std::uint64_t seed : {5u, 6u, 7u}) gap = std::max(gap, checks::mode_collapse_gap(tc, checks::tiny_episode(seed), seed));
  const std::size_t params = nets::init_params(tc.net, 0).first.count() + nets::init_params(tc.net, 0).second.count();
  const bool pass = worst < 1e-4 && gap < 1e-10 && params <= 200;
  return {pass, fmt("%zu-parameter net, unrolled 1 and 2 steps vs finite differences rel err %.2e < 1e-4; "
                    "first-order vs unrolled at 0 steps %.1e < 1e-10",
                    params, worst, gap)};
}

Outcome criterion3() {
  Rng rng(31);
  int sim_bad = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto a = checks::random_seg(rng, 8, 8, 5), b = checks::random_seg(rng, 8, 8, 5);
    if (tasks::similarity(a, b) != checks::iou_oracle(a, b)) ++sim_bad;
  }
  int topk_bad = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + uniform_index(rng, 40);
    std::vector<std::pair<std::uint64_t, tasks::SegMap>> pool;
    for (std::size_t i = 0; i < n; ++i) {
      // Repeated maps and ids exercise the tie order.
      if (i > 0 && uniform_index(rng, 4) == 0)
        pool.push_back({uniform_index(rng, 60), pool[uniform_index(rng, i)].second});
      else
        pool.push_back({uniform_index(rng, 60), checks::random_seg(rng, 8, 8, 5)});
    }
    std::vector<tasks::RetrievalKey> keys;
    for (const auto& [id, seg] : pool) keys.push_back({id, &seg});
    const auto query = uniform_index(rng, 3) == 0 ? pool[uniform_index(rng, n)].second : checks::random_seg(rng, 8, 8, 5);
    const int k = 1 + static_cast<int>(uniform_index(rng, n));
    std::vector<std::uint64_t> got;
    for (const auto& h : tasks::retrieve_topk(query, keys, k)) got.push_back(h.scene_id);
    if (got != checks::topk_oracle(query, pool, k)) ++topk_bad;
  }
  return {sim_bad == 0 && topk_bad == 0,
          fmt("similarity vs IoU oracle: %d/1000 mismatches; top-k vs full sort: %d/200 mismatches", sim_bad, topk_bad)};
}

Contracts g_trend_contracts;
bool g_trend_ran = false;

Outcome criterion4() {
  TrendSetup setup;
  setup.aux_iters = 2;  // only exercised by the contract probe below
  int wins = 0;
  std::string per_seed;
  for (int seed = 1; seed <= kSeeds; ++seed) {
    const auto start = Clock::now();
    const Trained t = train_trend(setup, static_cast<std::uint64_t>(seed), g_trend_contracts);
    const auto eps = unseen(t.data, setup.n_shot);
    const Scores base = score(t.base, eps, [&](const tasks::TaskEpisode& ep) {
      const std::uint64_t h = gp_hash(t.base);
      const auto is = train::inner_adapt(t.base.config, t.base.phi, t.base.gp, ep.train,
                                         derive_seed(t.base.seed, "adapt", ep.scene.id), train::MetaMode::FirstOrder);
      ++g_trend_contracts.adapt_calls;
      g_trend_contracts.expect(gp_hash(t.base) == h, "inner_adapt changed the pretrained GP");
      return train::predict(t.base.config, is.g, ep.test);
    });
    const Scores bil = score(t.bil, eps, [&](const tasks::TaskEpisode& ep) {
      return checked_adapt(t.bil, ep, t.data, false, g_trend_contracts).predictions;
    });
    // The retrieval path must leave the GP model alone as well.
    checked_adapt(t.bil, eps.front(), t.data, true, g_trend_contracts);
    const bool win = bil.mse < base.mse && bil.ssim > base.ssim;
    wins += win;
    per_seed += fmt("\n    seed %d: baseline mse %.5f ssim %.4f | BiL mse %.5f ssim %.4f  %s  (%.0f s)", seed, base.mse,
                    base.ssim, bil.mse, bil.ssim, win ? "win" : "loss", seconds_since(start));
  }
  g_trend_ran = true;
  return {wins >= 4, fmt("BiL beats the fine-tuned baseline in MSE and SSIM on %d/5 seeds (need 4)", wins) + per_seed};
}

Outcome criterion5() {
  TrendSetup setup;
  setup.n_shot = 1;
  setup.clusters = 10;
  setup.metatrain_iters = 100;
  setup.aux_iters = 10;
  int wins = 0;
  std::string per_seed;
  Contracts contracts;
  for (int seed = 1; seed <= kSeeds; ++seed) {
    const auto start = Clock::now();
    const Trained t = train_trend(setup, static_cast<std::uint64_t>(seed), contracts);
    const auto eps = unseen(t.data, setup.n_shot);
    const Scores plain = score(t.bil, eps, [&](const tasks::TaskEpisode& ep) {
      return checked_adapt(t.bil, ep, t.data, false, contracts).predictions;
    });
    const Scores aux = score(t.bil, eps, [&](const tasks::TaskEpisode& ep) {
      return checked_adapt(t.bil, ep, t.data, true, contracts).predictions;
    });
    const bool win = aux.mse <= plain.mse;
    wins += win;
    per_seed += fmt("\n    seed %d: BiL w/o Aux mse %.5f | BiL + Aux mse %.5f  %s  (%.0f s)", seed, plain.mse, aux.mse,
                    win ? "win" : "loss", seconds_since(start));
  }
  return {wins >= 4, fmt("1-shot BiL + Aux MSE <= BiL w/o Aux on %d/5 clustered seeds (need 4)", wins) + per_seed};
}

Outcome criterion6() {
  if (!g_trend_ran) return {false, "criterion 4 did not run"};
  const auto& c = g_trend_contracts;
  std::string detail = fmt("%zu meta updates each advanced GP Adam t by exactly 1; GP hash unchanged across %zu "
                           "inner_adapt/test_adapt calls",
                           c.meta_steps, c.adapt_calls);
  for (const auto& v : c.violations) detail += "\n    violation: " + v;
  return {c.violations.empty() && c.meta_steps > 0 && c.adapt_calls > 0, detail};
}

Outcome criterion7() {
  double adam = 0.0;
  for (double rate : {0.1, 1e-3, 0.5})
    for (double target : {2.0, -0.7}) {
      ParameterSet theta(NetRole::Generator, NetMode::Pg2);
      theta.add("w", ad::Tensor(ad::Shape{1}, 0.0));
      optim::AdamState s(theta, rate);
      const auto want = checks::reference_adam_quadratic(0.0, target, rate, 5);
      for (int t = 0; t < 5; ++t) {
        ParameterSet g = theta.with_values({ad::Tensor(ad::Shape{1}, 2.0 * (theta[0][0] - target))});
        optim::adam_step(s, theta, g);
        adam = std::max(adam, std::fabs(theta[0][0] - want[static_cast<std::size_t>(t)]));
      }
    }
  Rng rng(9);
  double ssim = 0.0;
  for (int i = 0; i < 20; ++i) {
    const std::size_t h = 7 + uniform_index(rng, 12), w = 7 + uniform_index(rng, 12);
    const ad::Tensor a = checks::random_image(rng, 1, h, w).reshaped({3, h, w});
    ad::Tensor b = a;
    for (auto& v : b.data()) v = std::clamp(v + 0.3 * uniform(rng, -1, 1), -1.0, 1.0);
    ssim = std::max(ssim, std::fabs(metrics::ssim(a, b) - checks::ssim_oracle(a, b)));
  }
  const double psnr = metrics::psnr_from_mse(0.01);
  return {adam < 1e-12 && ssim < 1e-10 && psnr == 20.0,
          fmt("adam vs closed-form recurrence %.1e < 1e-12 over 5 steps; ssim vs window oracle %.1e < 1e-10; "
              "psnr(0.01) = %.17g",
              adam, ssim, psnr)};
}

Outcome criterion8() {
  const fs::path dir = checks::scratch_dir("acceptance_repro");
  const fs::path out = dir / "run";
  auto config = [&] {
    cli::ParsedConfig p = checks::smoke_config(out, 42);
    cli::set_key(p, "pretrain_iters", "12");
    cli::set_key(p, "metatrain_iters", "4");
    return p;
  };
  std::ostringstream log, err;
  const auto run = [&](const std::string& sub, const cli::ParsedConfig& p, cli::CommandOptions o = {}) {
    if (cli::run_command(sub, p, o, log, err) != cli::kExitOk) throw std::runtime_error(sub + " failed: " + err.str());
  };

  run("full-run", config());
  const auto first = checks::read_tree(out);
  fs::remove_all(out);
  run("full-run", config());
  const auto second = checks::read_tree(out);
  fs::remove_all(out);

  // Interrupted: each training stage stops halfway and resumes from its checkpoint.
  const cli::ParsedConfig full = config();
  run("gen-data", full);
  cli::ParsedConfig half = full;
  cli::set_key(half, "pretrain_iters", "5");
  run("pretrain", half);
  run("pretrain", full);
  cli::set_key(half, "pretrain_iters", "12");
  cli::set_key(half, "metatrain_iters", "1");
  run("metatrain", half);
  run("metatrain", full);
  for (cli::Variant v : cli::kAllVariants) run("adapt", full, {v, {}});
  run("eval", full);
  const auto resumed = checks::read_tree(out);

  std::size_t ckpts = 0, images = 0, csvs = 0;
  for (const auto& [name, bytes] : first) {
    ckpts += name.ends_with(".ckpt");
    images += name.ends_with(".ppm") || name.ends_with(".pgm");
    csvs += name.ends_with(".csv");
  }
  std::string diff;
  for (const auto* other : {&second, &resumed}) {
    if (other->size() != first.size()) diff += " file count differs;";
    for (const auto& [name, bytes] : first) {
      const auto it = other->find(name);
      if (it == other->end() || it->second != bytes) diff += " " + name + (other == &second ? " (rerun)" : " (resumed)");
    }
  }
  return {diff.empty() && ckpts == 2 && csvs > 0 && images > 0,
          fmt("two full runs and a stage-interrupted run agree byte for byte on %zu files (%zu checkpoints, %zu images, "
              "%zu CSVs)",
              first.size(), ckpts, images, csvs) +
              (diff.empty() ? "" : "\n    differing:" + diff)};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  const bool all = selected.empty();
  if (selected.count(6)) selected.insert(4);

  const std::pair<int, std::function<Outcome()>> criteria[] = {
      {1, criterion1}, {2, criterion2}, {3, criterion3}, {4, criterion4},
      {5, criterion5}, {6, criterion6}, {7, criterion7}, {8, criterion8},
  };
  const double limits[] = {0, 120, 120, 30, 1800, 1800, 1e9, 120, 600};
  int failed = 0;
  for (const auto& [id, fn] : criteria) {
    if (!all && !selected.count(id)) continue;
    const auto start = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = seconds_since(start);
    std::string timing = fmt(" [%.1f s", secs);
    if (limits[id] < 1e9) {
      timing += fmt(", limit %.0f s", limits[id]);
      if (secs >= limits[id]) {
        o.pass = false;
        timing += ", over limit";
      }
    }
    timing += "]";
    if (!o.pass) ++failed;
    std::printf("CRITERION %d %s: %s%s\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str(), timing.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
