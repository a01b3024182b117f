#include "bilevel/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "bilevel/random.hpp"

namespace bilevel::cli {
namespace {

namespace fs = std::filesystem;

std::uint64_t data_seed(const ExperimentConfig& c) { return derive_seed(c.seed, "data"); }

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string short_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

tasks::Dataset load_data(const ExperimentConfig& c) {
  const Paths p{c.out};
  if (!fs::exists(p.data() / "manifest.txt"))
    throw MissingPrerequisite("no dataset under " + p.data().string() + "; run gen-data first");
  tasks::Dataset d = tasks::import_dataset(p.data());
  if (!(d.config == c.data) || d.seed != data_seed(c))
    throw ConfigError("dataset under " + p.data().string() + " was generated from a different config; rerun gen-data");
  return d;
}

std::vector<tasks::TaskEpisode> unseen_episodes(const tasks::Dataset& d, int n_shot) {
  std::vector<tasks::TaskEpisode> eps = d.unseen;
  for (auto& ep : eps) ep.train.resize(static_cast<std::size_t>(n_shot));
  return eps;
}

// The checkpoint's state, retargeted to the current config's free keys.
train::BiLevelState resume_state(const fs::path& path, const ExperimentConfig& c) {
  Checkpoint ck = load_checkpoint(path);
  std::string why;
  if (!resumable_from(ck.config, c, &why))
    throw ConfigError(path.string() + " does not match the config (" + why + "); remove it or restore the config");
  ck.state.config = c.train;
  return std::move(ck.state);
}

train::BiLevelState completed_pretrain(const ExperimentConfig& c) {
  const Paths p{c.out};
  if (!fs::exists(p.pretrain_ckpt())) throw MissingPrerequisite("no " + p.pretrain_ckpt().string() + "; run pretrain first");
  train::BiLevelState s = resume_state(p.pretrain_ckpt(), c);
  if (s.pretrain_step < static_cast<std::uint64_t>(c.train.pretrain_iters))
    throw MissingPrerequisite("pretraining stopped at step " + std::to_string(s.pretrain_step) + " of " +
                              std::to_string(c.train.pretrain_iters) + "; run pretrain to finish it");
  return s;
}

train::BiLevelState completed_metatrain(const ExperimentConfig& c) {
  const Paths p{c.out};
  if (!fs::exists(p.metatrain_ckpt()))
    throw MissingPrerequisite("no " + p.metatrain_ckpt().string() + "; run metatrain first");
  train::BiLevelState s = resume_state(p.metatrain_ckpt(), c);
  if (s.metatrain_step < static_cast<std::uint64_t>(c.train.metatrain_iters))
    throw MissingPrerequisite("meta-training stopped at step " + std::to_string(s.metatrain_step) + " of " +
                              std::to_string(c.train.metatrain_iters) + "; run metatrain to finish it");
  return s;
}

constexpr const char* kLogHeader = "step,g_total,d,l1,adv,perceptual";

// Keeps the rows up to and including step `keep` so that a resumed stage
// appends exactly what an uninterrupted one would have written.
void prepare_log(const fs::path& path, std::uint64_t keep) {
  std::string kept = std::string(kLogHeader) + "\n";
  if (keep > 0 && fs::exists(path)) {
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      const auto comma = line.find(',');
      if (comma == std::string::npos) continue;
      if (std::stoull(line.substr(0, comma)) <= keep) kept += line + "\n";
    }
  }
  write_text(path, kept);
}

// Appends one CSV row per step and prints progress about ten times per run.
class TrainLog {
 public:
  TrainLog(const fs::path& path, std::ostream& log, std::uint64_t first, std::uint64_t last)
      : out_(path, std::ios::app), log_(log), first_(first), last_(last) {
    if (!out_) throw std::runtime_error("cannot append to " + path.string());
  }

  void operator()(const train::LogEntry& e) {
    const auto& l = e.loss;
    if (!std::isfinite(l.g_total) || !std::isfinite(l.d))
      throw NumericError(e.phase + " step " + std::to_string(e.step) + ": non-finite loss");
    out_ << e.step << ',' << num(l.g_total) << ',' << num(l.d) << ',' << num(l.l1) << ',' << num(l.adv) << ','
         << num(l.perceptual) << '\n';
    seconds_ += e.seconds;
    const std::uint64_t every = std::max<std::uint64_t>(1, (last_ - first_) / 10);
    if ((e.step - first_) % every == 0 || e.step == last_) {
      log_ << e.phase << " " << e.step << "/" << last_ << "  g_total " << short_num(l.g_total) << "  d "
           << short_num(l.d) << "  l1 " << short_num(l.l1) << "  " << short_num(seconds_) << " s\n";
      log_.flush();
    }
  }

 private:
  std::ofstream out_;
  std::ostream& log_;
  std::uint64_t first_, last_;
  double seconds_ = 0.0;
};

std::string report_row(Variant v, int n_shot, const metrics::MetricReport& r) {
  return std::string(variant_name(v)) + "," + variant_label(v, n_shot) + "," + std::to_string(r.count()) + "," +
         num(r.mean_mse) + "," + num(r.mean_psnr) + "," + num(r.mean_ssim) + "," + num(r.mean_proxy_lpips) + "\n";
}

}  // namespace

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Baseline: return "baseline";
    case Variant::BaselineNShot: return "baseline-nshot";
    case Variant::BilNoAux: return "bil-noaux";
    case Variant::Bil: return "bil";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  for (Variant v : kAllVariants)
    if (name == variant_name(v)) return v;
  throw ConfigError("unknown variant '" + name + "' (expected baseline, baseline-nshot, bil-noaux or bil)");
}

std::string variant_label(Variant v, int n_shot) {
  const std::string shots = " (" + std::to_string(n_shot) + "-shot)";
  switch (v) {
    case Variant::Baseline: return "Baseline";
    case Variant::BaselineNShot: return "Baseline" + shots;
    case Variant::BilNoAux: return "BiL w/o Aux" + shots;
    case Variant::Bil: return "BiL" + shots;
  }
  return "?";
}

void gen_data(const ParsedConfig& parsed, std::ostream& log) {
  const ExperimentConfig& c = parsed.config;
  const Paths p{c.out};
  write_text(p.root / "config.txt", serialize_config(c));
  write_text(p.root / "provenance.txt", provenance_report(parsed));
  if (fs::exists(p.data())) fs::remove_all(p.data());
  const tasks::Dataset d = tasks::generate_dataset(c.data, data_seed(c));
  tasks::export_dataset(d, p.data());
  log << "gen-data: " << d.train.size() << " training scenes, " << d.unseen.size() << " unseen scenes -> "
      << p.data().string() << "\n";
}

void pretrain_stage(const ExperimentConfig& c, std::ostream& log) {
  const Paths p{c.out};
  const tasks::Dataset d = load_data(c);
  train::BiLevelState s =
      fs::exists(p.pretrain_ckpt()) ? resume_state(p.pretrain_ckpt(), c) : train::init_state(c.train, c.seed);
  const auto target = static_cast<std::uint64_t>(c.train.pretrain_iters);
  if (s.pretrain_step >= target && fs::exists(p.pretrain_ckpt())) {
    log << "pretrain: checkpoint already at step " << s.pretrain_step << "\n";
    return;
  }
  if (s.pretrain_step > 0) log << "pretrain: resuming at step " << s.pretrain_step << "\n";
  prepare_log(p.log("pretrain"), s.pretrain_step);
  {
    TrainLog tl(p.log("pretrain"), log, s.pretrain_step, target);
    train::pretrain(s, d.train, static_cast<int>(target - s.pretrain_step), std::ref(tl));
  }
  save_checkpoint(p.pretrain_ckpt(), c, s);
  log << "pretrain: wrote " << p.pretrain_ckpt().string() << "\n";
}

void metatrain_stage(const ExperimentConfig& c, std::ostream& log) {
  const Paths p{c.out};
  train::BiLevelState pre = completed_pretrain(c);
  const tasks::Dataset d = load_data(c);
  train::BiLevelState s = std::move(pre);
  if (fs::exists(p.metatrain_ckpt())) {
    train::BiLevelState prior = resume_state(p.metatrain_ckpt(), c);
    // Only resume a run that started from this pretraining checkpoint.
    if (prior.pretrain_step == s.pretrain_step && prior.pre_g == s.pre_g && prior.pre_d == s.pre_d)
      s = std::move(prior);
    else
      log << "metatrain: existing checkpoint came from another pretraining run; starting over\n";
  }
  const auto target = static_cast<std::uint64_t>(c.train.metatrain_iters);
  if (s.metatrain_step >= target && fs::exists(p.metatrain_ckpt())) {
    log << "metatrain: checkpoint already at step " << s.metatrain_step << "\n";
    return;
  }
  if (s.metatrain_step > 0) log << "metatrain: resuming at step " << s.metatrain_step << "\n";
  prepare_log(p.log("metatrain"), s.metatrain_step);
  {
    TrainLog tl(p.log("metatrain"), log, s.metatrain_step, target);
    train::metatrain(s, d.train, static_cast<int>(target - s.metatrain_step), std::ref(tl));
  }
  save_checkpoint(p.metatrain_ckpt(), c, s);
  log << "metatrain: wrote " << p.metatrain_ckpt().string() << "\n";
}

metrics::MetricReport adapt_stage(const ExperimentConfig& c, Variant variant, std::ostream& log) {
  const Paths p{c.out};
  const bool bil = variant == Variant::BilNoAux || variant == Variant::Bil;
  train::BiLevelState s = bil ? completed_metatrain(c) : completed_pretrain(c);
  const tasks::Dataset d = load_data(c);
  const std::vector<tasks::TaskEpisode> eps = unseen_episodes(d, c.train.n_shot);

  // Scenes run in parallel; each adaptation is then single-threaded.
  train::BiLevelState local = s;
  local.config.jobs = 1;
  std::vector<train::AdaptResult> results(eps.size());
  train::parallel_for(eps.size(), c.train.jobs, [&](std::size_t i) {
    const tasks::TaskEpisode& ep = eps[i];
    train::AdaptResult& r = results[i];
    switch (variant) {
      case Variant::Baseline:
        r.is = local.gp;
        break;
      case Variant::BaselineNShot:
        r.is = train::inner_adapt(local.config, local.phi, local.gp, ep.train,
                                  derive_seed(local.seed, "adapt", ep.scene.id), train::MetaMode::FirstOrder);
        break;
      case Variant::BilNoAux:
      case Variant::Bil:
        r = train::test_adapt(local, ep, d.train, c.train.aux_k, variant == Variant::Bil);
        return;
    }
    r.predictions = train::predict(local.config, r.is.g, ep.test);
  });

  const fs::path dir = p.adapt(variant);
  if (fs::exists(dir)) fs::remove_all(dir);
  fs::create_directories(dir);
  std::vector<metrics::SampleMetrics> rows;
  std::string aux = "scene_id,rank,aux_scene_id,score\n";
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const tasks::TaskEpisode& ep = eps[i];
    for (std::size_t k = 0; k < ep.test.size(); ++k) {
      const ad::Tensor& pred = results[i].predictions[k];
      if (!pred.all_finite()) throw NumericError("adapt: non-finite prediction for scene " + std::to_string(ep.scene.id));
      tasks::write_ppm(dir / ("scene" + std::to_string(ep.scene.id) + "_test" + std::to_string(k) + ".ppm"), pred);
      rows.push_back(metrics::measure(s.phi, ep.scene.id, static_cast<int>(k), pred, ep.test[k].y));
    }
    for (std::size_t r = 0; r < results[i].aux.size(); ++r)
      aux += std::to_string(ep.scene.id) + "," + std::to_string(r + 1) + "," +
             std::to_string(results[i].aux[r].scene_id) + "," + num(results[i].aux[r].score) + "\n";
  }
  const metrics::MetricReport report = metrics::summarize(s.phi.seed(), std::move(rows));
  metrics::write_csv(dir / "metrics.csv", report);
  write_text(dir / "summary.json", metrics::summary_json(report) + "\n");
  if (variant == Variant::Bil) write_text(dir / "aux.csv", aux);
  log << "adapt " << variant_name(variant) << ": " << report.count() << " test images, mse "
      << short_num(report.mean_mse) << ", ssim " << short_num(report.mean_ssim) << "\n";
  return report;
}

std::vector<std::pair<Variant, metrics::MetricReport>> eval_stage(const ExperimentConfig& c, std::ostream& log) {
  const Paths p{c.out};
  const std::uint64_t phi_seed = derive_seed(c.seed, "phi");
  std::vector<std::pair<Variant, metrics::MetricReport>> reports;
  for (Variant v : kAllVariants) {
    const fs::path csv = p.adapt(v) / "metrics.csv";
    if (fs::exists(csv)) reports.emplace_back(v, metrics::read_csv(csv, phi_seed));
  }
  if (reports.empty()) throw MissingPrerequisite("no adaptation results under " + (p.root / "adapt").string() + "; run adapt first");
  std::vector<const metrics::MetricReport*> ptrs;
  for (const auto& [v, r] : reports) ptrs.push_back(&r);
  metrics::require_comparable(ptrs);

  const int n = c.train.n_shot;
  std::string csv = "variant,label,samples,mse,psnr,ssim,proxy_lpips\n";
  std::string md = "| Method | MSE | PSNR | SSIM | Proxy LPIPS |\n|---|---|---|---|---|\n";
  nlohmann::json summary;
  summary["seed"] = c.seed;
  summary["n_shot"] = n;
  for (const auto& [v, r] : reports) {
    csv += report_row(v, n, r);
    char line[256];
    std::snprintf(line, sizeof line, "| %s | %.5f | %.3f | %.4f | %.5f |\n", variant_label(v, n).c_str(), r.mean_mse,
                  r.mean_psnr, r.mean_ssim, r.mean_proxy_lpips);
    md += line;
    summary["variants"][variant_name(v)] = nlohmann::json::parse(metrics::summary_json(r));
  }
  write_text(p.report() / "comparison.csv", csv);
  write_text(p.report() / "comparison.md", md);
  write_text(p.report() / "summary.json", summary.dump(2) + "\n");
  log << md;
  return reports;
}

void retrieve_stage(const ExperimentConfig& c, const std::optional<fs::path>& query, std::ostream& log) {
  const Paths p{c.out};
  const tasks::Dataset d = load_data(c);
  const std::vector<tasks::RetrievalKey> keys = tasks::retrieval_keys(d);
  std::string csv = "query,rank,scene_id,score\n";
  const auto emit = [&](const std::string& name, const tasks::SegMap& q) {
    const auto hits = tasks::retrieve_topk(q, keys, c.train.aux_k);
    log << "query " << name << "\n";
    for (std::size_t r = 0; r < hits.size(); ++r) {
      log << "  " << r + 1 << " " << hits[r].scene_id << " " << short_num(hits[r].score) << "\n";
      csv += name + "," + std::to_string(r + 1) + "," + std::to_string(hits[r].scene_id) + "," + num(hits[r].score) + "\n";
    }
  };
  if (query) {
    if (!fs::exists(*query)) throw MissingPrerequisite("query map " + query->string() + " does not exist");
    emit(query->filename().string(), tasks::read_pgm(*query, c.train.net.classes));
  } else {
    for (const auto& ep : d.unseen) emit("unseen" + std::to_string(ep.scene.id), ep.train.front().x_s);
  }
  write_text(p.retrieval(), csv);
}

void full_run(const ParsedConfig& parsed, std::ostream& log) {
  const ExperimentConfig& c = parsed.config;
  gen_data(parsed, log);
  pretrain_stage(c, log);
  metatrain_stage(c, log);
  for (Variant v : kAllVariants) adapt_stage(c, v, log);
  eval_stage(c, log);
}

int run_command(const std::string& subcommand, const ParsedConfig& parsed, const CommandOptions& options,
                std::ostream& log, std::ostream& err) {
  const ExperimentConfig& c = parsed.config;
  try {
    try {
      c.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (subcommand == "gen-data")
      gen_data(parsed, log);
    else if (subcommand == "pretrain")
      pretrain_stage(c, log);
    else if (subcommand == "metatrain")
      metatrain_stage(c, log);
    else if (subcommand == "adapt")
      adapt_stage(c, options.variant.value_or(c.aux ? Variant::Bil : Variant::BilNoAux), log);
    else if (subcommand == "eval")
      eval_stage(c, log);
    else if (subcommand == "retrieve")
      retrieve_stage(c, options.query, log);
    else if (subcommand == "full-run")
      full_run(parsed, log);
    else
      throw ConfigError("unknown subcommand '" + subcommand + "'");
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const MissingPrerequisite& e) {
    err << "error: " << e.what() << "\n";
    return kExitMissing;
  } catch (const NumericError& e) {
    err << "error: numerical failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace bilevel::cli
