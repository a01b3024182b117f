#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "bilevel/checkpoint.hpp"
#include "bilevel/config.hpp"
#include "bilevel/metrics.hpp"

namespace bilevel::cli {

// Output directory layout:
//   config.txt, provenance.txt
//   data/                        exported dataset
//   checkpoints/pretrain.ckpt, checkpoints/metatrain.ckpt
//   logs/pretrain.csv, logs/metatrain.csv
//   adapt/<variant>/             predictions (P6), metrics.csv, summary.json
//   report/comparison.csv, report/comparison.md, report/summary.json
//   retrieval.csv

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitMissing = 3,
  kExitNumeric = 4,
};

/// A stage ran before the artifacts it reads exist. The message names the
/// command that produces them.
class MissingPrerequisite : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Variant {
  Baseline,       // pretrained GP, no adaptation
  BaselineNShot,  // pretrained GP, Adam fine-tuned on the n shots
  BilNoAux,       // metatrained GP through test_adapt without retrieval
  Bil,            // metatrained GP through test_adapt with retrieval
};

inline constexpr Variant kAllVariants[] = {Variant::Baseline, Variant::BaselineNShot, Variant::BilNoAux, Variant::Bil};

/// Directory name: baseline, baseline-nshot, bil-noaux, bil.
const char* variant_name(Variant v);
Variant parse_variant(const std::string& name);
/// Comparison table row label, e.g. "Baseline (5-shot)".
std::string variant_label(Variant v, int n_shot);

struct Paths {
  std::filesystem::path root;

  std::filesystem::path data() const { return root / "data"; }
  std::filesystem::path pretrain_ckpt() const { return root / "checkpoints" / "pretrain.ckpt"; }
  std::filesystem::path metatrain_ckpt() const { return root / "checkpoints" / "metatrain.ckpt"; }
  std::filesystem::path log(const std::string& phase) const { return root / "logs" / (phase + ".csv"); }
  std::filesystem::path adapt(Variant v) const { return root / "adapt" / variant_name(v); }
  std::filesystem::path report() const { return root / "report"; }
  std::filesystem::path retrieval() const { return root / "retrieval.csv"; }
};

/// Stages. Each is a pure function of the config and the artifacts it reads;
/// progress goes to log. Training stages resume from their own checkpoint.
void gen_data(const ParsedConfig& parsed, std::ostream& log);
void pretrain_stage(const ExperimentConfig& config, std::ostream& log);
void metatrain_stage(const ExperimentConfig& config, std::ostream& log);
metrics::MetricReport adapt_stage(const ExperimentConfig& config, Variant variant, std::ostream& log);
/// Builds the comparison from every variant whose metrics exist.
std::vector<std::pair<Variant, metrics::MetricReport>> eval_stage(const ExperimentConfig& config, std::ostream& log);
/// Top-k training scenes for query, or for each unseen scene's first
/// adaptation sample when query is empty. Prints `rank scene_id score` lines.
void retrieve_stage(const ExperimentConfig& config, const std::optional<std::filesystem::path>& query,
                    std::ostream& log);
/// gen-data, pretrain, metatrain, adapt for all four variants, eval.
void full_run(const ParsedConfig& parsed, std::ostream& log);

struct CommandOptions {
  std::optional<Variant> variant;                // adapt; defaults from the aux key
  std::optional<std::filesystem::path> query;    // retrieve
};

/// Runs one subcommand and maps failures to exit codes. Errors go to err.
int run_command(const std::string& subcommand, const ParsedConfig& parsed, const CommandOptions& options,
                std::ostream& log, std::ostream& err);

}  // namespace bilevel::cli
