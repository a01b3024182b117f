#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "bilevel/bilevel.hpp"
#include "bilevel/dataset.hpp"

namespace bilevel::cli {

/// Everything one experiment depends on. Image size, class count and mode are
/// single keys shared by the network and the task renderer.
struct ExperimentConfig {
  train::TrainConfig train;
  tasks::DatasetConfig data;
  std::uint64_t seed = 0;
  std::string out = "run";
  bool aux = true;  // adapt subcommand: retrieval fine-tuning on or off

  /// Throws std::invalid_argument naming the first violated constraint.
  void validate() const;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

/// Parse or validation failure. line is 0 when no input line is involved.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& what, int line = 0);
  int line() const { return line_; }

 private:
  int line_;
};

enum class Source {
  Published,  // default taken from the original method's reported setting
  Repo,       // default chosen for desk-scale runs
  File,
  Flag,
};

struct Provenance {
  std::string key;
  Source source = Source::Repo;
  int line = 0;  // File only
};

struct ParsedConfig {
  ExperimentConfig config;
  std::vector<Provenance> provenance;  // one entry per key, in key order
};

/// Every key in serialization order.
const std::vector<std::string>& config_keys();

/// Parses `key = value` lines; `#` starts a comment, blank lines are ignored.
/// Unset keys keep their defaults. Throws ConfigError carrying the line of an
/// unknown or repeated key, a malformed value, or, with line 0, a violated
/// invariant of the resulting config.
ParsedConfig parse_config(std::string_view text);

/// Sets one key as if it came from the command line. Does not validate.
void set_key(ParsedConfig& parsed, const std::string& key, const std::string& value);

/// Every key, one per line, doubles in shortest round-trip form.
std::string serialize_config(const ExperimentConfig& config);

/// One line per key with its value and where that value came from. Defaults
/// are marked published or repo; iteration counts list their published scale.
std::string provenance_report(const ParsedConfig& parsed);

/// Keys that may differ between a checkpoint and the config resuming from it:
/// output location, worker count, adaptation options and iteration targets.
bool resumable_from(const ExperimentConfig& checkpoint, const ExperimentConfig& current, std::string* mismatch);

}  // namespace bilevel::cli
