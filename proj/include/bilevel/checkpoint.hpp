#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "bilevel/bilevel.hpp"
#include "bilevel/config.hpp"

namespace bilevel::cli {

// Layout, all integers little-endian:
//   "BILVLCKP" | u32 version | u64 config length | config text
//   then per array: u32 name length | name | u32 rank | u64 dims[rank] | f64 values
// Arrays, in order: G/*, D/*, phi/*, then m/* and v/* of the Adam states
// pre_g, pre_d, meta_g, meta_d, then the scalar counters.

inline constexpr char kCheckpointMagic[8] = {'B', 'I', 'L', 'V', 'L', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  ExperimentConfig config;
  train::BiLevelState state;
};

std::string encode_checkpoint(const ExperimentConfig& config, const train::BiLevelState& state);
/// Throws CheckpointError on a bad magic or version, truncation, trailing
/// bytes, oversized dimensions, or arrays that do not match the config.
Checkpoint decode_checkpoint(const std::string& bytes);

/// Writes through a temporary file and renames, so a failed save leaves any
/// existing file untouched.
void save_checkpoint(const std::filesystem::path& path, const ExperimentConfig& config,
                     const train::BiLevelState& state);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace bilevel::cli
