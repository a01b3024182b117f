#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "bilevel/tasks.hpp"

namespace bilevel::tasks {

struct DatasetConfig {
  TaskConfig task;
  int train_scenes = 100;
  int samples_per_scene = 10;  // fixed pool per training scene
  int unseen_scenes = 20;
  int unseen_train = 5;  // adaptation samples rendered per unseen scene; n-shot uses a prefix
  int unseen_test = 5;
  int clusters = 0;  // 0: every scene independent

  void validate() const;

  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

/// A training scene with its fixed sample pool.
struct SceneData {
  SceneSpec scene;
  std::vector<TranslationSample> samples;
};

struct Dataset {
  DatasetConfig config;
  std::uint64_t seed = 0;
  std::vector<SceneData> train;
  std::vector<TaskEpisode> unseen;
};

/// Scene ids are 0..train_scenes−1 for training scenes and continue for
/// unseen scenes. Scene i belongs to cluster i mod clusters when clustered.
Dataset generate_dataset(const DatasetConfig& config, std::uint64_t seed);

/// Writes manifest.txt plus one P5 structure map and P6 target/reference per
/// sample under dir.
void export_dataset(const Dataset& data, const std::filesystem::path& dir);

/// Reads a dataset written by export_dataset, re-renders every sample from the
/// recorded scene parameters, and checks the files agree within quantization.
/// Throws std::runtime_error on any mismatch or malformed manifest.
Dataset import_dataset(const std::filesystem::path& dir);

/// Retrieval key of each training scene: its first pool sample.
std::vector<RetrievalKey> retrieval_keys(const Dataset& data);

}  // namespace bilevel::tasks
