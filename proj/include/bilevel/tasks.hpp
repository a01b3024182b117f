#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bilevel/tensor.hpp"

namespace bilevel::tasks {

/// Per-pixel class indices in [0, classes).
struct SegMap {
  int height = 0;
  int width = 0;
  int classes = 0;
  std::vector<std::uint8_t> data;

  SegMap() = default;
  SegMap(int h, int w, int c, std::uint8_t fill = 0);

  std::uint8_t at(int i, int j) const { return data[static_cast<std::size_t>(i * width + j)]; }
  std::uint8_t& at(int i, int j) { return data[static_cast<std::size_t>(i * width + j)]; }
  /// Pixel count per class.
  std::vector<std::size_t> histogram() const;
  /// Throws std::invalid_argument if a pixel is out of range or sizes disagree.
  void validate() const;

  friend bool operator==(const SegMap&, const SegMap&) = default;
};

/// One-hot encoding [classes, H, W].
ad::Tensor one_hot(const SegMap& seg);

using Color = std::array<double, 3>;

struct SceneSpec {
  std::uint64_t id = 0;
  int classes = 5;
  std::vector<Color> palette;  // one color per class, components in [−0.65, 0.65]
  double freq = 1.0;           // shading cycles across the image width
  double angle = 0.0;          // shading direction, radians
  double phase = 0.0;
  double amp = 0.1;            // ≤ 0.3
  std::uint64_t layout_seed = 0;  // prototype arrangement of shapes
  std::optional<int> cluster;

  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

/// Shared appearance and layout of a cluster of related scenes.
struct ClusterSpec {
  int id = 0;
  std::vector<Color> centroid;
  double freq = 1.0;
  double angle = 0.0;
  std::uint64_t layout_seed = 0;
};

struct TaskConfig {
  int height = 32;
  int width = 32;
  int classes = 5;
  bool with_reference = true;  // pg2 samples carry x_r
  bool allow_flip = true;
  int crop_max = 4;
  double rotate_max_deg = 10.0;
  double palette_min_dist = 0.2;
  double cluster_spread = 0.06;  // std of per-scene palette offsets from the cluster centroid
  double layout_jitter = 0.12;   // fraction of image size

  void validate() const;

  friend bool operator==(const TaskConfig&, const TaskConfig&) = default;
};

/// Minimum pairwise L∞ distance between palette colors.
double palette_min_distance(const std::vector<Color>& palette);

ClusterSpec make_cluster(std::uint64_t seed, int id, const TaskConfig& config);
SceneSpec synth_scene(std::uint64_t seed, const TaskConfig& config, const ClusterSpec* cluster = nullptr);

struct TranslationSample {
  SegMap x_s;
  std::optional<ad::Tensor> x_r;  // [3,H,W]
  ad::Tensor y;                   // [3,H,W]
  std::uint64_t layout_seed = 0;
};

/// Structure map for (scene, layout_seed): 2–5 rectangles or ellipses from the
/// scene's prototype, jittered by layout_seed, over background class 0.
SegMap render_layout(const SceneSpec& scene, std::uint64_t layout_seed, const TaskConfig& config);
/// Target image: palette color of each pixel's class plus scene shading.
ad::Tensor render_image(const SceneSpec& scene, const SegMap& seg);
TranslationSample render(const SceneSpec& scene, std::uint64_t layout_seed, const TaskConfig& config);

struct AugmentParams {
  bool flip = false;
  int crop = 0;  // pixels removed per dimension; re-padded by edge replication
  int crop_y = 0;
  int crop_x = 0;
  double angle_deg = 0.0;

  bool identity() const { return !flip && crop == 0 && angle_deg == 0.0; }
};

AugmentParams draw_augment(std::uint64_t seed, const TaskConfig& config);

/// Same geometric transform on both: img [3,H,W] bilinear, seg nearest.
std::pair<ad::Tensor, SegMap> apply_augment(const ad::Tensor& img, const SegMap& seg, const AugmentParams& params);
std::pair<ad::Tensor, SegMap> augment(const ad::Tensor& img, const SegMap& seg, std::uint64_t seed,
                                      const TaskConfig& config);

struct TaskEpisode {
  SceneSpec scene;
  std::vector<TranslationSample> train;
  std::vector<TranslationSample> test;
};

/// Fresh renders: n_shot training and n_test test samples with disjoint
/// layout seeds.
TaskEpisode sample_episode(const SceneSpec& scene, int n_shot, int n_test, std::uint64_t seed,
                           const TaskConfig& config);

/// Whether every sample re-renders identically from the episode's scene.
bool verify_episode(const TaskEpisode& episode, const TaskConfig& config);

/// Σ_c |{a=c} ∩ {b=c}| / |{a=c} ∪ {b=c}|; classes absent from both contribute 0.
double similarity(const SegMap& a, const SegMap& b);

struct RetrievalHit {
  std::size_t index;
  std::uint64_t scene_id;
  double score;
};

struct RetrievalKey {
  std::uint64_t scene_id;
  const SegMap* seg;
};

/// The k highest scores, ties broken by ascending scene id. k ∈ [1, keys.size()].
std::vector<RetrievalHit> retrieve_topk(const SegMap& query, std::span<const RetrievalKey> keys, int k);
/// Keys are each episode's first training sample.
std::vector<RetrievalHit> retrieve_topk(const SegMap& query, std::span<const TaskEpisode> pool, int k);

// NetPBM persistence. Images map [−1,1] to [0,255].

void write_pgm(const std::filesystem::path& path, const SegMap& seg);
SegMap read_pgm(const std::filesystem::path& path, int classes);
void write_ppm(const std::filesystem::path& path, const ad::Tensor& img);
ad::Tensor read_ppm(const std::filesystem::path& path);
std::uint8_t to_byte(double v);
double from_byte(std::uint8_t b);

}  // namespace bilevel::tasks
