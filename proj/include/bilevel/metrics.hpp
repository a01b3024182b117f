#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "bilevel/losses.hpp"
#include "bilevel/tasks.hpp"

namespace bilevel::metrics {

// Images are [3,H,W] or [1,3,H,W] with values in [−1,1]. Every metric works on
// the [0,1] scale v ↦ (v+1)/2.

/// Mean squared difference on the [0,1] scale. Throws ShapeError on mismatch.
double mse(const ad::Tensor& pred, const ad::Tensor& truth);

/// 10·log10(1/mse); +∞ when mse is 0.
double psnr_from_mse(double mse);
double psnr(const ad::Tensor& pred, const ad::Tensor& truth);

inline constexpr int kSsimWindow = 7;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

/// Rec. 601 luma [H,W] on the [0,1] scale.
ad::Tensor luma(const ad::Tensor& img);
/// Normalized 7x7 Gaussian weights, row-major.
std::vector<double> ssim_window();
/// Mean local SSIM of the luma over all valid 7x7 windows. Throws
/// std::invalid_argument when either dimension is below the window size.
double ssim(const ad::Tensor& pred, const ad::Tensor& truth);

/// Perceptual distance of the shared feature extractor, evaluated without
/// recording gradients.
double proxy_lpips(const losses::FeatureExtractor& phi, const ad::Tensor& pred, const ad::Tensor& truth);

struct SampleMetrics {
  std::uint64_t scene_id = 0;
  int sample_idx = 0;
  double mse = 0.0;
  double psnr = 0.0;  // +∞ for exact reconstructions
  double ssim = 0.0;
  double proxy_lpips = 0.0;
};

struct MetricReport {
  std::uint64_t phi_seed = 0;
  std::vector<SampleMetrics> samples;
  double mean_mse = 0.0;
  double mean_psnr = 0.0;  // over finite values; +∞ when none is finite
  double mean_ssim = 0.0;
  double mean_proxy_lpips = 0.0;
  std::size_t psnr_infinite = 0;  // samples left out of mean_psnr

  std::size_t count() const { return samples.size(); }
};

SampleMetrics measure(const losses::FeatureExtractor& phi, std::uint64_t scene_id, int sample_idx,
                      const ad::Tensor& pred, const ad::Tensor& truth);

/// Recomputes every mean from the per-sample rows.
MetricReport summarize(std::uint64_t phi_seed, std::vector<SampleMetrics> samples);

using Predictor = std::function<ad::Tensor(const tasks::TaskEpisode&, const tasks::TranslationSample&)>;

/// Metrics of predict on every test sample of every episode.
MetricReport evaluate_suite(const Predictor& predict, std::span<const tasks::TaskEpisode> episodes,
                            const losses::FeatureExtractor& phi);

/// Throws std::invalid_argument unless all reports share one feature extractor.
void require_comparable(std::span<const MetricReport* const> reports);

/// Columns: scene_id, sample_idx, mse, psnr, ssim, proxy_lpips. Values use
/// %.17g so that reading back is exact; +∞ is written as "inf".
void write_csv(const std::filesystem::path& path, const MetricReport& report);
/// Rebuilds the report from a CSV. Throws std::runtime_error on malformed rows.
MetricReport read_csv(const std::filesystem::path& path, std::uint64_t phi_seed);

/// Summary document with means, counts and the feature extractor seed.
std::string summary_json(const MetricReport& report);

}  // namespace bilevel::metrics
