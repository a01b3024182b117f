#include "bilevel/metrics.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "bilevel/autodiff.hpp"

namespace bilevel::metrics {
namespace {

// Drops a leading unit batch axis; the result is [3,H,W].
const ad::Tensor& as_image(const ad::Tensor& img, ad::Tensor& storage) {
  if (img.rank() == 4 && img.dim(0) == 1) {
    storage = img.reshaped({img.dim(1), img.dim(2), img.dim(3)});
    return storage;
  }
  if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("metrics: expected [3,H,W] image, got " + ad::shape_str(img.shape()));
  return img;
}

void require_same(const ad::Tensor& a, const ad::Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("metrics: shape mismatch " + ad::shape_str(a.shape()) + " vs " + ad::shape_str(b.shape()));
}

ad::Tensor batched(const ad::Tensor& img) {
  ad::Tensor storage;
  const ad::Tensor& x = as_image(img, storage);
  return x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)});
}

std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& s) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || end != s.data() + s.size()) throw std::runtime_error("metrics csv: bad number '" + s + "'");
  return v;
}

}  // namespace

double mse(const ad::Tensor& pred, const ad::Tensor& truth) {
  ad::Tensor sa, sb;
  const ad::Tensor& a = as_image(pred, sa);
  const ad::Tensor& b = as_image(truth, sb);
  require_same(a, b);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = (a[i] + 1) / 2 - (b[i] + 1) / 2;
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

double psnr_from_mse(double m) {
  if (m < 0.0 || !std::isfinite(m)) throw std::invalid_argument("psnr: mse must be finite and >= 0");
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / m);
}

double psnr(const ad::Tensor& pred, const ad::Tensor& truth) { return psnr_from_mse(mse(pred, truth)); }

ad::Tensor luma(const ad::Tensor& img) {
  ad::Tensor storage;
  const ad::Tensor& x = as_image(img, storage);
  const std::size_t h = x.dim(1), w = x.dim(2), plane = h * w;
  ad::Tensor out({h, w});
  for (std::size_t p = 0; p < plane; ++p) {
    const double r = 0.5 * (x[p] + 1.0), g = 0.5 * (x[plane + p] + 1.0), b = 0.5 * (x[2 * plane + p] + 1.0);
    out[p] = 0.299 * r + 0.587 * g + 0.114 * b;
  }
  return out;
}

std::vector<double> ssim_window() {
  std::vector<double> w(kSsimWindow * kSsimWindow);
  const int r = kSsimWindow / 2;
  double total = 0.0;
  for (int i = 0; i < kSsimWindow; ++i)
    for (int j = 0; j < kSsimWindow; ++j) {
      const double d2 = static_cast<double>((i - r) * (i - r) + (j - r) * (j - r));
      total += w[static_cast<std::size_t>(i * kSsimWindow + j)] = std::exp(-d2 / (2.0 * kSsimSigma * kSsimSigma));
    }
  for (double& v : w) v /= total;
  return w;
}

double ssim(const ad::Tensor& pred, const ad::Tensor& truth) {
  ad::Tensor sa, sb;
  require_same(as_image(pred, sa), as_image(truth, sb));
  const ad::Tensor x = luma(pred), y = luma(truth);
  const std::size_t h = x.dim(0), w = x.dim(1), k = kSsimWindow;
  if (h < k || w < k) throw std::invalid_argument("ssim: image smaller than the 7x7 window");
  const std::vector<double> g = ssim_window();

  double total = 0.0;
  for (std::size_t i = 0; i + k <= h; ++i)
    for (std::size_t j = 0; j + k <= w; ++j) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (std::size_t a = 0; a < k; ++a)
        for (std::size_t b = 0; b < k; ++b) {
          const double wt = g[a * k + b];
          const double u = x[(i + a) * w + j + b], v = y[(i + a) * w + j + b];
          mx += wt * u;
          my += wt * v;
          sxx += wt * u * u;
          syy += wt * v * v;
          sxy += wt * u * v;
        }
      const double vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
      total += ((2 * mx * my + kSsimC1) * (2 * cxy + kSsimC2)) /
               ((mx * mx + my * my + kSsimC1) * (vx + vy + kSsimC2));
    }
  return total / static_cast<double>((h - k + 1) * (w - k + 1));
}

double proxy_lpips(const losses::FeatureExtractor& phi, const ad::Tensor& pred, const ad::Tensor& truth) {
  ad::Tensor sa, sb;
  require_same(as_image(pred, sa), as_image(truth, sb));
  ad::Tape tape(ad::TapeMode::ValuesOnly);
  return losses::perceptual_loss(phi, tape.constant(batched(pred)), tape.constant(batched(truth))).item();
}

SampleMetrics measure(const losses::FeatureExtractor& phi, std::uint64_t scene_id, int sample_idx,
                      const ad::Tensor& pred, const ad::Tensor& truth) {
  SampleMetrics m;
  m.scene_id = scene_id;
  m.sample_idx = sample_idx;
  m.mse = mse(pred, truth);
  m.psnr = psnr_from_mse(m.mse);
  m.ssim = ssim(pred, truth);
  m.proxy_lpips = proxy_lpips(phi, pred, truth);
  return m;
}

MetricReport summarize(std::uint64_t phi_seed, std::vector<SampleMetrics> samples) {
  MetricReport r;
  r.phi_seed = phi_seed;
  r.samples = std::move(samples);
  if (r.samples.empty()) return r;
  double finite_psnr = 0.0;
  for (const auto& s : r.samples) {
    r.mean_mse += s.mse;
    r.mean_ssim += s.ssim;
    r.mean_proxy_lpips += s.proxy_lpips;
    if (std::isinf(s.psnr))
      ++r.psnr_infinite;
    else
      finite_psnr += s.psnr;
  }
  const double n = static_cast<double>(r.samples.size());
  r.mean_mse /= n;
  r.mean_ssim /= n;
  r.mean_proxy_lpips /= n;
  const std::size_t finite = r.samples.size() - r.psnr_infinite;
  r.mean_psnr = finite ? finite_psnr / static_cast<double>(finite) : std::numeric_limits<double>::infinity();
  return r;
}

MetricReport evaluate_suite(const Predictor& predict, std::span<const tasks::TaskEpisode> episodes,
                            const losses::FeatureExtractor& phi) {
  std::vector<SampleMetrics> rows;
  for (const auto& ep : episodes)
    for (std::size_t k = 0; k < ep.test.size(); ++k)
      rows.push_back(measure(phi, ep.scene.id, static_cast<int>(k), predict(ep, ep.test[k]), ep.test[k].y));
  return summarize(phi.seed(), std::move(rows));
}

void require_comparable(std::span<const MetricReport* const> reports) {
  for (const MetricReport* r : reports)
    if (r->phi_seed != reports.front()->phi_seed)
      throw std::invalid_argument("metrics: reports use different feature extractor seeds (" +
                                  std::to_string(reports.front()->phi_seed) + " vs " + std::to_string(r->phi_seed) + ")");
}

void write_csv(const std::filesystem::path& path, const MetricReport& report) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("metrics csv: cannot write " + path.string());
  out << "scene_id,sample_idx,mse,psnr,ssim,proxy_lpips\n";
  for (const auto& s : report.samples)
    out << s.scene_id << ',' << s.sample_idx << ',' << format_double(s.mse) << ',' << format_double(s.psnr) << ','
        << format_double(s.ssim) << ',' << format_double(s.proxy_lpips) << '\n';
  if (!out) throw std::runtime_error("metrics csv: write failed for " + path.string());
}

MetricReport read_csv(const std::filesystem::path& path, std::uint64_t phi_seed) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("metrics csv: cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "scene_id,sample_idx,mse,psnr,ssim,proxy_lpips")
    throw std::runtime_error("metrics csv: bad header in " + path.string());
  std::vector<SampleMetrics> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != 6) throw std::runtime_error("metrics csv:" + std::to_string(lineno) + ": expected 6 columns");
    try {
      SampleMetrics s;
      s.scene_id = std::stoull(cells[0]);
      s.sample_idx = std::stoi(cells[1]);
      s.mse = parse_double(cells[2]);
      s.psnr = parse_double(cells[3]);
      s.ssim = parse_double(cells[4]);
      s.proxy_lpips = parse_double(cells[5]);
      rows.push_back(s);
    } catch (const std::logic_error& e) {
      throw std::runtime_error("metrics csv:" + std::to_string(lineno) + ": " + e.what());
    } catch (const std::runtime_error& e) {
      throw std::runtime_error("metrics csv:" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return summarize(phi_seed, std::move(rows));
}

std::string summary_json(const MetricReport& report) {
  auto num = [](double v) -> nlohmann::json {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
  };
  nlohmann::json j;
  j["phi_seed"] = report.phi_seed;
  j["count"] = report.count();
  j["mean"] = {{"mse", num(report.mean_mse)},
               {"psnr", num(report.mean_psnr)},
               {"ssim", num(report.mean_ssim)},
               {"proxy_lpips", num(report.mean_proxy_lpips)}};
  j["psnr_infinite"] = report.psnr_infinite;
  return j.dump(2);
}

}  // namespace bilevel::metrics
