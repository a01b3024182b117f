#include "bilevel/tasks.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <set>
#include <stdexcept>

#include "bilevel/random.hpp"

namespace bilevel::tasks {
namespace {

constexpr double kColorBound = 0.65;
constexpr double kCentroidMinDist = 0.35;

Color random_color(Rng& rng) {
  return {uniform(rng, -kColorBound, kColorBound), uniform(rng, -kColorBound, kColorBound),
          uniform(rng, -kColorBound, kColorBound)};
}

double linf(const Color& a, const Color& b) {
  return std::max({std::fabs(a[0] - b[0]), std::fabs(a[1] - b[1]), std::fabs(a[2] - b[2])});
}

bool far_from_all(const Color& c, const std::vector<Color>& chosen, double min_dist) {
  return std::all_of(chosen.begin(), chosen.end(), [&](const Color& o) { return linf(c, o) >= min_dist; });
}

// Draws colors one by one, each at least min_dist (L∞) from those before.
template <class Draw>
std::vector<Color> draw_palette(Rng& rng, int classes, double min_dist, Draw draw) {
  for (;;) {
    std::vector<Color> palette;
    for (int c = 0; c < classes; ++c) {
      bool placed = false;
      for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
        const Color col = draw(rng, c);
        if (far_from_all(col, palette, min_dist)) {
          palette.push_back(col);
          placed = true;
        }
      }
      if (!placed) break;
    }
    if (static_cast<int>(palette.size()) == classes) return palette;
  }
}

struct Shape2d {
  bool ellipse;
  int cls;
  double cx, cy, rx, ry;
};

std::vector<Shape2d> prototype(std::uint64_t layout_seed, int classes) {
  Rng rng = make_rng(layout_seed, "layout/prototype");
  const std::size_t count = 2 + uniform_index(rng, 4);
  std::vector<Shape2d> shapes;
  for (std::size_t k = 0; k < count; ++k) {
    Shape2d s;
    s.ellipse = uniform_index(rng, 2) == 1;
    s.cls = classes > 1 ? 1 + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(classes - 1))) : 0;
    s.cx = uniform(rng, 0.15, 0.85);
    s.cy = uniform(rng, 0.15, 0.85);
    s.rx = uniform(rng, 0.1, 0.3);
    s.ry = uniform(rng, 0.1, 0.3);
    shapes.push_back(s);
  }
  return shapes;
}

double bilinear(const ad::Tensor& img, std::size_t ch, double y, double x) {
  const int h = static_cast<int>(img.dim(1)), w = static_cast<int>(img.dim(2));
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
  const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = y - y0, fx = x - x0;
  const double* p = img.ptr() + ch * static_cast<std::size_t>(h * w);
  const auto v = [&](int i, int j) { return p[i * w + j]; };
  return (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1));
}

void require_image(const ad::Tensor& img, const char* what) {
  if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError(std::string(what) + ": expected [3,H,W], got " + ad::shape_str(img.shape()));
}

}  // namespace

SegMap::SegMap(int h, int w, int c, std::uint8_t fill)
    : height(h), width(w), classes(c), data(static_cast<std::size_t>(h * w), fill) {}

std::vector<std::size_t> SegMap::histogram() const {
  std::vector<std::size_t> counts(static_cast<std::size_t>(classes), 0);
  for (auto v : data) ++counts[v];
  return counts;
}

void SegMap::validate() const {
  if (height <= 0 || width <= 0 || classes <= 0 || classes > 255) throw std::invalid_argument("SegMap: invalid dimensions");
  if (data.size() != static_cast<std::size_t>(height * width)) throw std::invalid_argument("SegMap: data size mismatch");
  for (auto v : data) {
    if (v >= classes) throw std::invalid_argument("SegMap: class index " + std::to_string(v) + " out of range");
  }
}

ad::Tensor one_hot(const SegMap& seg) {
  const auto h = static_cast<std::size_t>(seg.height), w = static_cast<std::size_t>(seg.width);
  ad::Tensor t({static_cast<std::size_t>(seg.classes), h, w}, 0.0);
  for (std::size_t p = 0; p < h * w; ++p) t[seg.data[p] * h * w + p] = 1.0;
  return t;
}

void TaskConfig::validate() const {
  if (height < 8 || width < 8) throw std::invalid_argument("TaskConfig: images must be at least 8x8");
  if (classes < 2 || classes > 16) throw std::invalid_argument("TaskConfig: classes must be in [2, 16]");
  if (crop_max < 0 || crop_max >= std::min(height, width) / 2) throw std::invalid_argument("TaskConfig: crop_max out of range");
  if (!(rotate_max_deg >= 0.0 && rotate_max_deg <= 45.0)) throw std::invalid_argument("TaskConfig: rotate_max_deg out of range");
  if (!(palette_min_dist > 0.0 && palette_min_dist <= 0.3)) throw std::invalid_argument("TaskConfig: palette_min_dist out of range");
  if (!(cluster_spread >= 0.0) || !(layout_jitter >= 0.0)) throw std::invalid_argument("TaskConfig: negative spread");
}

double palette_min_distance(const std::vector<Color>& palette) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < palette.size(); ++i)
    for (std::size_t j = i + 1; j < palette.size(); ++j) best = std::min(best, linf(palette[i], palette[j]));
  return best;
}

ClusterSpec make_cluster(std::uint64_t seed, int id, const TaskConfig& config) {
  Rng rng = make_rng(seed, "cluster", static_cast<std::uint64_t>(id));
  ClusterSpec c;
  c.id = id;
  c.centroid = draw_palette(rng, config.classes, kCentroidMinDist, [](Rng& r, int) { return random_color(r); });
  c.freq = uniform(rng, 1.0, 3.0);
  c.angle = uniform(rng, 0.0, std::numbers::pi);
  c.layout_seed = rng();
  return c;
}

SceneSpec synth_scene(std::uint64_t seed, const TaskConfig& config, const ClusterSpec* cluster) {
  Rng rng = make_rng(seed, "scene");
  SceneSpec s;
  s.id = seed;
  s.classes = config.classes;
  if (cluster != nullptr) {
    std::normal_distribution<double> noise(0.0, config.cluster_spread);
    s.palette = draw_palette(rng, config.classes, config.palette_min_dist, [&](Rng& r, int c) {
      Color col = cluster->centroid[static_cast<std::size_t>(c)];
      for (double& v : col) v = std::clamp(v + noise(r), -kColorBound, kColorBound);
      return col;
    });
    s.freq = cluster->freq * uniform(rng, 0.9, 1.1);
    s.angle = cluster->angle + uniform(rng, -0.1, 0.1);
    s.layout_seed = cluster->layout_seed;
    s.cluster = cluster->id;
  } else {
    s.palette = draw_palette(rng, config.classes, config.palette_min_dist, [](Rng& r, int) { return random_color(r); });
    s.freq = uniform(rng, 1.0, 3.0);
    s.angle = uniform(rng, 0.0, std::numbers::pi);
    s.layout_seed = rng();
  }
  s.phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  s.amp = uniform(rng, 0.05, 0.3);
  return s;
}

SegMap render_layout(const SceneSpec& scene, std::uint64_t layout_seed, const TaskConfig& config) {
  SegMap seg(config.height, config.width, scene.classes, 0);
  Rng rng = make_rng(layout_seed, "layout/jitter");
  for (Shape2d s : prototype(scene.layout_seed, scene.classes)) {
    s.cx += uniform(rng, -config.layout_jitter, config.layout_jitter);
    s.cy += uniform(rng, -config.layout_jitter, config.layout_jitter);
    s.rx *= uniform(rng, 0.8, 1.25);
    s.ry *= uniform(rng, 0.8, 1.25);
    for (int i = 0; i < config.height; ++i) {
      const double y = (i + 0.5) / config.height;
      for (int j = 0; j < config.width; ++j) {
        const double x = (j + 0.5) / config.width;
        const double dx = (x - s.cx) / s.rx, dy = (y - s.cy) / s.ry;
        const bool inside = s.ellipse ? dx * dx + dy * dy <= 1.0 : std::fabs(dx) <= 1.0 && std::fabs(dy) <= 1.0;
        if (inside) seg.at(i, j) = static_cast<std::uint8_t>(s.cls);
      }
    }
  }
  return seg;
}

ad::Tensor render_image(const SceneSpec& scene, const SegMap& seg) {
  const auto h = static_cast<std::size_t>(seg.height), w = static_cast<std::size_t>(seg.width);
  ad::Tensor y({3, h, w});
  const double ca = std::cos(scene.angle), sa = std::sin(scene.angle);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double shade = scene.amp * std::sin(2.0 * std::numbers::pi * scene.freq *
                                                    (ca * static_cast<double>(j) + sa * static_cast<double>(i)) /
                                                    static_cast<double>(w) +
                                                scene.phase);
      const Color& col = scene.palette[seg.data[i * w + j]];
      for (std::size_t c = 0; c < 3; ++c) y[(c * h + i) * w + j] = col[c] + shade;
    }
  return y;
}

TranslationSample render(const SceneSpec& scene, std::uint64_t layout_seed, const TaskConfig& config) {
  TranslationSample s;
  s.layout_seed = layout_seed;
  s.x_s = render_layout(scene, layout_seed, config);
  s.y = render_image(scene, s.x_s);
  if (config.with_reference) s.x_r = augment(s.y, s.x_s, derive_seed(layout_seed, "reference"), config).first;
  return s;
}

AugmentParams draw_augment(std::uint64_t seed, const TaskConfig& config) {
  Rng rng = make_rng(seed, "augment");
  AugmentParams p;
  p.flip = uniform_index(rng, 2) == 1 && config.allow_flip;
  p.crop = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(config.crop_max) + 1));
  p.crop_y = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(p.crop) + 1));
  p.crop_x = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(p.crop) + 1));
  p.angle_deg = uniform(rng, -config.rotate_max_deg, config.rotate_max_deg);
  return p;
}

std::pair<ad::Tensor, SegMap> apply_augment(const ad::Tensor& img, const SegMap& seg, const AugmentParams& p) {
  require_image(img, "apply_augment");
  if (img.dim(1) != static_cast<std::size_t>(seg.height) || img.dim(2) != static_cast<std::size_t>(seg.width)) {
    throw ShapeError("apply_augment: image and structure map sizes differ");
  }
  const int h = seg.height, w = seg.width;
  if (p.crop < 0 || p.crop >= std::min(h, w) || p.crop_y < 0 || p.crop_y > p.crop || p.crop_x < 0 || p.crop_x > p.crop) {
    throw std::invalid_argument("apply_augment: crop out of range");
  }
  ad::Tensor out(img.shape());
  SegMap seg_out(h, w, seg.classes);
  const double theta = p.angle_deg * std::numbers::pi / 180.0;
  const double ct = std::cos(theta), st = std::sin(theta);
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  const int pad = p.crop / 2;
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      // crop window re-padded by edge replication
      double y = p.crop_y + std::clamp(i - pad, 0, h - p.crop - 1);
      double x = p.crop_x + std::clamp(j - pad, 0, w - p.crop - 1);
      if (p.angle_deg != 0.0) {
        const double dy = y - cy, dx = x - cx;
        y = cy + ct * dy - st * dx;
        x = cx + st * dy + ct * dx;
      }
      if (p.flip) x = (w - 1) - x;
      for (std::size_t c = 0; c < 3; ++c) out[(c * h + i) * w + j] = bilinear(img, c, y, x);
      const int si = std::clamp(static_cast<int>(std::lround(y)), 0, h - 1);
      const int sj = std::clamp(static_cast<int>(std::lround(x)), 0, w - 1);
      seg_out.at(i, j) = seg.at(si, sj);
    }
  return {std::move(out), std::move(seg_out)};
}

std::pair<ad::Tensor, SegMap> augment(const ad::Tensor& img, const SegMap& seg, std::uint64_t seed,
                                      const TaskConfig& config) {
  return apply_augment(img, seg, draw_augment(seed, config));
}

TaskEpisode sample_episode(const SceneSpec& scene, int n_shot, int n_test, std::uint64_t seed,
                           const TaskConfig& config) {
  if (n_shot < 1 || n_test < 1) throw std::invalid_argument("sample_episode: n_shot and n_test must be positive");
  TaskEpisode ep;
  ep.scene = scene;
  std::set<std::uint64_t> used;
  const auto fresh = [&](const char* split, int k) {
    for (std::uint64_t salt = 0;; ++salt) {
      const std::uint64_t s = derive_seed(seed, split, static_cast<std::uint64_t>(k), salt);
      if (used.insert(s).second) return s;
    }
  };
  for (int k = 0; k < n_shot; ++k) ep.train.push_back(render(scene, fresh("episode/train", k), config));
  for (int k = 0; k < n_test; ++k) ep.test.push_back(render(scene, fresh("episode/test", k), config));
  return ep;
}

bool verify_episode(const TaskEpisode& episode, const TaskConfig& config) {
  const auto same = [&](const TranslationSample& s) {
    const TranslationSample r = render(episode.scene, s.layout_seed, config);
    return r.x_s == s.x_s && r.y == s.y && r.x_r == s.x_r;
  };
  return std::all_of(episode.train.begin(), episode.train.end(), same) &&
         std::all_of(episode.test.begin(), episode.test.end(), same);
}

double similarity(const SegMap& a, const SegMap& b) {
  if (a.height != b.height || a.width != b.width) {
    throw std::invalid_argument("similarity: map sizes differ (" + std::to_string(a.height) + "x" +
                                std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                                std::to_string(b.width) + ")");
  }
  if (a.classes != b.classes) throw std::invalid_argument("similarity: class counts differ");
  const auto c = static_cast<std::size_t>(a.classes);
  std::vector<std::size_t> inter(c, 0), count_a(c, 0), count_b(c, 0);
  for (std::size_t p = 0; p < a.data.size(); ++p) {
    ++count_a[a.data[p]];
    ++count_b[b.data[p]];
    if (a.data[p] == b.data[p]) ++inter[a.data[p]];
  }
  double score = 0.0;
  for (std::size_t k = 0; k < c; ++k) {
    const std::size_t uni = count_a[k] + count_b[k] - inter[k];
    if (uni > 0) score += static_cast<double>(inter[k]) / static_cast<double>(uni);
  }
  return score;
}

std::vector<RetrievalHit> retrieve_topk(const SegMap& query, std::span<const RetrievalKey> keys, int k) {
  if (k < 1 || static_cast<std::size_t>(k) > keys.size()) {
    throw std::invalid_argument("retrieve_topk: K must be in [1, " + std::to_string(keys.size()) + "], got " +
                                std::to_string(k));
  }
  std::vector<RetrievalHit> hits;
  hits.reserve(keys.size());
  for (std::size_t i = 0; i < keys.size(); ++i) hits.push_back({i, keys[i].scene_id, similarity(query, *keys[i].seg)});
  const auto better = [](const RetrievalHit& a, const RetrievalHit& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.scene_id != b.scene_id) return a.scene_id < b.scene_id;
    return a.index < b.index;
  };
  std::partial_sort(hits.begin(), hits.begin() + k, hits.end(), better);
  hits.resize(static_cast<std::size_t>(k));
  return hits;
}

std::vector<RetrievalHit> retrieve_topk(const SegMap& query, std::span<const TaskEpisode> pool, int k) {
  std::vector<RetrievalKey> keys;
  for (const auto& ep : pool) {
    if (ep.train.empty()) throw std::invalid_argument("retrieve_topk: task without training samples");
    keys.push_back({ep.scene.id, &ep.train.front().x_s});
  }
  return retrieve_topk(query, keys, k);
}

// NetPBM

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround((v + 1.0) * 127.5), 0L, 255L));
}

double from_byte(std::uint8_t b) { return b / 127.5 - 1.0; }

namespace {

void write_netpbm(const std::filesystem::path& path, const char* magic, int w, int h, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << magic << "\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::vector<std::uint8_t> read_netpbm(const std::filesystem::path& path, const std::string& magic, int channels,
                                      int& w, int& h) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  const auto token = [&]() {
    std::string t;
    for (;;) {
      const int ch = in.get();
      if (ch == EOF) break;
      if (ch == '#') {
        while (in.good() && in.get() != '\n') {
        }
        continue;
      }
      if (std::isspace(ch)) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(static_cast<char>(ch));
    }
    return t;
  };
  if (token() != magic) throw std::runtime_error(path.string() + ": not a " + magic + " file");
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    if (std::stoi(token()) != 255) throw std::runtime_error(path.string() + ": unsupported maxval");
  } catch (const std::logic_error&) {
    throw std::runtime_error(path.string() + ": malformed header");
  }
  if (w <= 0 || h <= 0 || w > 1 << 16 || h > 1 << 16) throw std::runtime_error(path.string() + ": bad dimensions");
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * channels);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw std::runtime_error(path.string() + ": truncated");
  return bytes;
}

}  // namespace

void write_pgm(const std::filesystem::path& path, const SegMap& seg) {
  write_netpbm(path, "P5", seg.width, seg.height, seg.data);
}

SegMap read_pgm(const std::filesystem::path& path, int classes) {
  int w = 0, h = 0;
  SegMap seg;
  seg.data = read_netpbm(path, "P5", 1, w, h);
  seg.height = h;
  seg.width = w;
  seg.classes = classes;
  seg.validate();
  return seg;
}

void write_ppm(const std::filesystem::path& path, const ad::Tensor& img) {
  require_image(img, "write_ppm");
  const std::size_t h = img.dim(1), w = img.dim(2);
  std::vector<std::uint8_t> bytes(3 * h * w);
  for (std::size_t p = 0; p < h * w; ++p)
    for (std::size_t c = 0; c < 3; ++c) bytes[3 * p + c] = to_byte(img[c * h * w + p]);
  write_netpbm(path, "P6", static_cast<int>(w), static_cast<int>(h), bytes);
}

ad::Tensor read_ppm(const std::filesystem::path& path) {
  int w = 0, h = 0;
  const auto bytes = read_netpbm(path, "P6", 3, w, h);
  const auto hh = static_cast<std::size_t>(h), ww = static_cast<std::size_t>(w);
  ad::Tensor img({3, hh, ww});
  for (std::size_t p = 0; p < hh * ww; ++p)
    for (std::size_t c = 0; c < 3; ++c) img[c * hh * ww + p] = from_byte(bytes[3 * p + c]);
  return img;
}

}  // namespace bilevel::tasks
