#include "bilevel/dataset.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "bilevel/random.hpp"

namespace bilevel::tasks {
namespace {

constexpr const char* kManifestHeader = "bilevel-dataset 1";

std::string exact(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& s) {
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw std::invalid_argument("trailing characters in '" + s + "'");
  return v;
}

std::uint64_t parse_u64(const std::string& s) {
  std::size_t used = 0;
  const auto v = std::stoull(s, &used);
  if (used != s.size()) throw std::invalid_argument("trailing characters in '" + s + "'");
  return v;
}

int parse_int(const std::string& s) {
  std::size_t used = 0;
  const int v = std::stoi(s, &used);
  if (used != s.size()) throw std::invalid_argument("trailing characters in '" + s + "'");
  return v;
}

std::map<std::string, std::string> key_values(std::istringstream& in) {
  std::map<std::string, std::string> kv;
  std::string tok;
  while (in >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("expected key=value, got '" + tok + "'");
    kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return kv;
}

const std::string& need(const std::map<std::string, std::string>& kv, const std::string& key) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw std::invalid_argument("missing field '" + key + "'");
  return it->second;
}

std::string sample_stem(std::uint64_t scene, const char* split, std::size_t index) {
  return "scene" + std::to_string(scene) + "_" + split + std::to_string(index);
}

}  // namespace

void DatasetConfig::validate() const {
  task.validate();
  if (train_scenes < 1 || samples_per_scene < 1) throw std::invalid_argument("DatasetConfig: need training scenes and samples");
  if (unseen_scenes < 0 || unseen_train < 1 || unseen_test < 1) throw std::invalid_argument("DatasetConfig: invalid unseen split sizes");
  if (clusters < 0) throw std::invalid_argument("DatasetConfig: clusters must be >= 0");
}

Dataset generate_dataset(const DatasetConfig& config, std::uint64_t seed) {
  config.validate();
  Dataset data;
  data.config = config;
  data.seed = seed;
  std::vector<ClusterSpec> clusters;
  for (int c = 0; c < config.clusters; ++c) clusters.push_back(make_cluster(seed, c, config.task));
  const auto scene_for = [&](int id) {
    const ClusterSpec* cluster = clusters.empty() ? nullptr : &clusters[static_cast<std::size_t>(id % config.clusters)];
    SceneSpec s = synth_scene(derive_seed(seed, "scene", static_cast<std::uint64_t>(id)), config.task, cluster);
    s.id = static_cast<std::uint64_t>(id);
    return s;
  };
  for (int i = 0; i < config.train_scenes; ++i) {
    SceneData sd;
    sd.scene = scene_for(i);
    for (int k = 0; k < config.samples_per_scene; ++k) {
      sd.samples.push_back(render(sd.scene, derive_seed(seed, "pool", static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(k)),
                                  config.task));
    }
    data.train.push_back(std::move(sd));
  }
  for (int u = 0; u < config.unseen_scenes; ++u) {
    const SceneSpec s = scene_for(config.train_scenes + u);
    data.unseen.push_back(sample_episode(s, config.unseen_train, config.unseen_test,
                                         derive_seed(seed, "unseen", static_cast<std::uint64_t>(u)), config.task));
  }
  return data;
}

void export_dataset(const Dataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const TaskConfig& t = data.config.task;
  std::ostringstream m;
  m << kManifestHeader << "\n";
  m << "seed " << data.seed << "\n";
  m << "task height=" << t.height << " width=" << t.width << " classes=" << t.classes
    << " with_reference=" << t.with_reference << " allow_flip=" << t.allow_flip << " crop_max=" << t.crop_max
    << " rotate_max_deg=" << exact(t.rotate_max_deg) << " palette_min_dist=" << exact(t.palette_min_dist)
    << " cluster_spread=" << exact(t.cluster_spread) << " layout_jitter=" << exact(t.layout_jitter) << "\n";
  const DatasetConfig& c = data.config;
  m << "counts train_scenes=" << c.train_scenes << " samples_per_scene=" << c.samples_per_scene
    << " unseen_scenes=" << c.unseen_scenes << " unseen_train=" << c.unseen_train << " unseen_test=" << c.unseen_test
    << " clusters=" << c.clusters << "\n";

  const auto scene_line = [&](const SceneSpec& s, const char* split) {
    m << "scene " << s.id << " " << split << " cluster=" << (s.cluster ? std::to_string(*s.cluster) : "-")
      << " freq=" << exact(s.freq) << " angle=" << exact(s.angle) << " phase=" << exact(s.phase)
      << " amp=" << exact(s.amp) << " layout=" << s.layout_seed << " palette=";
    for (std::size_t k = 0; k < s.palette.size(); ++k) {
      if (k) m << ";";
      m << exact(s.palette[k][0]) << "," << exact(s.palette[k][1]) << "," << exact(s.palette[k][2]);
    }
    m << "\n";
  };
  const auto sample_line = [&](std::uint64_t scene, const char* split, std::size_t index, const TranslationSample& s) {
    const std::string stem = sample_stem(scene, split, index);
    write_pgm(dir / (stem + "_seg.pgm"), s.x_s);
    write_ppm(dir / (stem + "_y.ppm"), s.y);
    std::string ref = "-";
    if (s.x_r) {
      ref = stem + "_ref.ppm";
      write_ppm(dir / ref, *s.x_r);
    }
    m << "sample " << scene << " " << split << " " << index << " " << s.layout_seed << " " << stem << "_seg.pgm "
      << stem << "_y.ppm " << ref << "\n";
  };

  for (const auto& sd : data.train) {
    scene_line(sd.scene, "train");
    for (std::size_t k = 0; k < sd.samples.size(); ++k) sample_line(sd.scene.id, "pool", k, sd.samples[k]);
  }
  for (const auto& ep : data.unseen) {
    scene_line(ep.scene, "unseen");
    for (std::size_t k = 0; k < ep.train.size(); ++k) sample_line(ep.scene.id, "tr", k, ep.train[k]);
    for (std::size_t k = 0; k < ep.test.size(); ++k) sample_line(ep.scene.id, "te", k, ep.test[k]);
  }
  std::ofstream out(dir / "manifest.txt", std::ios::binary);
  out << m.str();
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.txt").string());
}

Dataset import_dataset(const std::filesystem::path& dir) {
  const auto manifest = dir / "manifest.txt";
  std::ifstream in(manifest);
  if (!in) throw std::runtime_error("cannot read " + manifest.string());
  Dataset data;
  std::string line;
  std::size_t lineno = 0;
  std::map<std::uint64_t, std::size_t> train_index, unseen_index;
  const double tolerance = 0.5 / 127.5 + 1e-9;

  const auto check_sample = [&](const TranslationSample& want, const std::string& seg_path, const std::string& y_path,
                                const std::string& ref_path) {
    if (read_pgm(dir / seg_path, want.x_s.classes) != want.x_s) throw std::runtime_error(seg_path + " does not match its render");
    const auto near = [&](const ad::Tensor& file, const ad::Tensor& exact_img, const std::string& path) {
      if (file.shape() != exact_img.shape()) throw std::runtime_error(path + " has the wrong size");
      for (std::size_t i = 0; i < file.size(); ++i) {
        if (std::fabs(file[i] - exact_img[i]) > tolerance) {
          throw std::runtime_error(path + " does not match its render");
        }
      }
    };
    near(read_ppm(dir / y_path), want.y, y_path);
    if (want.x_r.has_value() != (ref_path != "-")) throw std::runtime_error("reference presence mismatch for " + y_path);
    if (want.x_r) near(read_ppm(dir / ref_path), *want.x_r, ref_path);
  };

  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      std::istringstream ls(line);
      std::string kind;
      ls >> kind;
      if (lineno == 1) {
        if (line != kManifestHeader) throw std::invalid_argument("unsupported manifest header");
        continue;
      }
      if (kind == "seed") {
        std::string v;
        ls >> v;
        data.seed = parse_u64(v);
      } else if (kind == "task") {
        const auto kv = key_values(ls);
        TaskConfig& t = data.config.task;
        t.height = parse_int(need(kv, "height"));
        t.width = parse_int(need(kv, "width"));
        t.classes = parse_int(need(kv, "classes"));
        t.with_reference = parse_int(need(kv, "with_reference")) != 0;
        t.allow_flip = parse_int(need(kv, "allow_flip")) != 0;
        t.crop_max = parse_int(need(kv, "crop_max"));
        t.rotate_max_deg = parse_double(need(kv, "rotate_max_deg"));
        t.palette_min_dist = parse_double(need(kv, "palette_min_dist"));
        t.cluster_spread = parse_double(need(kv, "cluster_spread"));
        t.layout_jitter = parse_double(need(kv, "layout_jitter"));
      } else if (kind == "counts") {
        const auto kv = key_values(ls);
        DatasetConfig& c = data.config;
        c.train_scenes = parse_int(need(kv, "train_scenes"));
        c.samples_per_scene = parse_int(need(kv, "samples_per_scene"));
        c.unseen_scenes = parse_int(need(kv, "unseen_scenes"));
        c.unseen_train = parse_int(need(kv, "unseen_train"));
        c.unseen_test = parse_int(need(kv, "unseen_test"));
        c.clusters = parse_int(need(kv, "clusters"));
        c.validate();
      } else if (kind == "scene") {
        std::string id, split;
        ls >> id >> split;
        const auto kv = key_values(ls);
        SceneSpec s;
        s.id = parse_u64(id);
        s.classes = data.config.task.classes;
        const std::string& cl = need(kv, "cluster");
        if (cl != "-") s.cluster = parse_int(cl);
        s.freq = parse_double(need(kv, "freq"));
        s.angle = parse_double(need(kv, "angle"));
        s.phase = parse_double(need(kv, "phase"));
        s.amp = parse_double(need(kv, "amp"));
        s.layout_seed = parse_u64(need(kv, "layout"));
        std::istringstream ps(need(kv, "palette"));
        std::string color;
        while (std::getline(ps, color, ';')) {
          std::istringstream cs(color);
          std::string comp;
          Color col{};
          for (double& v : col) {
            if (!std::getline(cs, comp, ',')) throw std::invalid_argument("malformed palette");
            v = parse_double(comp);
          }
          s.palette.push_back(col);
        }
        if (static_cast<int>(s.palette.size()) != s.classes) throw std::invalid_argument("palette size differs from class count");
        if (split == "train") {
          train_index[s.id] = data.train.size();
          data.train.push_back({s, {}});
        } else if (split == "unseen") {
          unseen_index[s.id] = data.unseen.size();
          data.unseen.push_back({s, {}, {}});
        } else {
          throw std::invalid_argument("unknown scene split '" + split + "'");
        }
      } else if (kind == "sample") {
        std::string scene, split, index, layout, seg_path, y_path, ref_path;
        ls >> scene >> split >> index >> layout >> seg_path >> y_path >> ref_path;
        if (ref_path.empty()) throw std::invalid_argument("incomplete sample line");
        const std::uint64_t id = parse_u64(scene);
        const std::size_t k = static_cast<std::size_t>(parse_u64(index));
        const auto& cfg = data.config.task;
        std::vector<TranslationSample>* target = nullptr;
        const SceneSpec* spec = nullptr;
        if (split == "pool" && train_index.count(id)) {
          auto& sd = data.train[train_index[id]];
          target = &sd.samples;
          spec = &sd.scene;
        } else if ((split == "tr" || split == "te") && unseen_index.count(id)) {
          auto& ep = data.unseen[unseen_index[id]];
          target = split == "tr" ? &ep.train : &ep.test;
          spec = &ep.scene;
        } else {
          throw std::invalid_argument("sample refers to unknown scene or split");
        }
        if (k != target->size()) throw std::invalid_argument("samples out of order");
        TranslationSample s = render(*spec, parse_u64(layout), cfg);
        check_sample(s, seg_path, y_path, ref_path);
        target->push_back(std::move(s));
      } else {
        throw std::invalid_argument("unknown record '" + kind + "'");
      }
    } catch (const std::logic_error& e) {
      throw std::runtime_error(manifest.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (lineno == 0) throw std::runtime_error(manifest.string() + ": empty manifest");
  if (static_cast<int>(data.train.size()) != data.config.train_scenes ||
      static_cast<int>(data.unseen.size()) != data.config.unseen_scenes) {
    throw std::runtime_error(manifest.string() + ": scene count differs from header");
  }
  return data;
}

std::vector<RetrievalKey> retrieval_keys(const Dataset& data) {
  std::vector<RetrievalKey> keys;
  for (const auto& sd : data.train) keys.push_back({sd.scene.id, &sd.samples.front().x_s});
  return keys;
}

}  // namespace bilevel::tasks
