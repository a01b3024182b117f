#include "bilevel/config.hpp"

#include <algorithm>
#include <charconv>
#include <functional>
#include <map>
#include <sstream>

namespace bilevel::cli {
namespace {

struct Field {
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  Source default_source = Source::Repo;
  std::string published_scale;  // non-empty when the desk default is smaller than the published one
};

std::string format(int v) { return std::to_string(v); }
std::string format(std::uint64_t v) { return std::to_string(v); }
std::string format(bool v) { return v ? "true" : "false"; }
std::string format(const std::string& v) { return v; }
std::string format(double v) {
  char buf[40];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

template <class T>
T parse_number(const std::string& s) {
  T v{};
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || end != s.data() + s.size() || s.empty()) throw std::invalid_argument("'" + s + "' is not a valid number");
  return v;
}

void parse_into(int& dst, const std::string& s) { dst = parse_number<int>(s); }
void parse_into(std::uint64_t& dst, const std::string& s) { dst = parse_number<std::uint64_t>(s); }
void parse_into(double& dst, const std::string& s) { dst = parse_number<double>(s); }
void parse_into(std::string& dst, const std::string& s) {
  if (s.empty()) throw std::invalid_argument("value must not be empty");
  dst = s;
}
void parse_into(bool& dst, const std::string& s) {
  if (s == "true" || s == "on")
    dst = true;
  else if (s == "false" || s == "off")
    dst = false;
  else
    throw std::invalid_argument("'" + s + "' is not a boolean (true|false|on|off)");
}

// ref(config) yields the member for both const and mutable configs.
template <class Ref>
Field field(std::string key, Ref ref, Source source = Source::Repo, std::string published_scale = {}) {
  return Field{std::move(key), [ref](const ExperimentConfig& c) { return format(ref(c)); },
               [ref](ExperimentConfig& c, const std::string& v) { parse_into(ref(c), v); }, source,
               std::move(published_scale)};
}

#define BILEVEL_REF(expr) [](auto& c) -> auto& { return c.expr; }

std::vector<Field> build_fields() {
  std::vector<Field> f;
  f.push_back(field("seed", BILEVEL_REF(seed)));
  f.push_back(field("out", BILEVEL_REF(out)));
  f.push_back(Field{"mode", [](const ExperimentConfig& c) { return std::string(mode_name(c.train.net.mode)); },
                    [](ExperimentConfig& c, const std::string& v) {
                      if (v == "pg2")
                        c.train.net.mode = NetMode::Pg2;
                      else if (v == "pix2pix")
                        c.train.net.mode = NetMode::Pix2pix;
                      else
                        throw std::invalid_argument("mode must be pg2 or pix2pix");
                      c.data.task.with_reference = c.train.net.mode == NetMode::Pg2;
                    },
                    Source::Repo, {}});
  f.push_back(Field{"meta_mode", [](const ExperimentConfig& c) { return std::string(train::meta_mode_name(c.train.meta_mode)); },
                    [](ExperimentConfig& c, const std::string& v) { c.train.meta_mode = train::parse_meta_mode(v); },
                    Source::Repo, {}});
  f.push_back(Field{"arch", [](const ExperimentConfig& c) { return std::string(c.train.net.arch == nets::Arch::UNet ? "unet" : "tiny"); },
                    [](ExperimentConfig& c, const std::string& v) {
                      if (v == "unet")
                        c.train.net.arch = nets::Arch::UNet;
                      else if (v == "tiny")
                        c.train.net.arch = nets::Arch::Tiny;
                      else
                        throw std::invalid_argument("arch must be unet or tiny");
                    },
                    Source::Repo, {}});
  auto shared_int = [](std::string key, int nets::NetConfig::*net, int tasks::TaskConfig::*task) {
    return Field{key, [net](const ExperimentConfig& c) { return format(c.train.net.*net); },
                 [net, task](ExperimentConfig& c, const std::string& v) {
                   parse_into(c.train.net.*net, v);
                   c.data.task.*task = c.train.net.*net;
                 },
                 Source::Repo, {}};
  };
  f.push_back(shared_int("height", &nets::NetConfig::height, &tasks::TaskConfig::height));
  f.push_back(shared_int("width", &nets::NetConfig::width, &tasks::TaskConfig::width));
  f.push_back(shared_int("classes", &nets::NetConfig::classes, &tasks::TaskConfig::classes));
  f.push_back(field("base_width", BILEVEL_REF(train.net.base_width)));
  f.push_back(field("depth", BILEVEL_REF(train.net.depth)));
  f.push_back(field("lambda_a", BILEVEL_REF(train.weights.lambda_a), Source::Published));
  f.push_back(field("lambda_b", BILEVEL_REF(train.weights.lambda_b), Source::Published));
  f.push_back(field("nonsaturating", BILEVEL_REF(train.weights.nonsaturating)));
  f.push_back(field("n_shot", BILEVEL_REF(train.n_shot), Source::Published));
  f.push_back(field("n_test", BILEVEL_REF(train.n_test)));
  f.push_back(field("inner_iters", BILEVEL_REF(train.inner_iters), Source::Published));
  f.push_back(field("inner_batch", BILEVEL_REF(train.inner_batch)));
  f.push_back(field("meta_batch", BILEVEL_REF(train.meta_batch), Source::Published));
  f.push_back(field("pretrain_batch", BILEVEL_REF(train.pretrain_batch)));
  f.push_back(field("pretrain_iters", BILEVEL_REF(train.pretrain_iters), Source::Repo, "50000"));
  f.push_back(field("metatrain_iters", BILEVEL_REF(train.metatrain_iters), Source::Repo, "20000"));
  f.push_back(field("lr_pretrain", BILEVEL_REF(train.lr_pretrain), Source::Published));
  f.push_back(field("lr_is", BILEVEL_REF(train.lr_is), Source::Published));
  f.push_back(field("lr_gp", BILEVEL_REF(train.lr_gp), Source::Published));
  f.push_back(field("sgd_rate", BILEVEL_REF(train.sgd_rate)));
  f.push_back(field("k", BILEVEL_REF(train.aux_k)));
  f.push_back(field("aux_iters", BILEVEL_REF(train.aux_iters)));
  f.push_back(field("aux", BILEVEL_REF(aux)));
  f.push_back(field("jobs", BILEVEL_REF(train.jobs)));
  f.push_back(field("train_scenes", BILEVEL_REF(data.train_scenes)));
  f.push_back(field("samples_per_scene", BILEVEL_REF(data.samples_per_scene)));
  f.push_back(field("unseen_scenes", BILEVEL_REF(data.unseen_scenes)));
  f.push_back(field("unseen_train", BILEVEL_REF(data.unseen_train)));
  f.push_back(field("unseen_test", BILEVEL_REF(data.unseen_test)));
  f.push_back(field("clusters", BILEVEL_REF(data.clusters)));
  f.push_back(field("crop_max", BILEVEL_REF(data.task.crop_max)));
  f.push_back(field("allow_flip", BILEVEL_REF(data.task.allow_flip)));
  f.push_back(field("rotate_max_deg", BILEVEL_REF(data.task.rotate_max_deg)));
  f.push_back(field("palette_min_dist", BILEVEL_REF(data.task.palette_min_dist)));
  f.push_back(field("cluster_spread", BILEVEL_REF(data.task.cluster_spread)));
  f.push_back(field("layout_jitter", BILEVEL_REF(data.task.layout_jitter)));
  return f;
}

#undef BILEVEL_REF

const std::vector<Field>& fields() {
  static const std::vector<Field> f = build_fields();
  return f;
}

const Field* find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return &f;
  return nullptr;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

ExperimentConfig default_config() {
  ExperimentConfig c;
  c.data.task.height = c.train.net.height;
  c.data.task.width = c.train.net.width;
  c.data.task.classes = c.train.net.classes;
  c.data.task.with_reference = c.train.net.mode == NetMode::Pg2;
  return c;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

}  // namespace

ConfigError::ConfigError(const std::string& what, int line)
    : std::runtime_error(line > 0 ? "config line " + std::to_string(line) + ": " + what : "config: " + what), line_(line) {}

void ExperimentConfig::validate() const {
  train.validate();
  data.validate();
  require(data.task.height == train.net.height && data.task.width == train.net.width &&
              data.task.classes == train.net.classes,
          "task and network image sizes disagree");
  require(data.task.with_reference == (train.net.mode == NetMode::Pg2), "task references disagree with mode");
  require(train.n_shot + train.n_test <= data.samples_per_scene,
          "n_shot + n_test must not exceed samples_per_scene");
  require(train.n_shot <= data.unseen_train, "n_shot must not exceed unseen_train");
  require(train.meta_batch <= data.train_scenes, "meta_batch must not exceed train_scenes");
  require(train.aux_k <= data.train_scenes, "k must not exceed train_scenes");
  require(train.net.height >= 7 && train.net.width >= 7, "images must be at least 7x7 for SSIM");
  require(!out.empty(), "out must not be empty");
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

ParsedConfig parse_config(std::string_view text) {
  ParsedConfig parsed;
  parsed.config = default_config();
  for (const auto& f : fields()) parsed.provenance.push_back({f.key, f.default_source, 0});

  std::map<std::string, int> seen;
  std::istringstream in{std::string(text)};
  int lineno = 0;
  for (std::string raw; std::getline(in, raw);) {
    ++lineno;
    const std::string line = trim(std::string_view(raw).substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("expected 'key = value'", lineno);
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    const Field* f = find_field(key);
    if (!f) throw ConfigError("unknown key '" + key + "'", lineno);
    if (const auto it = seen.find(key); it != seen.end())
      throw ConfigError("key '" + key + "' repeats line " + std::to_string(it->second), lineno);
    seen[key] = lineno;
    try {
      f->set(parsed.config, value);
    } catch (const std::exception& e) {
      throw ConfigError(key + ": " + e.what(), lineno);
    }
    for (auto& p : parsed.provenance)
      if (p.key == key) p = {key, Source::File, lineno};
  }
  try {
    parsed.config.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return parsed;
}

void set_key(ParsedConfig& parsed, const std::string& key, const std::string& value) {
  const Field* f = find_field(key);
  if (!f) throw ConfigError("unknown key '" + key + "'");
  try {
    f->set(parsed.config, value);
  } catch (const std::exception& e) {
    throw ConfigError(key + ": " + e.what());
  }
  for (auto& p : parsed.provenance)
    if (p.key == key) p = {key, Source::Flag, 0};
}

std::string serialize_config(const ExperimentConfig& config) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(config) + "\n";
  return out;
}

std::string provenance_report(const ParsedConfig& parsed) {
  std::string out;
  for (std::size_t i = 0; i < fields().size(); ++i) {
    const Field& f = fields()[i];
    const Provenance& p = parsed.provenance[i];
    std::string origin;
    switch (p.source) {
      case Source::Published: origin = "default, published setting"; break;
      case Source::Repo: origin = "default, repo choice"; break;
      case Source::File: origin = "config file line " + std::to_string(p.line); break;
      case Source::Flag: origin = "command line"; break;
    }
    if (!f.published_scale.empty()) origin += "; published scale " + f.published_scale;
    out += f.key + " = " + f.get(parsed.config) + "  # " + origin + "\n";
  }
  out += "adam_beta1 = 0.5  # fixed, published setting\n";
  out += "adam_beta2 = 0.999  # fixed, published setting\n";
  return out;
}

bool resumable_from(const ExperimentConfig& checkpoint, const ExperimentConfig& current, std::string* mismatch) {
  static const std::vector<std::string> free_keys = {"out", "jobs", "aux", "k", "aux_iters", "pretrain_iters",
                                                     "metatrain_iters"};
  for (const auto& f : fields()) {
    if (std::find(free_keys.begin(), free_keys.end(), f.key) != free_keys.end()) continue;
    const std::string a = f.get(checkpoint), b = f.get(current);
    if (a != b) {
      if (mismatch) *mismatch = f.key + " is " + a + " in the checkpoint but " + b + " now";
      return false;
    }
  }
  return true;
}

}  // namespace bilevel::cli
