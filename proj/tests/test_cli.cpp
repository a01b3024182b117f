#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>
#include <fstream>
#include <sstream>

#include "bilevel/checkpoint.hpp"
#include "bilevel/config.hpp"
#include "bilevel/experiment.hpp"
#include "support/checks.hpp"

using namespace bilevel;
using namespace bilevel::cli;
namespace fs = std::filesystem;

namespace {

int line_of(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.line();
  }
  return -1;
}

const Provenance& provenance(const ParsedConfig& p, const std::string& key) {
  for (const auto& e : p.provenance)
    if (e.key == key) return e;
  throw std::out_of_range(key);
}

std::string read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// A state with distinct values in every array and counter.
train::BiLevelState trained_state(const ExperimentConfig& c, int steps) {
  train::BiLevelState s = train::init_state(c.train, c.seed);
  const tasks::Dataset d = tasks::generate_dataset(c.data, 5);
  train::pretrain(s, d.train, steps);
  train::metatrain(s, d.train, 1);
  return s;
}

int run(const std::string& sub, const ParsedConfig& p, std::string* err_text = nullptr,
        const CommandOptions& options = {}) {
  std::ostringstream log, err;
  const int code = run_command(sub, p, options, log, err);
  if (err_text) *err_text = err.str();
  return code;
}

}  // namespace

TEST_CASE("empty config yields the defaults with their provenance") {
  const ParsedConfig p = parse_config("");
  CHECK(p.config.train.weights.lambda_a == 10.0);
  CHECK(p.config.train.weights.lambda_b == 2.0);
  CHECK(p.config.train.lr_pretrain == 1e-4);
  CHECK(p.config.train.lr_is == 1e-4);
  CHECK(p.config.train.lr_gp == 1e-4);
  CHECK(p.config.train.inner_iters == 20);
  CHECK(p.config.train.meta_batch == 5);
  CHECK(p.config.train.n_shot == 5);
  CHECK(provenance(p, "lambda_a").source == Source::Published);
  CHECK(provenance(p, "inner_iters").source == Source::Published);
  CHECK(provenance(p, "sgd_rate").source == Source::Repo);
  CHECK(p.provenance.size() == config_keys().size());

  const std::string report = provenance_report(p);
  CHECK(report.find("lambda_a = 10  # default, published setting") != std::string::npos);
  CHECK(report.find("pretrain_iters = 2000  # default, repo choice; published scale 50000") != std::string::npos);
  CHECK(report.find("metatrain_iters = 1000  # default, repo choice; published scale 20000") != std::string::npos);
}

TEST_CASE("config values, comments and provenance from the file") {
  const ParsedConfig p = parse_config("# header\n\n  inner_iters = 7   # trailing\nmode=pix2pix\nheight = 16\n");
  CHECK(p.config.train.inner_iters == 7);
  CHECK(p.config.train.net.mode == NetMode::Pix2pix);
  CHECK_FALSE(p.config.data.task.with_reference);
  CHECK(p.config.data.task.height == 16);
  CHECK(provenance(p, "inner_iters").source == Source::File);
  CHECK(provenance(p, "inner_iters").line == 3);
  CHECK(provenance(p, "mode").line == 4);

  ParsedConfig q = p;
  set_key(q, "inner_iters", "9");
  CHECK(q.config.train.inner_iters == 9);
  CHECK(provenance(q, "inner_iters").source == Source::Flag);
  CHECK(provenance_report(q).find("inner_iters = 9  # command line") != std::string::npos);
}

TEST_CASE("config errors carry their line") {
  CHECK(line_of("n_shot = 3\n") == 0);  // invariant violation: no single line to blame
  CHECK_THROWS_WITH_AS(parse_config("n_shot = 3\n"), doctest::Contains("n_shot must be 1 or 5"), ConfigError);
  CHECK(line_of("# a\nbogus = 1\n") == 2);
  CHECK(line_of("inner_iters = 2\ninner_iters = 3\n") == 2);
  CHECK(line_of("\n\nlr_is = fast\n") == 3);
  CHECK(line_of("inner_iters = 2.5\n") == 1);
  CHECK(line_of("inner_iters\n") == 1);
  CHECK(line_of("allow_flip = maybe\n") == 1);
  CHECK(line_of("mode = pix3pix\n") == 1);
  CHECK(line_of("meta_mode = second-order\n") == 1);
  CHECK(line_of("seed = -1\n") == 1);
  CHECK(line_of("out =\n") == 1);
  CHECK(line_of("lr_gp = -1\n") == 0);
  CHECK(line_of("k = 101\n") == 0);
  CHECK(line_of("height = 4\nwidth = 4\ndepth = 1\n") == 0);
  CHECK(line_of("n_shot = 1\n") == -1);
  ParsedConfig p = parse_config("");
  CHECK_THROWS_AS(set_key(p, "nope", "1"), ConfigError);
}

TEST_CASE("serialize and parse round trip on random configs") {
  Rng rng(11);
  const auto pick = [&](std::initializer_list<const char*> xs) {
    return std::string(*(xs.begin() + uniform_index(rng, xs.size())));
  };
  const auto real = [&](double lo, double hi) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", uniform(rng, lo, hi));
    return std::string(buf);
  };
  for (int trial = 0; trial < 200; ++trial) {
    std::ostringstream text;
    text << "seed = " << rng() << "\n";
    text << "mode = " << pick({"pg2", "pix2pix"}) << "\n";
    text << "meta_mode = " << pick({"first-order", "full-unrolled"}) << "\n";
    text << "n_shot = " << pick({"1", "5"}) << "\n";
    text << "lambda_a = " << real(0, 20) << "\nlambda_b = " << real(0, 5) << "\n";
    text << "nonsaturating = " << pick({"true", "false", "on", "off"}) << "\n";
    text << "lr_is = " << std::pow(10.0, uniform(rng, -6, -1)) << "\n";
    text << "lr_gp = " << real(1e-6, 1e-2) << "\nsgd_rate = " << real(1e-4, 1) << "\n";
    text << "inner_iters = " << uniform_index(rng, 40) << "\ninner_batch = " << 1 + uniform_index(rng, 8) << "\n";
    text << "rotate_max_deg = " << real(0, 20) << "\nlayout_jitter = " << real(0, 0.2) << "\n";
    text << "aux = " << pick({"on", "off"}) << "\nout = runs/t" << trial << "\n";
    const ParsedConfig a = parse_config(text.str());
    const std::string once = serialize_config(a.config);
    const ParsedConfig b = parse_config(once);
    CHECK(b.config == a.config);
    CHECK(serialize_config(b.config) == once);
  }
}

TEST_CASE("resumable_from ignores only the free keys") {
  const ExperimentConfig a = parse_config("").config;
  ExperimentConfig b = a;
  b.out = "elsewhere";
  b.train.jobs = 4;
  b.train.aux_k = 7;
  b.train.pretrain_iters = 9;
  b.aux = false;
  CHECK(resumable_from(a, b, nullptr));
  b.train.lr_is = 2e-4;
  std::string why;
  CHECK_FALSE(resumable_from(a, b, &why));
  CHECK(why.find("lr_is") != std::string::npos);
}

TEST_CASE("checkpoint save, load and save again is byte-identical") {
  const fs::path dir = checks::scratch_dir("ckpt_roundtrip");
  const ExperimentConfig c = checks::smoke_config(dir, 3).config;
  const train::BiLevelState s = trained_state(c, 2);
  save_checkpoint(dir / "a.ckpt", c, s);
  const Checkpoint ck = load_checkpoint(dir / "a.ckpt");
  CHECK(ck.config == c);
  CHECK(ck.state.gp.g == s.gp.g);
  CHECK(ck.state.gp.d == s.gp.d);
  CHECK(ck.state.phi.params() == s.phi.params());
  CHECK(ck.state.phi.seed() == s.phi.seed());
  CHECK(ck.state.pre_g == s.pre_g);
  CHECK(ck.state.pre_d == s.pre_d);
  CHECK(ck.state.meta_g == s.meta_g);
  CHECK(ck.state.meta_d == s.meta_d);
  CHECK(ck.state.pretrain_step == 2);
  CHECK(ck.state.metatrain_step == 1);
  save_checkpoint(dir / "b.ckpt", ck.config, ck.state);
  CHECK(read_bytes(dir / "a.ckpt") == read_bytes(dir / "b.ckpt"));
  CHECK_FALSE(fs::exists(dir / "a.ckpt.tmp"));

  const std::string bytes = read_bytes(dir / "a.ckpt");
  CHECK(bytes.compare(0, 8, "BILVLCKP") == 0);
  std::uint32_t version = 0;
  std::memcpy(&version, bytes.data() + 8, 4);
  CHECK(version == kCheckpointVersion);
  std::uint64_t text_len = 0;
  std::memcpy(&text_len, bytes.data() + 12, 8);
  CHECK(bytes.substr(20, text_len) == serialize_config(c));
}

TEST_CASE("corrupt checkpoints are rejected") {
  const fs::path dir = checks::scratch_dir("ckpt_corrupt");
  const ExperimentConfig c = checks::smoke_config(dir, 4).config;
  const std::string good = encode_checkpoint(c, trained_state(c, 1));

  std::string bad_magic = good;
  bad_magic[0] = 'X';
  {
    std::ofstream(dir / "m.ckpt", std::ios::binary) << bad_magic;
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(dir / "m.ckpt"), doctest::Contains("bad magic"), CheckpointError);
  CHECK(read_bytes(dir / "m.ckpt") == bad_magic);

  std::string bad_version = good;
  bad_version[8] = 2;
  CHECK_THROWS_WITH_AS(decode_checkpoint(bad_version), doctest::Contains("version"), CheckpointError);

  for (std::size_t n = 0; n < good.size(); n += (n < 64 ? 1 : 997))
    CHECK_THROWS_AS(decode_checkpoint(good.substr(0, n)), CheckpointError);
  CHECK_THROWS_AS(decode_checkpoint(good.substr(0, good.size() - 1)), CheckpointError);
  CHECK_THROWS_WITH_AS(decode_checkpoint(good + '\0'), doctest::Contains("trailing"), CheckpointError);

  // First array header: name length, name, rank, then the first dimension.
  std::uint64_t text_len = 0;
  std::memcpy(&text_len, good.data() + 12, 8);
  const std::size_t name_at = 20 + text_len;
  std::uint32_t name_len = 0;
  std::memcpy(&name_len, good.data() + name_at, 4);
  const std::size_t dim_at = name_at + 4 + name_len + 4;
  std::string huge = good;
  const std::uint64_t big = std::uint64_t{1} << 62;
  std::memcpy(huge.data() + dim_at, &big, 8);
  CHECK_THROWS_WITH_AS(decode_checkpoint(huge), doctest::Contains("larger than the file"), CheckpointError);
  std::string reshaped = good;
  std::uint64_t dim0 = 0;
  std::memcpy(&dim0, good.data() + dim_at, 8);
  ++dim0;
  std::memcpy(reshaped.data() + dim_at, &dim0, 8);
  CHECK_THROWS_AS(decode_checkpoint(reshaped), CheckpointError);
}

TEST_CASE("subcommands report missing prerequisites and config errors") {
  const fs::path dir = checks::scratch_dir("cli_missing");
  const ParsedConfig p = checks::smoke_config(dir, 1);
  std::string err;
  CHECK(run("pretrain", p, &err) == kExitMissing);
  CHECK(err.find("gen-data") != std::string::npos);
  CHECK(run("eval", p, &err) == kExitMissing);
  CHECK(run("gen-data", p) == kExitOk);
  CHECK(run("metatrain", p, &err) == kExitMissing);
  CHECK(err.find("run pretrain") != std::string::npos);
  CHECK(run("adapt", p, &err) == kExitMissing);
  CHECK(err.find("run metatrain") != std::string::npos);
  CHECK(run("adapt", p, &err, {Variant::BaselineNShot, {}}) == kExitMissing);
  CHECK(err.find("run pretrain") != std::string::npos);
  CHECK(run("frobnicate", p) == kExitConfig);

  ParsedConfig other = p;
  set_key(other, "samples_per_scene", "8");
  CHECK(run("pretrain", other, &err) == kExitConfig);
  CHECK(err.find("rerun gen-data") != std::string::npos);

  ParsedConfig invalid = p;
  set_key(invalid, "n_shot", "3");
  CHECK(run("gen-data", invalid, &err) == kExitConfig);
  CHECK(err.find("n_shot") != std::string::npos);
}

TEST_CASE("a diverging run exits with the numerical failure code") {
  const fs::path dir = checks::scratch_dir("cli_numeric");
  ParsedConfig p = checks::smoke_config(dir, 1);
  set_key(p, "lr_pretrain", "1e300");
  REQUIRE(run("gen-data", p) == kExitOk);
  std::string err;
  CHECK(run("pretrain", p, &err) == kExitNumeric);
  CHECK(err.find("numerical failure") != std::string::npos);
}

TEST_CASE("pretraining resumed from a checkpoint equals an uninterrupted run") {
  const fs::path one = checks::scratch_dir("cli_resume_a"), two = checks::scratch_dir("cli_resume_b");
  ParsedConfig a = checks::smoke_config(one, 2), b = checks::smoke_config(two, 2);
  set_key(a, "pretrain_iters", "1");
  set_key(b, "pretrain_iters", "2");
  REQUIRE(run("gen-data", a) == kExitOk);
  REQUIRE(run("gen-data", b) == kExitOk);
  REQUIRE(run("pretrain", a) == kExitOk);
  set_key(a, "pretrain_iters", "2");
  REQUIRE(run("pretrain", a) == kExitOk);
  REQUIRE(run("pretrain", b) == kExitOk);
  const Checkpoint ra = load_checkpoint(Paths{one}.pretrain_ckpt()), rb = load_checkpoint(Paths{two}.pretrain_ckpt());
  CHECK(ra.state.gp.g == rb.state.gp.g);
  CHECK(ra.state.gp.d == rb.state.gp.d);
  CHECK(ra.state.pre_g == rb.state.pre_g);
  CHECK(ra.state.pre_d == rb.state.pre_d);
  CHECK(ra.state.pretrain_step == 2);
  CHECK(read_bytes(Paths{one}.log("pretrain")) == read_bytes(Paths{two}.log("pretrain")));
  // Only the output directory differs between the two checkpoints.
  CHECK(encode_checkpoint(rb.config, ra.state) == read_bytes(Paths{two}.pretrain_ckpt()));
}

TEST_CASE("full-run emits all comparison rows and resumes adapt identically") {
  const fs::path whole = checks::scratch_dir("cli_full"), staged = checks::scratch_dir("cli_staged");
  const ParsedConfig a = checks::smoke_config(whole, 9);
  REQUIRE(run("full-run", a) == kExitOk);
  const std::string table = read_bytes(Paths{whole}.report() / "comparison.csv");
  CHECK(table.find("baseline,Baseline,") != std::string::npos);
  CHECK(table.find("baseline-nshot,Baseline (5-shot),") != std::string::npos);
  CHECK(table.find("bil-noaux,BiL w/o Aux (5-shot),") != std::string::npos);
  CHECK(table.find("bil,BiL (5-shot),") != std::string::npos);

  // Stop after metatrain, then run the remaining stages separately.
  ParsedConfig b = checks::smoke_config(staged, 9);
  for (const char* sub : {"gen-data", "pretrain", "metatrain"}) REQUIRE(run(sub, b) == kExitOk);
  for (Variant v : kAllVariants) REQUIRE(run("adapt", b, nullptr, {v, {}}) == kExitOk);
  REQUIRE(run("eval", b) == kExitOk);

  auto ta = checks::read_tree(whole), tb = checks::read_tree(staged);
  // Text files that name the output directory differ by design.
  for (auto* t : {&ta, &tb})
    for (const char* f : {"config.txt", "provenance.txt", "checkpoints/pretrain.ckpt", "checkpoints/metatrain.ckpt"})
      t->erase(f);
  CHECK(ta.size() == tb.size());
  for (const auto& [name, bytes] : ta) {
    INFO(name);
    REQUIRE(tb.count(name));
    CHECK(tb.at(name) == bytes);
  }
  const Checkpoint ca = load_checkpoint(Paths{whole}.metatrain_ckpt()), cb = load_checkpoint(Paths{staged}.metatrain_ckpt());
  CHECK(encode_checkpoint(cb.config, ca.state) == encode_checkpoint(cb.config, cb.state));
}

TEST_CASE("retrieve ranks a training scene's own map first") {
  const fs::path dir = checks::scratch_dir("cli_retrieve");
  const ParsedConfig p = checks::smoke_config(dir, 5);
  REQUIRE(run("gen-data", p) == kExitOk);
  for (int scene : {0, 3, 5}) {
    const fs::path query = Paths{dir}.data() / ("scene" + std::to_string(scene) + "_pool0_seg.pgm");
    REQUIRE(fs::exists(query));
    REQUIRE(run("retrieve", p, nullptr, {{}, query}) == kExitOk);
    std::istringstream csv(read_bytes(Paths{dir}.retrieval()));
    std::string header, first;
    std::getline(csv, header);
    std::getline(csv, first);
    CHECK(first.rfind(query.filename().string() + ",1," + std::to_string(scene) + ",", 0) == 0);
  }
  REQUIRE(run("retrieve", p) == kExitOk);
  CHECK(run("retrieve", p, nullptr, {{}, dir / "absent.pgm"}) == kExitMissing);
}

TEST_CASE("variant names round trip") {
  for (Variant v : kAllVariants) CHECK(parse_variant(variant_name(v)) == v);
  CHECK_THROWS_AS(parse_variant("bil+"), ConfigError);
  CHECK(variant_label(Variant::BilNoAux, 1) == "BiL w/o Aux (1-shot)");
}
