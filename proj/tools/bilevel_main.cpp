#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "bilevel/experiment.hpp"

namespace {

using bilevel::cli::ConfigError;

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bilevel few-shot image translation: data generation, training, adaptation and evaluation"};
  app.require_subcommand(1, 1);
  app.fallthrough();

  std::string config_path, out, mode, meta_mode, shots, aux, variant, query;
  std::optional<std::uint64_t> seed;
  std::optional<int> k, jobs;
  app.add_option("--config", config_path, "config file of `key = value` lines");
  app.add_option("--seed", seed, "master seed");
  app.add_option("--out", out, "output directory");
  app.add_option("--mode", mode, "pg2 or pix2pix")->check(CLI::IsMember({"pg2", "pix2pix"}));
  app.add_option("--meta-mode", meta_mode, "first-order or full-unrolled")
      ->check(CLI::IsMember({"first-order", "full-unrolled"}));
  app.add_option("--shots", shots, "adaptation samples per unseen scene: 1 or 5")->check(CLI::IsMember({"1", "5"}));
  app.add_option("--aux", aux, "retrieval fine-tuning for adapt: on or off")->check(CLI::IsMember({"on", "off"}));
  app.add_option("--k", k, "auxiliary scenes retrieved per unseen scene");
  app.add_option("--jobs", jobs, "worker threads");

  const char* subcommands[][2] = {
      {"gen-data", "render and export the synthetic dataset"},
      {"pretrain", "pretrain the general-purpose model (resumes from its checkpoint)"},
      {"metatrain", "alternating meta-training from the pretrained model (resumes)"},
      {"adapt", "adapt to every unseen scene and score the predictions"},
      {"eval", "collect adaptation results into the comparison table"},
      {"retrieve", "list the training scenes most similar to each query"},
      {"full-run", "every stage in order, all four comparison variants"},
  };
  for (const auto& [name, help] : subcommands) {
    CLI::App* sub = app.add_subcommand(name, help);
    if (std::string(name) == "adapt")
      sub->add_option("--variant", variant, "baseline, baseline-nshot, bil-noaux or bil (default from --aux)");
    if (std::string(name) == "retrieve") sub->add_option("--query", query, "P5 structure map to query with");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : bilevel::cli::kExitConfig;
  }

  bilevel::cli::ParsedConfig parsed;
  bilevel::cli::CommandOptions options;
  try {
    parsed = bilevel::cli::parse_config(config_path.empty() ? std::string() : read_file(config_path));
    if (seed) bilevel::cli::set_key(parsed, "seed", std::to_string(*seed));
    if (!out.empty()) bilevel::cli::set_key(parsed, "out", out);
    if (!mode.empty()) bilevel::cli::set_key(parsed, "mode", mode);
    if (!meta_mode.empty()) bilevel::cli::set_key(parsed, "meta_mode", meta_mode);
    if (!shots.empty()) bilevel::cli::set_key(parsed, "n_shot", shots);
    if (!aux.empty()) bilevel::cli::set_key(parsed, "aux", aux);
    if (k) bilevel::cli::set_key(parsed, "k", std::to_string(*k));
    if (jobs) bilevel::cli::set_key(parsed, "jobs", std::to_string(*jobs));
    if (!variant.empty()) options.variant = bilevel::cli::parse_variant(variant);
    if (!query.empty()) options.query = query;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return bilevel::cli::kExitConfig;
  }

  const std::string subcommand = app.get_subcommands().front()->get_name();
  return bilevel::cli::run_command(subcommand, parsed, options, std::cout, std::cerr);
}
