// alea: command-line driver for the activate / locate / edit pipeline.
#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "alea/pipeline.hpp"
#include "alea/util.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Toy activate-locate-edit hallucination pipeline"};
  app.require_subcommand(1);

  std::string stage, config_path, run_dir;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  bool gate = false, quiet = false;

  auto* run = app.add_subcommand("run", "run one pipeline stage, or all of them");
  std::string stage_help = "stage: all";
  for (auto s : alea::kStages) stage_help += "|" + std::string(s);
  run->add_option("stage", stage, stage_help)->required();
  run->add_option("--config", config_path, "pipeline config JSON");
  run->add_option("--set", overrides, "dotted override, e.g. edit.lambda=0.1 (repeatable)");
  run->add_option("--seed", seed, "master seed");
  run->add_option("--run-dir", run_dir, "run directory (default $ALEA_RUN_DIR/seed-<seed>)");
  run->add_flag("--gate", gate, "exit 3 when the candidate fails the eval gate");
  run->add_flag("--quiet", quiet, "no progress output");

  auto* config = app.add_subcommand("config", "print the default configuration");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : alea::kExitValidation;
  }

  if (config->parsed()) {
    std::cout << alea::default_config_json().dump(2) << std::endl;
    return alea::kExitOk;
  }

  alea::RunOptions options;
  options.gate = gate;
  options.quiet = quiet;
  options.run_dir = run_dir;
  try {
    if (!config_path.empty()) {
      auto j = nlohmann::json::parse(alea::read_file(config_path), nullptr, false);
      alea::require(!j.is_discarded(), alea::ErrorKind::kConfig, "config file " + config_path + " is not valid JSON");
      alea::merge_config(options.config, j);
      options.config_given = true;
    }
    for (const auto& o : overrides) {
      alea::apply_override(options.config, o);
      options.config_given = true;
    }
    if (seed) {
      options.config["seed"] = *seed;
      options.config_given = true;
    }
  } catch (const alea::Error& e) {
    std::cerr << "[alea] error: " << e.what() << std::endl;
    return alea::exit_code_for(e.kind());
  }
  return alea::run_stage(stage, options);
}
