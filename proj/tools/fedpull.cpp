// fedpull run <config.json> [--validate] [--seed-parallel N] [--out DIR]

#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "fedpull/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Cross-silo federated learning simulator with dynamic pulling"};
  app.require_subcommand(1);
  auto* run = app.add_subcommand("run", "Run the experiment described by a config file");
  std::string config_path;
  bool validate_only = false;
  int seed_parallel = 1;
  std::string out;
  run->add_option("config", config_path, "JSON experiment config")->required();
  run->add_flag("--validate", validate_only, "Check the config and exit without training");
  run->add_option("--seed-parallel", seed_parallel, "Seeds to run concurrently")
      ->check(CLI::PositiveNumber);
  run->add_option("--out", out, "Output directory (overrides output_dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  fedpull::ExperimentConfig cfg;
  try {
    cfg = fedpull::load_config(config_path);
    fedpull::client_threads();  // surfaces a malformed FEDPULL_THREADS early
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }
  if (validate_only) {
    std::cout << "ok: " << fedpull::to_string(cfg.experiment) << ", "
              << cfg.seeds.size() << " seed(s)\n";
    return 0;
  }

  try {
    fedpull::RunOptions opt;
    opt.seed_parallel = seed_parallel;
    if (!out.empty()) opt.out = out;
    for (const auto& dir : fedpull::run_experiment(cfg, opt)) std::cout << dir.string() << "\n";
  } catch (const fedpull::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
