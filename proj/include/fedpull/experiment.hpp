#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fedpull/report.hpp"

namespace fedpull {

/// Bad or inconsistent configuration; the CLI maps it to exit status 2.
struct ConfigError : Error {
  using Error::Error;
};

enum class ExperimentKind {
  baseline_matrix,
  central_combination,
  central_chained,
  fl,
  fl_rounds_ablation,
  dp_compare,
  controllers_parity,
};

std::string_view to_string(ExperimentKind k);
ExperimentKind experiment_kind_from_string(std::string_view s);

struct ExperimentConfig {
  ExperimentKind experiment = ExperimentKind::fl;
  std::vector<DomainSpec> domains = default_domain_profile();
  ModelConfig model;
  DomainKind pretrain_domain = DomainKind::copy;
  int pretrain_steps = 2000;
  int baseline_steps = 2000;  // per-domain models of baseline_matrix
  int steps_per_round = 200;
  int rounds = 5;
  std::vector<int> rounds_list{5, 10, 50};  // total steps stay rounds * steps_per_round
  int finetune_steps = 1000;  // central_combination total, central_chained split evenly
  std::vector<DomainKind> chain_order;  // empty: descending corpus size
  int post_fl_finetune_steps = 0;
  int batch_size = 16;
  double learning_rate = 1e-3;
  PullPolicy policy;
  double parity_fraction = PullPolicy::kParityFraction;
  int test_size = 50;
  int dev_size = 20;
  bool eval_every_round = true;
  double histogram_bucket_width = 1.0;
  std::vector<std::uint64_t> seeds{1};
  std::filesystem::path output_dir = "runs";
  std::optional<std::filesystem::path> cache_dir;  // default output_dir/.cache

  /// Unknown keys and type mismatches raise ConfigError.
  static ExperimentConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  /// Throws ConfigError naming the offending field.
  void validate() const;
};

ExperimentConfig load_config(const std::filesystem::path& path);

/// Per-seed data and the shared starting checkpoint.
struct SeedData {
  std::uint64_t seed = 0;
  std::vector<CorpusSplit> splits;  // config domain order
  ModelState pretrained;

  std::vector<Corpus> tests() const;
  std::vector<Corpus> trains() const;
};

SeedData prepare_seed(const ExperimentConfig& cfg, std::uint64_t seed);

/// Model trained from scratch on one domain's training split. Pretraining is
/// the special case domain == pretrain_domain, steps == pretrain_steps.
/// Results are cached in memory and on disk by a hash of everything that
/// determines them.
ModelState train_from_scratch(const ExperimentConfig& cfg, const SeedData& data,
                              std::size_t domain_index, int steps);

/// Number of threads for client parallelism: FEDPULL_THREADS if set, else the
/// OpenMP default.
int client_threads();

ExperimentReport run_fl_variant(const ExperimentConfig& cfg, const SeedData& data,
                                const PullPolicy& policy, int rounds,
                                int steps_per_round, const std::string& variant);

ExperimentReport run_baseline_matrix(const ExperimentConfig& cfg, const SeedData& data);
ExperimentReport run_central_combination(const ExperimentConfig& cfg,
                                         const SeedData& data);
ExperimentReport run_central_chained(const ExperimentConfig& cfg, const SeedData& data);

/// Every variant of the configured experiment for one seed.
std::vector<ExperimentReport> run_seed(const ExperimentConfig& cfg, std::uint64_t seed);

struct RunOptions {
  std::optional<std::filesystem::path> out;  // overrides output_dir
  int seed_parallel = 1;
};

/// Runs all seeds and writes output_dir/<experiment>/<seed>/...; returns the
/// seed directories.
std::vector<std::filesystem::path> run_experiment(const ExperimentConfig& cfg,
                                                  const RunOptions& options);

/// The report JSON with the timestamp removed, for determinism checks.
std::string canonical_report(const ExperimentReport& r);

}  // namespace fedpull
