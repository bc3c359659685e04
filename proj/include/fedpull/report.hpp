#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "fedpull/fl.hpp"
#include "json.hpp"

namespace fedpull {

struct ModelEval {
  std::string label;  // "server", a client id, a baseline domain, ...
  std::vector<EvalResult> evals;
};

/// One training variant of one experiment for one seed.
struct ExperimentReport {
  std::string experiment;
  std::string variant;
  std::uint64_t seed = 0;
  std::string timestamp;  // excluded from determinism comparisons
  nlohmann::json config = nlohmann::json::object();
  std::string pretrained_checkpoint;  // content hash of the starting model
  std::vector<RoundReport> rounds;
  std::vector<ModelEval> final_evals;
  std::vector<ModelEval> post_finetune;
  std::map<std::string, std::map<Group, std::vector<double>>> persistence;
  double histogram_bucket_width = 1.0;
};

/// Hex FNV-1a over names, shapes and raw float bytes.
std::string model_hash(const ModelState& model);

std::string utc_timestamp();

nlohmann::json to_json(const EvalResult& e);
nlohmann::json to_json(const SelectionResult& s);
nlohmann::json to_json(const BandwidthRecord& b);
nlohmann::json to_json(const RoundReport& r);
nlohmann::json to_json(const ExperimentReport& r);

/// Rows: (round, client, domain) from the rounds when there are any,
/// otherwise (0, model label, domain) from the final evaluations.
std::string metrics_csv(const ExperimentReport& r);
std::string histograms_csv(const ExperimentReport& r);

/// Replaces `path` via a temporary sibling and a rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& text);

/// Writes report.json, metrics.csv and histograms.csv into `directory`
/// (created if needed) and returns their paths.
std::vector<std::filesystem::path> report_write(const ExperimentReport& r,
                                                const std::filesystem::path& directory);

}  // namespace fedpull
