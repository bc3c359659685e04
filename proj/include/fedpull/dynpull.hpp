#pragma once

// Dynamic pulling: per-round, per-client choice of which tensors travel to
// the server, driven by how far each tensor moved since the client's previous
// round.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedpull/model.hpp"
#include "fedpull/tensor.hpp"

namespace fedpull {

enum class PullMode { full, dp_greater, dp_less, random };
enum class PullScope { pull_only, push_and_pull };
enum class Direction { pull, push };

std::string_view to_string(PullMode m);
std::string_view to_string(PullScope s);
std::string_view to_string(Direction d);
PullMode pull_mode_from_string(std::string_view s);
PullScope pull_scope_from_string(std::string_view s);

struct PullPolicy {
  PullMode mode = PullMode::full;
  double kept_fraction = 0.5;
  PullScope scope = PullScope::pull_only;
  std::uint64_t seed = 0;  // random mode only

  /// Default for the controllers-parity (push_and_pull) budget.
  static constexpr double kParityFraction = 1.0 / 3.0;

  void validate() const;
  /// Fraction actually applied: 1.0 for full mode.
  double effective_fraction() const {
    return mode == PullMode::full ? 1.0 : kept_fraction;
  }
};

struct SelectionResult {
  std::vector<std::string> kept;     // sorted by name
  std::vector<std::string> dropped;  // sorted by name
  std::map<Group, double> thresholds;
  std::vector<DeltaRecord> deltas;
};

struct BandwidthRecord {
  Direction direction = Direction::pull;
  std::size_t params_sent = 0;
  std::size_t params_total = 0;
  std::size_t bytes_sent = 0;
};

/// One DeltaRecord per tensor, sorted by (group, name). Tensors are processed
/// in parallel; each norm is summed serially, so the result does not depend on
/// the thread count.
std::vector<DeltaRecord> tensor_deltas(const ModelState& current,
                                       const ModelState& snapshot);

/// ceil(fraction * total), clamped to [1, total].
std::size_t kept_count(double fraction, std::size_t total);

struct GroupSelection {
  double threshold = 0.0;  // norm of the boundary record
  std::vector<std::string> kept;
};

/// Exact top-k (dp_greater) or bottom-k (dp_less) of one group's deltas with
/// k = ceil(fraction * T). Ties on norm are broken by ascending name.
GroupSelection select_threshold(std::span<const DeltaRecord> group_deltas,
                                double fraction, PullMode mode);

/// Applies a policy to precomputed deltas, independently per group.
SelectionResult select_from_deltas(std::vector<DeltaRecord> deltas,
                                   const PullPolicy& policy);

/// Throws "no previous round" when snapshot is empty.
SelectionResult select_dp(const ModelState& current,
                          const std::optional<ModelState>& snapshot,
                          const PullPolicy& policy);

/// Selection that keeps every tensor of the model (round 0, full mode).
SelectionResult select_all(const ModelState& model);

/// Name and shape of every tensor; enough to account for bandwidth.
std::vector<TensorSpec> manifest(const ModelState& model);

BandwidthRecord bandwidth(std::span<const std::string> kept,
                          std::span<const TensorSpec> manifest,
                          Direction direction);
BandwidthRecord bandwidth(const SelectionResult& selection,
                          const ModelState& model, Direction direction);

double jaccard(std::span<const std::string> a, std::span<const std::string> b);

/// Jaccard overlap of consecutive kept sets; needs at least two rounds.
std::vector<double> cluster_persistence(
    std::span<const std::vector<std::string>> kept_per_round);

}  // namespace fedpull
