#pragma once

// Synchronous cross-silo rounds: local training, pull, FedAVG, push.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedpull/data.hpp"
#include "fedpull/dynpull.hpp"
#include "fedpull/metrics.hpp"
#include "fedpull/model.hpp"

namespace fedpull {

struct ServerState {
  ModelState central_model;
  int round = 0;
  int total_rounds = 1;
  std::map<std::string, std::size_t> client_weights;  // id -> n_k
  std::size_t total_n = 0;

  /// Recomputes the data total and checks round <= total_rounds.
  void check() const;
};

struct ClientState {
  std::string id;
  Corpus corpus;  // local training split
  ModelState model;
  OptimizerState optimizer;
  std::optional<ModelState> snapshot;  // post-training state of last round
  int steps_per_round = 1;
};

struct ClientUpdate {
  std::string client_id;
  std::vector<NamedTensor> tensors;
  std::size_t n_k = 0;
};

ServerState make_server(const ModelState& initial,
                        std::span<const ClientState> clients, int total_rounds);

/// Per tensor name, the senders (ascending client id) and their weights
/// n_k / sum of n_j over senders. Validates names, shapes and duplicates.
std::map<std::string, std::vector<std::pair<std::string, double>>>
aggregation_weights(const ServerState& server,
                    std::span<const ClientUpdate> updates);

/// FedAVG with per-tensor renormalization over the clients that sent it.
/// Tensors nobody sent keep their server value.
ServerState fedavg_aggregate(const ServerState& server,
                             std::span<const ClientUpdate> updates);

struct ClientRoundReport {
  std::string client_id;
  double train_loss = 0.0;  // mean over the round's steps
  SelectionResult pull_selection;
  std::optional<SelectionResult> push_selection;
  BandwidthRecord pull;
  BandwidthRecord push;
  std::vector<EvalResult> evals;  // post-training client model per test set
};

struct RoundReport {
  int round = 0;
  std::vector<ClientRoundReport> clients;  // ascending client id
  std::vector<EvalResult> server_evals;    // after aggregation
};

struct RoundOptions {
  int batch_size = 16;
  std::uint64_t seed = 0;
  int threads = 1;
  std::span<const Corpus> tests;  // empty: skip evaluation
};

/// One round. Clients train concurrently; round 0 (or a client without a
/// snapshot) always exchanges the full model.
RoundReport run_round(ServerState& server, std::vector<ClientState>& clients,
                      const PullPolicy& policy, const RoundOptions& options);

/// Local training only, no server interaction.
ClientState local_finetune(const ClientState& client, int steps,
                           int batch_size, std::uint64_t seed);

/// Fresh Adam over the concatenation of all corpora.
TrainResult combined_finetune(const ModelState& model,
                              std::span<const Corpus> corpora, int steps,
                              int batch_size, double learning_rate,
                              std::uint64_t seed);

/// train_steps per corpus in the given order with one optimizer carried
/// through the chain. Stage 0 uses `seed` itself.
TrainResult chained_finetune(const ModelState& model,
                             std::span<const Corpus> sequence, int steps_each,
                             int batch_size, double learning_rate,
                             std::uint64_t seed);

/// Per-group Jaccard overlaps of one client's consecutive pull selections,
/// over the rounds that ran a dp or random selection.
std::map<Group, std::vector<double>> client_persistence(
    std::span<const RoundReport> rounds, const std::string& client_id);

std::uint64_t string_seed(std::string_view s);

}  // namespace fedpull
