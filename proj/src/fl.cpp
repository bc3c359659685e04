#include "fedpull/fl.hpp"

#include <algorithm>
#include <exception>
#include <numeric>
#include <set>

#include "fedpull/kernels.hpp"
#include "fedpull/rng.hpp"

namespace fedpull {

std::uint64_t string_seed(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void ServerState::check() const {
  if (total_rounds < 1) throw Error("total_rounds must be >= 1");
  if (round < 0 || round > total_rounds)
    throw Error("round " + std::to_string(round) + " outside [0, " +
                std::to_string(total_rounds) + "]");
  std::size_t n = 0;
  for (const auto& [_, nk] : client_weights) n += nk;
  if (n != total_n)
    throw Error("cached total_n " + std::to_string(total_n) +
                " != sum of client weights " + std::to_string(n));
}

ServerState make_server(const ModelState& initial,
                        std::span<const ClientState> clients, int total_rounds) {
  ServerState s;
  s.central_model = initial;
  s.total_rounds = total_rounds;
  for (const auto& c : clients) {
    if (!s.client_weights.emplace(c.id, c.corpus.size()).second)
      throw Error("duplicate client id '" + c.id + "'");
    s.total_n += c.corpus.size();
  }
  s.check();
  return s;
}

std::map<std::string, std::vector<std::pair<std::string, double>>>
aggregation_weights(const ServerState& server,
                    std::span<const ClientUpdate> updates) {
  std::vector<const ClientUpdate*> order;
  std::set<std::string> seen;
  for (const auto& u : updates) {
    if (!seen.insert(u.client_id).second)
      throw Error("duplicate update from client '" + u.client_id + "'");
    order.push_back(&u);
  }
  std::sort(order.begin(), order.end(), [](const auto* a, const auto* b) {
    return a->client_id < b->client_id;
  });

  std::map<std::string, std::vector<std::pair<std::string, std::size_t>>> senders;
  for (const auto* u : order) {
    std::set<std::string> names;
    for (const auto& t : u->tensors) {
      const auto it = server.central_model.tensors.find(t.name());
      if (it == server.central_model.tensors.end())
        throw Error("client '" + u->client_id + "' sent unknown tensor '" +
                    t.name() + "'");
      if (it->second.shape() != t.shape())
        throw Error("client '" + u->client_id + "' tensor '" + t.name() +
                    "' has shape " + shape_string(t.shape()) + ", server has " +
                    shape_string(it->second.shape()));
      if (!names.insert(t.name()).second)
        throw Error("client '" + u->client_id + "' sent '" + t.name() +
                    "' twice");
      senders[t.name()].emplace_back(u->client_id, u->n_k);
    }
  }

  std::map<std::string, std::vector<std::pair<std::string, double>>> out;
  for (auto& [name, list] : senders) {
    std::size_t total = 0;
    for (const auto& [_, nk] : list) total += nk;
    if (total == 0) throw Error("tensor '" + name + "' sent with zero weight");
    auto& w = out[name];
    for (const auto& [id, nk] : list)
      w.emplace_back(id, static_cast<double>(nk) / static_cast<double>(total));
  }
  return out;
}

ServerState fedavg_aggregate(const ServerState& server,
                             std::span<const ClientUpdate> updates) {
  const auto weights = aggregation_weights(server, updates);

  std::map<std::string, const ClientUpdate*> by_id;
  for (const auto& u : updates) by_id[u.client_id] = &u;
  auto find = [&](const std::string& client, const std::string& name) {
    for (const auto& t : by_id.at(client)->tensors)
      if (t.name() == name) return &t;
    throw Error("internal: tensor '" + name + "' missing from '" + client + "'");
  };

  ServerState next = server;
  for (const auto& [name, list] : weights) {
    std::vector<std::span<const float>> inputs;
    std::vector<double> w;
    for (const auto& [client, weight] : list) {
      inputs.push_back(find(client, name)->values());
      w.push_back(weight);
    }
    const auto& cur = server.central_model.at(name);
    std::vector<float> out(cur.numel());
    kernels::omp::weighted_sum(inputs, w, out);
    next.central_model.tensors[name] = NamedTensor(name, cur.shape(), std::move(out));
  }
  return next;
}

namespace {

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

RoundReport run_round(ServerState& server, std::vector<ClientState>& clients,
                      const PullPolicy& policy, const RoundOptions& options) {
  policy.validate();
  server.check();
  if (server.round >= server.total_rounds)
    throw Error("round " + std::to_string(server.round) +
                " but total_rounds is " + std::to_string(server.total_rounds));
  std::sort(clients.begin(), clients.end(),
            [](const auto& a, const auto& b) { return a.id < b.id; });

  const int r = server.round;
  const std::size_t K = clients.size();
  RoundReport report;
  report.round = r;
  report.clients.resize(K);
  std::vector<ClientUpdate> updates(K);
  std::vector<std::exception_ptr> errors(K);

  // Local training and pull-side selection.
#pragma omp parallel for schedule(dynamic) num_threads(std::max(options.threads, 1))
  for (std::ptrdiff_t ki = 0; ki < static_cast<std::ptrdiff_t>(K); ++ki) {
    const auto k = static_cast<std::size_t>(ki);
    auto& c = clients[k];
    auto& cr = report.clients[k];
    try {
      const auto cseed = mix_seed(mix_seed(options.seed, static_cast<std::uint64_t>(r)),
                                  string_seed(c.id));
      auto trained = train_steps(c.model, c.optimizer, c.corpus.pairs,
                                 c.steps_per_round, options.batch_size, cseed);
      c.model = std::move(trained.model);
      c.optimizer = std::move(trained.optimizer);
      cr.client_id = c.id;
      cr.train_loss = mean(trained.losses);

      if (r == 0 || !c.snapshot) {
        cr.pull_selection = select_all(c.model);
        if (c.snapshot) cr.pull_selection.deltas = tensor_deltas(c.model, *c.snapshot);
      } else {
        PullPolicy p = policy;
        p.seed = mix_seed(policy.seed, cseed);
        cr.pull_selection = select_dp(c.model, c.snapshot, p);
      }
      cr.pull = bandwidth(cr.pull_selection, c.model, Direction::pull);

      ClientUpdate& u = updates[k];
      u.client_id = c.id;
      u.n_k = c.corpus.size();
      for (const auto& name : cr.pull_selection.kept) u.tensors.push_back(c.model.at(name));
      c.snapshot = c.model;
    } catch (const std::exception& e) {
      errors[k] = std::make_exception_ptr(Error("client '" + c.id + "': " + e.what()));
    } catch (...) {
      errors[k] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  const int threads = options.threads;
  std::vector<std::vector<EvalResult>> client_evals;
  if (!options.tests.empty()) {
    std::vector<const ModelState*> models;
    for (const auto& c : clients) models.push_back(&c.model);
    client_evals = evaluate_matrix(models, options.tests, threads);
  }

  const auto round_seen = server.round;
  server = fedavg_aggregate(server, updates);
  server.round = round_seen + 1;

  // Push.
  const bool filtered_push =
      policy.scope == PullScope::push_and_pull && r > 0 && policy.mode != PullMode::full;
  for (std::size_t k = 0; k < K; ++k) {
    auto& c = clients[k];
    auto& cr = report.clients[k];
    if (!filtered_push) {
      cr.push = bandwidth(select_all(server.central_model), server.central_model,
                          Direction::push);
      c.model = server.central_model;
      continue;
    }
    PullPolicy p = policy;
    p.seed = mix_seed(policy.seed, mix_seed(string_seed(c.id), 0x7075736800ULL + r));
    auto sel = select_from_deltas(tensor_deltas(server.central_model, c.model), p);
    cr.push = bandwidth(sel, server.central_model, Direction::push);
    for (const auto& name : sel.kept)
      c.model.tensors[name] = server.central_model.at(name);
    cr.push_selection = std::move(sel);
  }

  if (!options.tests.empty()) {
    for (std::size_t k = 0; k < K; ++k) report.clients[k].evals = client_evals[k];
    const ModelState* sm[] = {&server.central_model};
    report.server_evals = evaluate_matrix(sm, options.tests, threads)[0];
  }
  return report;
}

ClientState local_finetune(const ClientState& client, int steps, int batch_size,
                           std::uint64_t seed) {
  ClientState out = client;
  if (steps == 0) return out;
  auto r = train_steps(client.model, client.optimizer, client.corpus.pairs, steps,
                       batch_size, seed);
  out.model = std::move(r.model);
  out.optimizer = std::move(r.optimizer);
  return out;
}

TrainResult combined_finetune(const ModelState& model,
                              std::span<const Corpus> corpora, int steps,
                              int batch_size, double learning_rate,
                              std::uint64_t seed) {
  if (corpora.empty()) throw Error("combined_finetune: no corpora");
  const auto all = concatenate(corpora, "combined");
  return train_steps(model, OptimizerState::adam(learning_rate), all.pairs, steps,
                     batch_size, seed);
}

TrainResult chained_finetune(const ModelState& model,
                             std::span<const Corpus> sequence, int steps_each,
                             int batch_size, double learning_rate,
                             std::uint64_t seed) {
  if (sequence.empty()) throw Error("chained_finetune: empty sequence");
  TrainResult acc{model, OptimizerState::adam(learning_rate), {}};
  for (std::size_t i = 0; i < sequence.size(); ++i) {
    const auto s = i == 0 ? seed : mix_seed(seed, i);
    auto r = train_steps(acc.model, acc.optimizer, sequence[i].pairs, steps_each,
                         batch_size, s);
    acc.model = std::move(r.model);
    acc.optimizer = std::move(r.optimizer);
    acc.losses.insert(acc.losses.end(), r.losses.begin(), r.losses.end());
  }
  return acc;
}

std::map<Group, std::vector<double>> client_persistence(
    std::span<const RoundReport> rounds, const std::string& client_id) {
  std::map<Group, std::vector<std::vector<std::string>>> kept;
  for (const auto& rr : rounds) {
    for (const auto& c : rr.clients) {
      if (c.client_id != client_id) continue;
      // Full exchanges carry no selection signal.
      if (c.pull_selection.dropped.empty()) continue;
      std::map<Group, std::vector<std::string>> by_group;
      for (auto g : {Group::encoder, Group::decoder, Group::shared}) by_group[g];
      for (const auto& n : c.pull_selection.kept) by_group[group_of(n)].push_back(n);
      for (auto& [g, names] : by_group) kept[g].push_back(std::move(names));
    }
  }
  std::map<Group, std::vector<double>> out;
  for (auto& [g, seq] : kept)
    if (seq.size() >= 2) out[g] = cluster_persistence(seq);
  return out;
}

}  // namespace fedpull
