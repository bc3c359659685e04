#include <cmath>
#include <algorithm>
#include <map>
#include <set>

#include "doctest.h"
#include "fedpull/fl.hpp"
#include "fedpull/rng.hpp"

using namespace fedpull;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.d_ffn = 16;
  c.max_len = 10;
  return c;
}

ModelState toy_model(std::map<std::string, std::vector<float>> values) {
  ModelState m;
  for (auto& [name, v] : values) {
    const auto n = static_cast<std::uint32_t>(v.size());
    m.tensors.emplace(name, NamedTensor(name, {n}, std::move(v)));
  }
  return m;
}

ServerState toy_server(const ModelState& m, std::map<std::string, std::size_t> weights) {
  ServerState s;
  s.central_model = m;
  s.total_rounds = 3;
  s.client_weights = weights;
  for (const auto& [_, n] : weights) s.total_n += n;
  return s;
}

std::vector<ClientState> make_clients(const ModelState& init, int k, int steps) {
  const DomainKind kinds[] = {DomainKind::copy, DomainKind::reverse, DomainKind::sort};
  std::vector<ClientState> out;
  for (int i = 0; i < k; ++i) {
    ClientState c;
    c.corpus = generate_domain({kinds[i % 3], 60 + 20 * i, static_cast<std::uint64_t>(i + 1)}, 10);
    c.id = c.corpus.domain;
    c.model = init;
    c.optimizer = OptimizerState::adam(1e-3);
    c.steps_per_round = steps;
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace

TEST_CASE("fedavg: identical updates leave the server unchanged") {
  const auto m = toy_model({{"enc.w", {1, 2, 3}}, {"out.b", {-1, 0.5f}}});
  const auto s = toy_server(m, {{"a", 3}, {"b", 5}, {"c", 7}});
  std::vector<ClientUpdate> ups;
  for (auto [id, n] : {std::pair{"a", 3}, {"b", 5}, {"c", 7}})
    ups.push_back({id, {m.at("enc.w"), m.at("out.b")}, static_cast<std::size_t>(n)});
  const auto next = fedavg_aggregate(s, ups);
  for (const auto& [name, t] : m.tensors)
    for (std::size_t i = 0; i < t.numel(); ++i)
      CHECK(std::abs(next.central_model.at(name).values()[i] - t.values()[i]) <= 1e-6);
}

TEST_CASE("fedavg: two-client weighted example") {
  const auto m = toy_model({{"t", {0, 0}}});
  const auto s = toy_server(m, {{"c1", 1}, {"c2", 3}});
  std::vector<ClientUpdate> ups{{"c2", {NamedTensor("t", {2}, {4, 8})}, 3},
                                {"c1", {NamedTensor("t", {2}, {0, 4})}, 1}};
  const auto next = fedavg_aggregate(s, ups);
  CHECK(next.central_model.at("t").values()[0] == 3.0f);
  CHECK(next.central_model.at("t").values()[1] == 7.0f);
}

TEST_CASE("fedavg: large skewed client weights") {
  const std::map<std::string, std::size_t> sizes{{"wmt", 4468841}, {"os", 4500000},
                                                 {"ted", 143837},  {"php", 39708},
                                                 {"ub", 13246}};
  const auto m = toy_model({{"t", {0}}});
  const auto s = toy_server(m, sizes);
  CHECK(s.total_n == 9165632);
  std::vector<ClientUpdate> ups;
  for (const auto& [id, n] : sizes) ups.push_back({id, {m.at("t")}, n});
  const auto w = aggregation_weights(s, ups).at("t");
  double top2 = 0, total = 0;
  for (const auto& [id, x] : w) {
    total += x;
    if (id == "wmt" || id == "os") top2 += x;
  }
  CHECK(std::abs(total - 1.0) <= 1e-12);
  CHECK(top2 > 0.97);
}

TEST_CASE("fedavg: partial updates renormalize per tensor") {
  const auto m = toy_model({{"a", {10}}, {"b", {20}}, {"c", {30}}});
  const auto s = toy_server(m, {{"x", 1}, {"y", 3}});
  std::vector<ClientUpdate> ups{{"x", {NamedTensor("a", {1}, {1}), NamedTensor("b", {1}, {2})}, 1},
                                {"y", {NamedTensor("a", {1}, {5})}, 3}};
  const auto next = fedavg_aggregate(s, ups);
  CHECK(next.central_model.at("a").values()[0] == 4.0f);  // 0.25 * 1 + 0.75 * 5
  CHECK(next.central_model.at("b").values()[0] == 2.0f);  // only x sent it
  CHECK(next.central_model.at("c").values()[0] == 30.0f);  // nobody sent it
  for (const auto& [name, w] : aggregation_weights(s, ups)) {
    double sum = 0;
    for (const auto& [_, x] : w) sum += x;
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("fedavg: errors") {
  const auto m = toy_model({{"t", {0, 0}}});
  const auto s = toy_server(m, {{"c1", 1}, {"c2", 1}});
  std::vector<ClientUpdate> bad_shape{{"c2", {NamedTensor("t", {3}, {1, 2, 3})}, 1}};
  try {
    (void)fedavg_aggregate(s, bad_shape);
    FAIL("expected an error");
  } catch (const Error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("c2") != std::string::npos);
    CHECK(msg.find("'t'") != std::string::npos);
  }
  std::vector<ClientUpdate> unknown{{"c1", {NamedTensor("u", {2}, {1, 2})}, 1}};
  CHECK_THROWS_AS(fedavg_aggregate(s, unknown), Error);
  std::vector<ClientUpdate> dup{{"c1", {m.at("t"), m.at("t")}, 1}};
  CHECK_THROWS_AS(fedavg_aggregate(s, dup), Error);
  std::vector<ClientUpdate> twice{{"c1", {m.at("t")}, 1}, {"c1", {m.at("t")}, 1}};
  CHECK_THROWS_AS(fedavg_aggregate(s, twice), Error);
}

TEST_CASE("fedavg: equal-data symmetry") {
  Rng rng(3);
  std::vector<float> v(50);
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1, 1));
  const auto m = toy_model({{"t", std::vector<float>(50, 0.0f)}});
  const auto s = toy_server(m, {{"p", 40}, {"q", 40}});
  const NamedTensor t("t", {50}, v);
  std::vector<ClientUpdate> ups{{"p", {t}, 40}, {"q", {t}, 40}};
  const auto next = fedavg_aggregate(s, ups);
  for (std::size_t i = 0; i < v.size(); ++i)
    CHECK(std::abs(next.central_model.at("t").values()[i] - v[i]) <= 1e-6);
}

TEST_CASE("server invariants") {
  const auto m = init_model(tiny());
  auto clients = make_clients(m, 2, 1);
  auto s = make_server(m, clients, 2);
  CHECK(s.total_n == clients[0].corpus.size() + clients[1].corpus.size());
  s.total_n += 1;
  CHECK_THROWS_AS(s.check(), Error);
  clients[1].id = clients[0].id;
  CHECK_THROWS_AS(make_server(m, clients, 2), Error);
}

TEST_CASE("run_round: K = 1 full round is a fixed point") {
  const auto m = init_model(tiny());
  auto clients = make_clients(m, 1, 5);
  auto s = make_server(m, clients, 1);
  const auto expected =
      train_steps(m, clients[0].optimizer, clients[0].corpus.pairs, 5, 8,
                  mix_seed(mix_seed(11, 0), string_seed(clients[0].id)))
          .model;
  RoundOptions opt;
  opt.batch_size = 8;
  opt.seed = 11;
  const auto r = run_round(s, clients, PullPolicy{}, opt);
  CHECK(s.round == 1);
  CHECK(s.central_model == expected);
  CHECK(clients[0].model == expected);
  CHECK(r.clients[0].pull.params_sent == m.param_count());
  CHECK_THROWS_AS(run_round(s, clients, PullPolicy{}, opt), Error);  // round == total
}

TEST_CASE("run_round: round 0 is a full exchange, later dp rounds select exactly") {
  const auto m = init_model(tiny());
  auto clients = make_clients(m, 3, 4);
  auto s = make_server(m, clients, 3);
  PullPolicy p{PullMode::dp_less, 0.5, PullScope::pull_only, 0};
  RoundOptions opt;
  opt.batch_size = 8;
  opt.seed = 5;
  const auto r0 = run_round(s, clients, p, opt);
  for (const auto& c : r0.clients) {
    CHECK(c.pull.params_sent == m.param_count());
    CHECK(c.push.params_sent == m.param_count());
    CHECK(c.pull_selection.dropped.empty());
  }
  const auto r1 = run_round(s, clients, p, opt);
  for (const auto& c : r1.clients) {
    REQUIRE(c.pull_selection.deltas.size() == m.tensors.size());
    // Re-derive the selection from the logged deltas.
    std::set<std::string> kept(c.pull_selection.kept.begin(), c.pull_selection.kept.end());
    for (auto g : {Group::encoder, Group::decoder, Group::shared}) {
      std::vector<DeltaRecord> grp;
      for (const auto& d : c.pull_selection.deltas)
        if (d.group == g) grp.push_back(d);
      std::sort(grp.begin(), grp.end(), [](const auto& a, const auto& b) {
        return a.norm != b.norm ? a.norm < b.norm : a.name < b.name;
      });
      const auto k = static_cast<std::size_t>(std::ceil(0.5 * static_cast<double>(grp.size())));
      for (std::size_t i = 0; i < grp.size(); ++i) CHECK(kept.contains(grp[i].name) == (i < k));
    }
    CHECK(c.pull.params_sent < c.pull.params_total);
    CHECK(c.push.params_sent == c.push.params_total);  // pull_only pushes everything
  }
  for (const auto& c : clients) CHECK(c.model == s.central_model);
}

TEST_CASE("run_round: push_and_pull overwrites only the push selection") {
  const auto m = init_model(tiny());
  auto clients = make_clients(m, 2, 3);
  auto s = make_server(m, clients, 2);
  PullPolicy p{PullMode::dp_less, 1.0 / 3.0, PullScope::push_and_pull, 0};
  RoundOptions opt;
  opt.batch_size = 8;
  (void)run_round(s, clients, p, opt);
  const auto before = clients;
  const auto r = run_round(s, clients, p, opt);
  for (std::size_t k = 0; k < clients.size(); ++k) {
    const auto& cr = r.clients[k];
    REQUIRE(cr.push_selection.has_value());
    std::set<std::string> pushed(cr.push_selection->kept.begin(), cr.push_selection->kept.end());
    CHECK(cr.push.params_sent < cr.push.params_total);
    for (const auto& [name, t] : clients[k].model.tensors) {
      if (pushed.contains(name))
        CHECK(t == s.central_model.at(name));
      else
        CHECK(t == clients[k].snapshot->at(name));  // kept its own trained value
    }
  }
  (void)before;
}

TEST_CASE("run_round: results do not depend on the thread count") {
  const auto m = init_model(tiny());
  PullPolicy p{PullMode::dp_greater, 0.5, PullScope::pull_only, 0};
  auto run = [&](int threads) {
    auto clients = make_clients(m, 3, 3);
    auto s = make_server(m, clients, 2);
    RoundOptions opt;
    opt.batch_size = 8;
    opt.threads = threads;
    (void)run_round(s, clients, p, opt);
    (void)run_round(s, clients, p, opt);
    return s.central_model;
  };
  CHECK(run(1) == run(3));
}

TEST_CASE("run_round: client errors carry the client id") {
  const auto m = init_model(tiny());
  auto clients = make_clients(m, 2, 2);
  auto s = make_server(m, clients, 2);
  clients[1].corpus.pairs.clear();
  try {
    (void)run_round(s, clients, PullPolicy{}, RoundOptions{});
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("client '" + clients[1].id + "'") != std::string::npos);
  }
}

TEST_CASE("centralized baselines") {
  const auto m = init_model(tiny());
  const auto a = generate_domain({DomainKind::copy, 50, 1}, 10);
  const auto b = generate_domain({DomainKind::shift3, 40, 2}, 10);

  const std::vector<Corpus> one{a};
  const auto comb = combined_finetune(m, one, 6, 8, 1e-3, 9);
  CHECK(comb.model == train_steps(m, OptimizerState::adam(1e-3), a.pairs, 6, 8, 9).model);
  const std::vector<Corpus> two{a, b};
  CHECK(concatenate(two, "x").size() == a.size() + b.size());
  CHECK_THROWS_AS(combined_finetune(m, {}, 1, 8, 1e-3, 1), Error);

  const auto ch1 = chained_finetune(m, one, 6, 8, 1e-3, 9);
  CHECK(ch1.model == comb.model);
  const auto ch2 = chained_finetune(m, two, 4, 8, 1e-3, 9);
  CHECK(ch2.optimizer.step == 8);
  CHECK(ch2.losses.size() == 8);
  CHECK_THROWS_AS(chained_finetune(m, {}, 1, 8, 1e-3, 1), Error);
}

TEST_CASE("local_finetune with zero steps is a no-op") {
  const auto m = init_model(tiny());
  auto clients = make_clients(m, 1, 1);
  const auto out = local_finetune(clients[0], 0, 8, 1);
  CHECK(out.model == clients[0].model);
  const auto moved = local_finetune(clients[0], 3, 8, 1);
  CHECK(!(moved.model == clients[0].model));
  CHECK(moved.optimizer.step == 3);
}

TEST_CASE("client_persistence reads dp rounds only") {
  RoundReport r0, r1, r2;
  ClientRoundReport full;
  full.client_id = "c";
  full.pull_selection.kept = {"enc.a", "enc.b", "dec.a"};
  r0.clients = {full};
  ClientRoundReport s1 = full, s2 = full;
  s1.pull_selection.kept = {"enc.a", "enc.b", "dec.a"};
  s1.pull_selection.dropped = {"enc.c", "dec.b"};
  s2.pull_selection.kept = {"enc.b", "enc.c", "dec.a"};
  s2.pull_selection.dropped = {"enc.a", "dec.b"};
  r1.clients = {s1};
  r2.clients = {s2};
  const std::vector<RoundReport> rounds{r0, r1, r2};
  const auto p = client_persistence(rounds, "c");
  CHECK(p.at(Group::encoder) == std::vector<double>{1.0 / 3.0});
  CHECK(p.at(Group::decoder) == std::vector<double>{1.0});
  CHECK(p.at(Group::shared) == std::vector<double>{1.0});  // both empty
}
