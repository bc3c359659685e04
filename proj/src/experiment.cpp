#include "fedpull/experiment.hpp"

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "fedpull/rng.hpp"

namespace fedpull {

using nlohmann::json;

std::string_view to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::baseline_matrix:
      return "baseline_matrix";
    case ExperimentKind::central_combination:
      return "central_combination";
    case ExperimentKind::central_chained:
      return "central_chained";
    case ExperimentKind::fl:
      return "fl";
    case ExperimentKind::fl_rounds_ablation:
      return "fl_rounds_ablation";
    case ExperimentKind::dp_compare:
      return "dp_compare";
    case ExperimentKind::controllers_parity:
      return "controllers_parity";
  }
  return "fl";
}

ExperimentKind experiment_kind_from_string(std::string_view s) {
  for (auto k : {ExperimentKind::baseline_matrix, ExperimentKind::central_combination,
                 ExperimentKind::central_chained, ExperimentKind::fl,
                 ExperimentKind::fl_rounds_ablation, ExperimentKind::dp_compare,
                 ExperimentKind::controllers_parity})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown experiment '" + std::string(s) + "'");
}

namespace {

// Tracks which keys of an object were consumed so leftovers can be reported.
class Fields {
 public:
  Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw ConfigError(where_ + ": expected a JSON object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    auto it = j_.find(key);
    if (it == j_.end()) return;
    used_.insert(key);
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  const json* sub(const char* key) {
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    used_.insert(key);
    return &*it;
  }

  void finish() const {
    for (const auto& [k, _] : j_.items())
      if (!used_.contains(k)) throw ConfigError(where_ + ": unknown key '" + k + "'");
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> used_;
};

template <typename F>
auto config_guard(F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

ModelConfig model_from_json(const json& j) {
  ModelConfig m;
  Fields f(j, "model");
  f.get("vocab_size", m.vocab_size);
  f.get("d_model", m.d_model);
  f.get("n_heads", m.n_heads);
  f.get("enc_layers", m.enc_layers);
  f.get("dec_layers", m.dec_layers);
  f.get("d_ffn", m.d_ffn);
  f.get("max_len", m.max_len);
  f.get("seed", m.seed);
  f.finish();
  return m;
}

json model_to_json(const ModelConfig& m) {
  return json{{"vocab_size", m.vocab_size}, {"d_model", m.d_model},
              {"n_heads", m.n_heads},       {"enc_layers", m.enc_layers},
              {"dec_layers", m.dec_layers}, {"d_ffn", m.d_ffn},
              {"max_len", m.max_len},       {"seed", m.seed}};
}

json policy_to_json(const PullPolicy& p) {
  return json{{"mode", std::string(to_string(p.mode))},
              {"kept_fraction", p.effective_fraction()},
              {"scope", std::string(to_string(p.scope))},
              {"seed", p.seed}};
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  Fields f(j, "config");
  std::string name;
  f.get("experiment", name);
  if (name.empty()) throw ConfigError("config: missing 'experiment'");
  c.experiment = experiment_kind_from_string(name);

  if (const json* d = f.sub("domains")) {
    if (!d->is_array()) throw ConfigError("domains: expected an array");
    c.domains.clear();
    for (const auto& item : *d) {
      Fields df(item, "domains[]");
      std::string kind;
      DomainSpec s;
      df.get("kind", kind);
      df.get("size", s.size);
      df.get("seed", s.seed);
      df.finish();
      s.kind = config_guard([&] { return domain_kind_from_string(kind); });
      c.domains.push_back(s);
    }
  }
  if (const json* m = f.sub("model")) c.model = model_from_json(*m);
  if (const json* p = f.sub("policy")) {
    Fields pf(*p, "policy");
    std::string mode = "full", scope = "pull_only";
    pf.get("mode", mode);
    pf.get("kept_fraction", c.policy.kept_fraction);
    pf.get("scope", scope);
    pf.get("seed", c.policy.seed);
    pf.finish();
    c.policy.mode = config_guard([&] { return pull_mode_from_string(mode); });
    c.policy.scope = config_guard([&] { return pull_scope_from_string(scope); });
  }
  std::string pre;
  f.get("pretrain_domain", pre);
  if (!pre.empty()) c.pretrain_domain = config_guard([&] { return domain_kind_from_string(pre); });
  std::vector<std::string> order;
  f.get("chain_order", order);
  for (const auto& o : order)
    c.chain_order.push_back(config_guard([&] { return domain_kind_from_string(o); }));

  f.get("pretrain_steps", c.pretrain_steps);
  f.get("baseline_steps", c.baseline_steps);
  f.get("steps_per_round", c.steps_per_round);
  f.get("rounds", c.rounds);
  f.get("rounds_list", c.rounds_list);
  f.get("finetune_steps", c.finetune_steps);
  f.get("post_fl_finetune_steps", c.post_fl_finetune_steps);
  f.get("batch_size", c.batch_size);
  f.get("learning_rate", c.learning_rate);
  f.get("parity_fraction", c.parity_fraction);
  f.get("test_size", c.test_size);
  f.get("dev_size", c.dev_size);
  f.get("eval_every_round", c.eval_every_round);
  f.get("histogram_bucket_width", c.histogram_bucket_width);
  f.get("seeds", c.seeds);
  std::string out, cache;
  f.get("output_dir", out);
  if (!out.empty()) c.output_dir = out;
  f.get("cache_dir", cache);
  if (!cache.empty()) c.cache_dir = cache;
  f.finish();
  return c;
}

json ExperimentConfig::to_json() const {
  json domains_j = json::array();
  for (const auto& d : domains)
    domains_j.push_back({{"kind", std::string(fedpull::to_string(d.kind))},
                         {"size", d.size},
                         {"seed", d.seed}});
  json order = json::array();
  for (auto k : chain_order) order.push_back(std::string(fedpull::to_string(k)));
  // output_dir and cache_dir are left out: they do not affect results.
  return json{{"experiment", std::string(fedpull::to_string(experiment))},
              {"domains", domains_j},
              {"model", model_to_json(model)},
              {"pretrain_domain", std::string(fedpull::to_string(pretrain_domain))},
              {"pretrain_steps", pretrain_steps},
              {"baseline_steps", baseline_steps},
              {"steps_per_round", steps_per_round},
              {"rounds", rounds},
              {"rounds_list", rounds_list},
              {"finetune_steps", finetune_steps},
              {"chain_order", order},
              {"post_fl_finetune_steps", post_fl_finetune_steps},
              {"batch_size", batch_size},
              {"learning_rate", learning_rate},
              {"policy", policy_to_json(policy)},
              {"parity_fraction", parity_fraction},
              {"test_size", test_size},
              {"dev_size", dev_size},
              {"eval_every_round", eval_every_round},
              {"histogram_bucket_width", histogram_bucket_width},
              {"seeds", seeds}};
}

void ExperimentConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  require(!seeds.empty(), "seeds must be nonempty");
  require(!domains.empty(), "domains must be nonempty");
  config_guard([&] {
    model.validate();
    policy.validate();
    return 0;
  });
  require(model.vocab_size >= Vocab::kFirstContent + Vocab::kContentSymbols,
          "model.vocab_size must be >= " +
              std::to_string(Vocab::kFirstContent + Vocab::kContentSymbols));
  require(model.max_len >= 5, "model.max_len must be >= 5");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(learning_rate > 0.0, "learning_rate must be positive");
  require(test_size >= 1, "test_size must be >= 1");
  require(dev_size >= 0, "dev_size must be >= 0");
  require(histogram_bucket_width > 0.0, "histogram_bucket_width must be positive");
  require(pretrain_steps >= 0, "pretrain_steps must be >= 0");
  require(post_fl_finetune_steps >= 0, "post_fl_finetune_steps must be >= 0");

  std::set<DomainKind> kinds;
  for (const auto& d : domains) {
    config_guard([&] {
      d.validate();
      return 0;
    });
    require(kinds.insert(d.kind).second,
            "domain '" + std::string(fedpull::to_string(d.kind)) + "' listed twice");
    require(test_size + dev_size < d.size,
            "domain '" + std::string(fedpull::to_string(d.kind)) +
                "' too small for test_size + dev_size");
  }
  require(kinds.contains(pretrain_domain), "pretrain_domain is not among domains");

  switch (experiment) {
    case ExperimentKind::fl:
    case ExperimentKind::dp_compare:
    case ExperimentKind::controllers_parity:
      require(rounds >= 1, "experiment requires rounds >= 1");
      require(steps_per_round >= 1, "steps_per_round must be >= 1");
      break;
    case ExperimentKind::fl_rounds_ablation: {
      require(!rounds_list.empty(), "rounds_list must be nonempty");
      require(rounds >= 1 && steps_per_round >= 1,
              "rounds and steps_per_round must be >= 1");
      const int total = rounds * steps_per_round;
      for (int r : rounds_list)
        require(r >= 1 && total % r == 0,
                "rounds_list entry " + std::to_string(r) + " does not divide " +
                    std::to_string(total) + " total steps");
      break;
    }
    case ExperimentKind::baseline_matrix:
      require(baseline_steps >= 0, "baseline_steps must be >= 0");
      break;
    case ExperimentKind::central_combination:
    case ExperimentKind::central_chained:
      require(finetune_steps >= 0, "finetune_steps must be >= 0");
      break;
  }
  if (experiment == ExperimentKind::controllers_parity)
    require(parity_fraction > 0.0 && parity_fraction <= 1.0,
            "parity_fraction must be in (0, 1]");
  if (!chain_order.empty()) {
    std::set<DomainKind> o(chain_order.begin(), chain_order.end());
    require(o == kinds && o.size() == chain_order.size(),
            "chain_order must list every domain exactly once");
  }
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  auto cfg = ExperimentConfig::from_json(j);
  cfg.validate();
  return cfg;
}

std::vector<Corpus> SeedData::tests() const {
  std::vector<Corpus> out;
  for (const auto& s : splits) out.push_back(s.test);
  return out;
}

std::vector<Corpus> SeedData::trains() const {
  std::vector<Corpus> out;
  for (const auto& s : splits) out.push_back(s.train);
  return out;
}

namespace {

std::size_t domain_index(const ExperimentConfig& cfg, DomainKind k) {
  for (std::size_t i = 0; i < cfg.domains.size(); ++i)
    if (cfg.domains[i].kind == k) return i;
  throw ConfigError("domain '" + std::string(to_string(k)) + "' not configured");
}

std::mutex cache_mutex;
std::map<std::string, ModelState> memory_cache;

}  // namespace

SeedData prepare_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  SeedData d;
  d.seed = seed;
  for (const auto& spec : cfg.domains) {
    DomainSpec s = spec;
    s.seed = mix_seed(spec.seed, seed);
    const auto corpus = generate_domain(s, cfg.model.max_len);
    d.splits.push_back(split(corpus, static_cast<std::size_t>(cfg.test_size),
                             static_cast<std::size_t>(cfg.dev_size),
                             mix_seed(s.seed, 0x73706c6974ULL)));
  }
  d.pretrained = train_from_scratch(cfg, d, domain_index(cfg, cfg.pretrain_domain),
                                    cfg.pretrain_steps);
  return d;
}

ModelState train_from_scratch(const ExperimentConfig& cfg, const SeedData& data,
                              std::size_t domain_index, int steps) {
  const auto& spec = cfg.domains.at(domain_index);
  // Everything that determines the trained weights.
  const json key_j{{"model", model_to_json(cfg.model)},
                   {"domain", std::string(to_string(spec.kind))},
                   {"size", spec.size},
                   {"domain_seed", spec.seed},
                   {"run_seed", data.seed},
                   {"steps", steps},
                   {"batch_size", cfg.batch_size},
                   {"learning_rate", cfg.learning_rate},
                   {"test_size", cfg.test_size},
                   {"dev_size", cfg.dev_size}};
  const auto key = string_seed(key_j.dump());
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(key));
  const std::string name = std::string("scratch-") + hex;

  {
    std::lock_guard lock(cache_mutex);
    if (auto it = memory_cache.find(name); it != memory_cache.end()) return it->second;
  }
  const auto dir = cfg.cache_dir.value_or(cfg.output_dir / ".cache");
  const auto file = dir / (name + ".ckpt");
  std::optional<ModelState> model;
  if (std::ifstream in(file, std::ios::binary); in) {
    try {
      model = read_checkpoint(in);
      if (model->config != cfg.model) model.reset();
    } catch (const std::exception&) {
      model.reset();
    }
  }
  if (!model) {
    ModelConfig mc = cfg.model;
    mc.seed = mix_seed(cfg.model.seed, data.seed);
    auto init = init_model(mc);
    init.config = cfg.model;
    auto r = train_steps(init, OptimizerState::adam(cfg.learning_rate),
                         data.splits.at(domain_index).train.pairs, steps,
                         cfg.batch_size, mix_seed(data.seed, key));
    model = std::move(r.model);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (!ec) {
      std::ostringstream buf;
      write_checkpoint(buf, *model);
      try {
        write_file_atomic(file, buf.str());
      } catch (const std::exception&) {
        // The cache is an optimization; an unwritable directory is not fatal.
      }
    }
  }
  std::lock_guard lock(cache_mutex);
  memory_cache.emplace(name, *model);
  return *model;
}

int client_threads() {
  if (const char* env = std::getenv("FEDPULL_THREADS"); env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1 || v > 1024)
      throw ConfigError("FEDPULL_THREADS must be a positive integer, got '" +
                        std::string(env) + "'");
    return static_cast<int>(v);
  }
  return std::max(1, omp_get_max_threads());
}

namespace {

ExperimentReport base_report(const ExperimentConfig& cfg, const SeedData& data,
                             const std::string& variant) {
  ExperimentReport r;
  r.experiment = std::string(to_string(cfg.experiment));
  r.variant = variant;
  r.seed = data.seed;
  r.timestamp = utc_timestamp();
  r.config = cfg.to_json();
  r.pretrained_checkpoint = model_hash(data.pretrained);
  r.histogram_bucket_width = cfg.histogram_bucket_width;
  return r;
}

}  // namespace

ExperimentReport run_fl_variant(const ExperimentConfig& cfg, const SeedData& data,
                                const PullPolicy& policy, int rounds,
                                int steps_per_round, const std::string& variant) {
  auto report = base_report(cfg, data, variant);
  report.config["policy"] = policy_to_json(policy);
  report.config["rounds"] = rounds;
  report.config["steps_per_round"] = steps_per_round;

  const int threads = client_threads();
  const auto tests = data.tests();
  std::vector<ClientState> clients;
  for (std::size_t i = 0; i < cfg.domains.size(); ++i) {
    ClientState c;
    c.id = std::string(to_string(cfg.domains[i].kind));
    c.corpus = data.splits[i].train;
    c.model = data.pretrained;
    c.optimizer = OptimizerState::adam(cfg.learning_rate);
    c.steps_per_round = steps_per_round;
    clients.push_back(std::move(c));
  }
  auto server = make_server(data.pretrained, clients, std::max(rounds, 1));
  const auto fl_seed = mix_seed(data.seed, 0x666cULL);
  RoundOptions opt;
  opt.batch_size = cfg.batch_size;
  opt.seed = fl_seed;
  opt.threads = threads;
  for (int r = 0; r < rounds; ++r) {
    opt.tests = cfg.eval_every_round || r + 1 == rounds ? std::span<const Corpus>(tests)
                                                         : std::span<const Corpus>();
    report.rounds.push_back(run_round(server, clients, policy, opt));
  }

  std::vector<const ModelState*> models{&server.central_model};
  for (const auto& c : clients) models.push_back(&c.model);
  const auto final = evaluate_matrix(models, tests, threads);
  report.final_evals.push_back({"server", final[0]});
  for (std::size_t k = 0; k < clients.size(); ++k)
    report.final_evals.push_back({clients[k].id, final[k + 1]});

  if (cfg.post_fl_finetune_steps > 0) {
    std::vector<ClientState> tuned(clients.size());
    std::vector<std::exception_ptr> errors(clients.size());
#pragma omp parallel for schedule(dynamic) num_threads(threads)
    for (std::ptrdiff_t k = 0; k < static_cast<std::ptrdiff_t>(clients.size()); ++k) {
      const auto& c = clients[static_cast<std::size_t>(k)];
      try {
        tuned[static_cast<std::size_t>(k)] =
            local_finetune(c, cfg.post_fl_finetune_steps, cfg.batch_size,
                           mix_seed(fl_seed, string_seed("local:" + c.id)));
      } catch (...) {
        errors[static_cast<std::size_t>(k)] = std::current_exception();
      }
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
    std::vector<const ModelState*> tm;
    for (const auto& c : tuned) tm.push_back(&c.model);
    const auto ev = evaluate_matrix(tm, tests, threads);
    for (std::size_t k = 0; k < tuned.size(); ++k)
      report.post_finetune.push_back({tuned[k].id, ev[k]});
  }

  if (policy.mode != PullMode::full)
    for (const auto& c : clients) {
      auto p = client_persistence(report.rounds, c.id);
      if (!p.empty()) report.persistence[c.id] = std::move(p);
    }
  return report;
}

ExperimentReport run_baseline_matrix(const ExperimentConfig& cfg, const SeedData& data) {
  auto report = base_report(cfg, data, "baseline_matrix");
  std::vector<ModelState> models;
  for (std::size_t i = 0; i < cfg.domains.size(); ++i)
    models.push_back(train_from_scratch(cfg, data, i, cfg.baseline_steps));
  std::vector<const ModelState*> ptrs;
  for (const auto& m : models) ptrs.push_back(&m);
  const auto ev = evaluate_matrix(ptrs, data.tests(), client_threads());
  for (std::size_t i = 0; i < models.size(); ++i)
    report.final_evals.push_back({std::string(to_string(cfg.domains[i].kind)), ev[i]});
  return report;
}

ExperimentReport run_central_combination(const ExperimentConfig& cfg,
                                         const SeedData& data) {
  auto report = base_report(cfg, data, "central_combination");
  const auto trains = data.trains();
  const auto r = combined_finetune(data.pretrained, trains, cfg.finetune_steps,
                                   cfg.batch_size, cfg.learning_rate,
                                   mix_seed(data.seed, 0x636f6d62ULL));
  const ModelState* ptrs[] = {&data.pretrained, &r.model};
  const auto ev = evaluate_matrix(ptrs, data.tests(), client_threads());
  report.final_evals.push_back({"pretrained", ev[0]});
  report.final_evals.push_back({"combined", ev[1]});
  return report;
}

ExperimentReport run_central_chained(const ExperimentConfig& cfg, const SeedData& data) {
  auto report = base_report(cfg, data, "central_chained");
  std::vector<std::size_t> order;
  if (cfg.chain_order.empty()) {
    for (std::size_t i = 0; i < cfg.domains.size(); ++i) order.push_back(i);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) {
      return cfg.domains[a].size > cfg.domains[b].size;
    });
  } else {
    for (auto k : cfg.chain_order) order.push_back(domain_index(cfg, k));
  }
  std::vector<Corpus> seq;
  json names = json::array();
  for (auto i : order) {
    seq.push_back(data.splits[i].train);
    names.push_back(seq.back().domain);
  }
  report.config["chain_order"] = names;
  const int each = cfg.finetune_steps / static_cast<int>(seq.size());
  report.config["steps_each"] = each;
  const auto r = chained_finetune(data.pretrained, seq, each, cfg.batch_size,
                                  cfg.learning_rate, mix_seed(data.seed, 0x636861ULL));
  const ModelState* ptrs[] = {&data.pretrained, &r.model};
  const auto ev = evaluate_matrix(ptrs, data.tests(), client_threads());
  report.final_evals.push_back({"pretrained", ev[0]});
  report.final_evals.push_back({"chained", ev[1]});
  return report;
}

std::vector<ExperimentReport> run_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto data = prepare_seed(cfg, seed);
  std::vector<ExperimentReport> out;
  auto with_mode = [&](PullMode m) {
    PullPolicy p = cfg.policy;
    p.mode = m;
    p.scope = PullScope::pull_only;
    return p;
  };
  switch (cfg.experiment) {
    case ExperimentKind::baseline_matrix:
      out.push_back(run_baseline_matrix(cfg, data));
      break;
    case ExperimentKind::central_combination:
      out.push_back(run_central_combination(cfg, data));
      break;
    case ExperimentKind::central_chained:
      out.push_back(run_central_chained(cfg, data));
      break;
    case ExperimentKind::fl:
      out.push_back(run_fl_variant(cfg, data, cfg.policy, cfg.rounds,
                                   cfg.steps_per_round, "fl"));
      break;
    case ExperimentKind::fl_rounds_ablation: {
      const int total = cfg.rounds * cfg.steps_per_round;
      for (int r : cfg.rounds_list)
        out.push_back(run_fl_variant(cfg, data, cfg.policy, r, total / r,
                                     "rounds_" + std::to_string(r)));
      break;
    }
    case ExperimentKind::dp_compare:
      for (auto m : {PullMode::full, PullMode::dp_less, PullMode::dp_greater,
                     PullMode::random})
        out.push_back(run_fl_variant(cfg, data, with_mode(m), cfg.rounds,
                                     cfg.steps_per_round, std::string(to_string(m))));
      break;
    case ExperimentKind::controllers_parity: {
      out.push_back(run_fl_variant(cfg, data, with_mode(PullMode::full), cfg.rounds,
                                   cfg.steps_per_round, "full"));
      PullPolicy p = cfg.policy;
      if (p.mode == PullMode::full) p.mode = PullMode::dp_less;
      p.scope = PullScope::push_and_pull;
      p.kept_fraction = cfg.parity_fraction;
      out.push_back(run_fl_variant(cfg, data, p, cfg.rounds, cfg.steps_per_round,
                                   "controllers_parity"));
      break;
    }
  }
  return out;
}

std::string canonical_report(const ExperimentReport& r) {
  auto j = to_json(r);
  j.erase("timestamp");
  return j.dump(1);
}

namespace {

json summarize(const ExperimentReport& r) {
  json s{{"variant", r.variant}, {"pretrained_checkpoint", r.pretrained_checkpoint}};
  json models = json::object();
  for (const auto& m : r.final_evals)
    models[m.label] = {{"mean_token_accuracy", mean_accuracy(m.evals)},
                       {"mean_bleu", mean_bleu(m.evals)}};
  s["final"] = models;
  std::size_t pulled = 0, pushed = 0, total = 0;
  for (const auto& rr : r.rounds)
    for (const auto& c : rr.clients) {
      pulled += c.pull.params_sent;
      pushed += c.push.params_sent;
      total += c.pull.params_total + c.push.params_total;
    }
  s["params_pulled"] = pulled;
  s["params_pushed"] = pushed;
  s["params_full_exchange"] = total;
  return s;
}

void write_seed(const std::filesystem::path& dir,
                const std::vector<ExperimentReport>& reports) {
  if (reports.size() == 1) {
    report_write(reports[0], dir);
    return;
  }
  json summary = json::array();
  for (const auto& r : reports) {
    report_write(r, dir / r.variant);
    summary.push_back(summarize(r));
  }
  write_file_atomic(dir / "summary.json", summary.dump(1) + "\n");
}

}  // namespace

std::vector<std::filesystem::path> run_experiment(const ExperimentConfig& cfg,
                                                  const RunOptions& options) {
  cfg.validate();
  ExperimentConfig c = cfg;
  if (options.out) {
    c.output_dir = *options.out;
  }
  const auto root = c.output_dir / std::string(to_string(c.experiment));
  std::vector<std::filesystem::path> dirs;
  for (auto s : c.seeds) dirs.push_back(root / std::to_string(s));

  const std::size_t n = c.seeds.size();
  const auto workers = static_cast<std::size_t>(
      std::clamp<int>(options.seed_parallel, 1, static_cast<int>(n)));
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        write_seed(dirs[i], run_seed(c, c.seeds[i]));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return dirs;
}

}  // namespace fedpull
