#include "fedpull/report.hpp"

#include <chrono>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <fstream>
#include <sstream>

namespace fedpull {

using nlohmann::json;

std::string model_hash(const ModelState& model) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, t] : model.tensors) {
    feed(name.data(), name.size());
    for (auto e : t.shape()) feed(&e, sizeof e);
    feed(t.values().data(), t.values().size_bytes());
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json to_json(const EvalResult& e) {
  return json{{"domain", e.domain},
              {"bleu", e.bleu},
              {"token_accuracy", e.token_accuracy},
              {"n_sentences", e.n_sentences}};
}

namespace {

json evals_json(const std::vector<EvalResult>& v) {
  json a = json::array();
  for (const auto& e : v) a.push_back(to_json(e));
  return a;
}

json model_evals_json(const std::vector<ModelEval>& v) {
  json a = json::array();
  for (const auto& m : v) a.push_back({{"model", m.label}, {"evals", evals_json(m.evals)}});
  return a;
}

}  // namespace

json to_json(const SelectionResult& s) {
  json th = json::object();
  for (const auto& [g, v] : s.thresholds) th[std::string(to_string(g))] = v;
  json deltas = json::array();
  for (const auto& d : s.deltas)
    deltas.push_back({{"name", d.name},
                      {"group", std::string(to_string(d.group))},
                      {"norm", d.norm},
                      {"params", d.param_count}});
  return json{{"kept", s.kept}, {"dropped", s.dropped}, {"thresholds", th},
              {"deltas", deltas}};
}

json to_json(const BandwidthRecord& b) {
  return json{{"direction", std::string(to_string(b.direction))},
              {"params_sent", b.params_sent},
              {"params_total", b.params_total},
              {"bytes_sent", b.bytes_sent}};
}

json to_json(const RoundReport& r) {
  json clients = json::array();
  for (const auto& c : r.clients) {
    json j{{"client_id", c.client_id},
           {"train_loss", c.train_loss},
           {"pull_selection", to_json(c.pull_selection)},
           {"bandwidth", {{"pull", to_json(c.pull)}, {"push", to_json(c.push)}}},
           {"evals", evals_json(c.evals)}};
    if (c.push_selection) j["push_selection"] = to_json(*c.push_selection);
    clients.push_back(std::move(j));
  }
  return json{{"round", r.round},
              {"clients", clients},
              {"server_evals", evals_json(r.server_evals)}};
}

json to_json(const ExperimentReport& r) {
  json rounds = json::array();
  std::size_t pulled = 0, pushed = 0, full = 0;
  for (const auto& rr : r.rounds) {
    rounds.push_back(to_json(rr));
    for (const auto& c : rr.clients) {
      pulled += c.pull.params_sent;
      pushed += c.push.params_sent;
      full += c.pull.params_total + c.push.params_total;
    }
  }
  json persistence = json::object();
  for (const auto& [client, groups] : r.persistence) {
    json g = json::object();
    for (const auto& [group, v] : groups) g[std::string(to_string(group))] = v;
    persistence[client] = g;
  }
  return json{{"experiment", r.experiment},
              {"variant", r.variant},
              {"seed", r.seed},
              {"timestamp", r.timestamp},
              {"config", r.config},
              {"pretrained_checkpoint", r.pretrained_checkpoint},
              {"rounds", rounds},
              {"final", model_evals_json(r.final_evals)},
              {"post_finetune", model_evals_json(r.post_finetune)},
              {"cluster_persistence", persistence},
              {"bandwidth_totals",
               {{"params_pulled", pulled},
                {"params_pushed", pushed},
                {"params_full_exchange", full}}}};
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::string metrics_csv(const ExperimentReport& r) {
  std::ostringstream out;
  out << "round,client_id,test_domain,bleu,token_accuracy,params_pulled,params_pushed\n";
  if (!r.rounds.empty()) {
    for (const auto& rr : r.rounds)
      for (const auto& c : rr.clients)
        for (const auto& e : c.evals)
          out << rr.round << ',' << c.client_id << ',' << e.domain << ','
              << fmt(e.bleu) << ',' << fmt(e.token_accuracy) << ','
              << c.pull.params_sent << ',' << c.push.params_sent << '\n';
  } else {
    for (const auto& m : r.final_evals)
      for (const auto& e : m.evals)
        out << 0 << ',' << m.label << ',' << e.domain << ',' << fmt(e.bleu) << ','
            << fmt(e.token_accuracy) << ",0,0\n";
  }
  return out.str();
}

std::string histograms_csv(const ExperimentReport& r) {
  std::ostringstream out;
  out << "round,client_id,group,bucket_lower,count\n";
  for (const auto& rr : r.rounds)
    for (const auto& c : rr.clients) {
      if (c.pull_selection.deltas.empty()) continue;
      for (const auto& h : norm_histogram(c.pull_selection.deltas, r.histogram_bucket_width))
        for (const auto& [lower, count] : h.buckets)
          out << rr.round << ',' << c.client_id << ',' << to_string(h.group) << ','
              << fmt(lower) << ',' << count << '\n';
    }
  return out.str();
}

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open " + tmp.string() + " for writing");
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    f.flush();
    if (!f) throw Error("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::vector<std::filesystem::path> report_write(const ExperimentReport& r,
                                                const std::filesystem::path& directory) {
  std::error_code ec;
  std::filesystem::create_directories(directory, ec);
  if (ec) throw Error("cannot create " + directory.string() + ": " + ec.message());
  const std::vector<std::filesystem::path> paths{
      directory / "report.json", directory / "metrics.csv", directory / "histograms.csv"};
  write_file_atomic(paths[0], to_json(r).dump(1) + "\n");
  write_file_atomic(paths[1], metrics_csv(r));
  write_file_atomic(paths[2], histograms_csv(r));
  return paths;
}

}  // namespace fedpull
