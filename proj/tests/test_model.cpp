#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "doctest.h"
#include "fedpull/data.hpp"
#include "fedpull/metrics.hpp"
#include "fedpull/model.hpp"
#include "fedpull/rng.hpp"

using namespace fedpull;

namespace {

std::vector<SentencePair> random_batch(Rng& rng, const ModelConfig& c, int n) {
  std::vector<SentencePair> out;
  for (int i = 0; i < n; ++i) {
    SentencePair p;
    const auto ls = 1 + rng.below(static_cast<std::uint64_t>(c.max_len - 2));
    const auto lt = 1 + rng.below(static_cast<std::uint64_t>(c.max_len - 2));
    for (std::uint64_t j = 0; j < ls; ++j)
      p.source.push_back(static_cast<TokenId>(4 + rng.below(static_cast<std::uint64_t>(c.vocab_size - 4))));
    for (std::uint64_t j = 0; j < lt; ++j)
      p.target.push_back(static_cast<TokenId>(4 + rng.below(static_cast<std::uint64_t>(c.vocab_size - 4))));
    out.push_back(std::move(p));
  }
  return out;
}

double smoothed(const std::vector<double>& v, std::size_t from, std::size_t n) {
  return std::accumulate(v.begin() + static_cast<std::ptrdiff_t>(from),
                         v.begin() + static_cast<std::ptrdiff_t>(from + n), 0.0) /
         static_cast<double>(n);
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c;
  c.n_heads = 3;
  try {
    c.validate();
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()) == "d_model not divisible by n_heads");
  }
  CHECK_THROWS_AS(init_model(c), Error);
  ModelConfig z;
  z.d_ffn = 0;
  CHECK_THROWS_AS(z.validate(), Error);
}

TEST_CASE("tensor names follow the naming scheme") {
  const ModelConfig c;
  std::set<std::string> expected{"emb.tok", "emb.pos", "out.w", "out.b"};
  for (int i = 0; i < c.enc_layers; ++i) {
    const auto p = "enc." + std::to_string(i) + ".";
    for (auto s : {"attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.w1", "ffn.b1", "ffn.w2",
                   "ffn.b2", "ln1.g", "ln1.b", "ln2.g", "ln2.b"})
      expected.insert(p + s);
  }
  for (int i = 0; i < c.dec_layers; ++i) {
    const auto p = "dec." + std::to_string(i) + ".";
    for (auto s : {"attn.wq", "attn.wk", "attn.wv", "attn.wo", "xattn.wq", "xattn.wk",
                   "xattn.wv", "xattn.wo", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2", "ln1.g",
                   "ln1.b", "ln2.g", "ln2.b", "ln3.g", "ln3.b"})
      expected.insert(p + s);
  }
  const auto m = init_model(c);
  const auto names = m.names();
  CHECK(std::set<std::string>(names.begin(), names.end()) == expected);
  CHECK(std::is_sorted(names.begin(), names.end()));
}

TEST_CASE("parameter count matches the closed form") {
  const ModelConfig c;
  const std::size_t V = 44, d = 32, f = 64, L = 16;
  const std::size_t ffn = d * f + f + f * d + d;
  const std::size_t enc = 4 * d * d + ffn + 2 * 2 * d;
  const std::size_t dec = 8 * d * d + ffn + 3 * 2 * d;
  const std::size_t shared = V * d + L * d + V * d + V;
  const std::size_t closed = shared + 2 * enc + 2 * dec;
  CHECK(closed == 45356);
  CHECK(parameter_count(c) == closed);
  CHECK(init_model(c).param_count() == closed);
}

TEST_CASE("init is deterministic and follows the init contract") {
  const ModelConfig c;
  CHECK(init_model(c) == init_model(c));
  ModelConfig c2 = c;
  c2.seed = 2;
  CHECK(!(init_model(c) == init_model(c2)));
  const auto m = init_model(c);
  for (auto v : m.at("enc.0.ln1.g").values()) CHECK(v == 1.0f);
  for (auto v : m.at("dec.1.ffn.b1").values()) CHECK(v == 0.0f);
  const double s = std::sqrt(6.0 / (32 + 64));
  for (auto v : m.at("enc.0.ffn.w1").values()) CHECK(std::abs(v) <= s);
}

TEST_CASE("forward_loss: near ln V when untrained, errors on bad input") {
  const ModelConfig c;
  const auto m = init_model(c);
  Rng rng(1);
  const auto batch = random_batch(rng, c, 8);
  const double loss = forward_loss(m, batch);
  CHECK(loss > 0.85 * std::log(44.0));
  CHECK(loss < 1.15 * std::log(44.0));
  CHECK(forward_loss(m, batch) == loss);

  try {
    (void)forward_loss(m, std::span<const SentencePair>());
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()) == "empty batch");
  }
  std::vector<SentencePair> bad{{{4, 5, 44}, {4}}};
  try {
    (void)forward_loss(m, bad);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("position 2") != std::string::npos);
  }
  std::vector<SentencePair> too_long{{TokenSeq(17, 5), {4}}};
  CHECK_THROWS_AS(forward_loss(m, too_long), Error);
}

TEST_CASE("forward_loss equals ln V exactly when every output row is equal") {
  const ModelConfig c;
  auto m = init_model(c);
  const auto& w = m.at("out.w");
  std::vector<float> rows(w.numel());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = w.values()[i % 32];
  m.tensors["out.w"] = NamedTensor("out.w", w.shape(), rows);
  m.tensors["out.b"] = NamedTensor("out.b", m.at("out.b").shape(), std::vector<float>(44, 0.3f));
  std::vector<SentencePair> one{{{4, 9, 12}, {7, 8}}};
  CHECK(std::abs(forward_loss(m, one) - std::log(44.0)) < 1e-4);
}

TEST_CASE("backward: names mirror the model, unused rows are zero, deterministic") {
  const ModelConfig c;
  const auto m = init_model(c);
  Rng rng(2);
  auto batch = random_batch(rng, c, 4);
  for (auto& p : batch) {
    p.source.resize(std::min<std::size_t>(p.source.size(), 5));
    p.target.resize(std::min<std::size_t>(p.target.size(), 4));
  }
  const auto g = backward(m, batch);
  CHECK(g.size() == m.tensors.size());
  for (const auto& [name, t] : m.tensors) {
    REQUIRE(g.contains(name));
    CHECK(g.at(name).shape() == t.shape());
  }
  // Sources use positions 0..4 and targets (with BOS) 0..4; rows 5.. untouched.
  const auto pos = g.at("emb.pos").values();
  for (std::size_t i = 5 * 32; i < pos.size(); ++i) CHECK(pos[i] == 0.0f);
  CHECK(backward(m, batch) == g);
}

TEST_CASE("finite-difference gradient check (double precision)") {
  ModelConfig c;
  c.max_len = 8;
  int checked = 0, passed = 0;
  for (std::uint64_t s = 0; s < 2; ++s) {
    c.seed = 100 + s;
    const auto m = init_model(c);
    const auto f32 = flatten(m);
    std::vector<double> p(f32.begin(), f32.end());
    Rng rng(s + 7);
    for (auto& x : p) x += rng.uniform(-0.05, 0.05);  // break init symmetries
    const auto batch = random_batch(rng, c, 3);
    std::vector<double> g(p.size(), 0.0);
    loss_and_grad<double>(c, p, batch, g);
    for (int k = 0; k < 60; ++k) {
      const auto i = static_cast<std::size_t>(rng.below(p.size()));
      auto q = p;
      q[i] = p[i] + 1e-3;
      const double up = loss_and_grad<double>(c, q, batch, {});
      q[i] = p[i] - 1e-3;
      const double dn = loss_and_grad<double>(c, q, batch, {});
      const double num = (up - dn) / 2e-3;
      const double den = std::max(std::abs(num), std::abs(g[i]));
      const bool ok = den < 1e-12 || std::abs(num - g[i]) / den <= 1e-4;
      ++checked;
      passed += ok ? 1 : 0;
    }
  }
  CHECK(passed >= checked * 99 / 100);
}

TEST_CASE("flatten and checkpoints round trip") {
  const auto m = init_model(ModelConfig{});
  const auto flat = flatten(m);
  CHECK(flat.size() == m.param_count());
  CHECK(unflatten(flat, m.config) == m.tensors);
  std::stringstream ss;
  write_checkpoint(ss, m);
  CHECK(read_checkpoint(ss) == m);
  std::stringstream bad("vocab_size=44\nwhat=1\n\n");
  CHECK_THROWS_AS(read_checkpoint(bad), Error);
}

TEST_CASE("train_steps contract") {
  const ModelConfig c;
  const auto m = init_model(c);
  const auto corpus = generate_domain({DomainKind::copy, 2000, 11});
  const auto opt = OptimizerState::adam(1e-3);

  const auto zero = train_steps(m, opt, corpus.pairs, 0, 16, 1);
  CHECK(zero.model == m);
  CHECK(zero.optimizer.step == 0);
  CHECK_THROWS_AS(train_steps(m, opt, std::span<const SentencePair>(), 5, 16, 1), Error);

  const auto a = train_steps(m, opt, corpus.pairs, 20, 16, 3);
  const auto b = train_steps(m, opt, corpus.pairs, 20, 16, 3);
  CHECK(a.model == b.model);
  CHECK(a.optimizer.step == 20);
  for (const auto& [name, t] : m.tensors) {
    REQUIRE(a.optimizer.m.contains(name));
    CHECK(a.optimizer.m.at(name).shape() == t.shape());
    CHECK(a.optimizer.v.at(name).shape() == t.shape());
  }
  const auto other = train_steps(m, opt, corpus.pairs, 20, 16, 4);
  CHECK(!(other.model == a.model));

  // Continuing from a TrainResult equals an uninterrupted run of the same steps
  // only in step count; the loss curve must come down over 500 steps.
  const auto long_run = train_steps(m, opt, corpus.pairs, 500, 16, 5);
  CHECK(long_run.losses.size() == 500);
  CHECK(smoothed(long_run.losses, 450, 50) < smoothed(long_run.losses, 0, 50));
}

TEST_CASE("500 Adam steps cut the smoothed loss by 20% on every domain") {
  const ModelConfig c;
  const auto m = init_model(c);
  for (const auto& spec : default_domain_profile()) {
    const auto corpus = generate_domain(spec);
    const auto r = train_steps(m, OptimizerState::adam(1e-3), corpus.pairs, 500, 16, 1);
    const double first = r.losses.front();
    const double last = smoothed(r.losses, 450, 50);
    INFO(to_string(spec.kind), " initial ", first, " final ", last);
    CHECK(last <= 0.8 * first);
  }
}

TEST_CASE("greedy decoding copies after training to convergence") {
  const ModelConfig c;
  const auto corpus = generate_domain({DomainKind::copy, 3000, 21});
  const auto parts = split(corpus, 50, 100, 5);
  TrainResult r{init_model(c), OptimizerState::adam(1e-3), {}};
  double dev_acc = 0.0;
  for (int chunk = 0; chunk < 12 && dev_acc <= 0.99; ++chunk) {
    r = train_steps(r.model, r.optimizer, parts.train.pairs, 250, 16,
                    static_cast<std::uint64_t>(chunk));
    dev_acc = evaluate(r.model, parts.dev).token_accuracy;
  }
  REQUIRE(dev_acc > 0.99);
  const Vocab v;
  CHECK(v.decode(greedy_decode(r.model, v.encode("a b c"))) == "a b c");
  const auto src = v.encode("q r s t");
  CHECK(greedy_decode(r.model, src) == greedy_decode(r.model, src));
  const auto empty = greedy_decode(r.model, TokenSeq{});
  CHECK(empty.size() <= 1);
}

TEST_CASE("sgd moves parameters against the gradient") {
  const ModelConfig c;
  const auto m = init_model(c);
  std::vector<SentencePair> batch{{{4, 5, 6}, {4, 5, 6}}};
  const auto g = backward(m, batch);
  const auto r = train_steps(m, OptimizerState::sgd(0.1), batch, 1, 1, 0);
  const auto before = m.at("out.b").values();
  const auto after = r.model.at("out.b").values();
  const auto grad = g.at("out.b").values();
  for (std::size_t i = 0; i < before.size(); ++i)
    CHECK(after[i] == doctest::Approx(before[i] - 0.1 * grad[i]).epsilon(1e-5));
}
