#include "fedpull/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <map>

namespace fedpull {

namespace {

using Ngram = std::vector<TokenId>;

std::map<Ngram, std::size_t> ngram_counts(const TokenSeq& s, std::size_t n) {
  std::map<Ngram, std::size_t> out;
  if (s.size() < n) return out;
  for (std::size_t i = 0; i + n <= s.size(); ++i)
    ++out[Ngram(s.begin() + static_cast<std::ptrdiff_t>(i),
                s.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return out;
}

}  // namespace

double corpus_bleu(std::span<const TokenSeq> hypotheses,
                   std::span<const TokenSeq> references, int max_n) {
  if (hypotheses.size() != references.size())
    throw Error("corpus_bleu: " + std::to_string(hypotheses.size()) +
                " hypotheses vs " + std::to_string(references.size()) +
                " references");
  if (hypotheses.empty()) throw Error("corpus_bleu: empty input");
  if (max_n < 1) throw Error("corpus_bleu: max_n must be >= 1");

  const auto N = static_cast<std::size_t>(max_n);
  std::vector<std::size_t> matches(N, 0), totals(N, 0);
  std::size_t hyp_len = 0, ref_len = 0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const auto& h = hypotheses[i];
    const auto& r = references[i];
    hyp_len += h.size();
    ref_len += r.size();
    for (std::size_t n = 1; n <= N; ++n) {
      const auto hc = ngram_counts(h, n);
      const auto rc = ngram_counts(r, n);
      for (const auto& [g, c] : hc) {
        totals[n - 1] += c;
        auto it = rc.find(g);
        if (it != rc.end()) matches[n - 1] += std::min(c, it->second);
      }
    }
  }
  if (matches[0] == 0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const double p =
        n == 0 ? static_cast<double>(matches[0]) / static_cast<double>(totals[0])
               : static_cast<double>(matches[n] + 1) /
                     static_cast<double>(totals[n] + 1);
    log_sum += std::log(p);
  }
  const double bp =
      hyp_len < ref_len ? std::exp(1.0 - static_cast<double>(ref_len) /
                                             static_cast<double>(hyp_len))
                        : 1.0;
  return 100.0 * bp * std::exp(log_sum / static_cast<double>(N));
}

double token_accuracy(std::span<const TokenSeq> hypotheses,
                      std::span<const TokenSeq> references) {
  if (hypotheses.size() != references.size())
    throw Error("token_accuracy: length mismatch");
  if (hypotheses.empty()) throw Error("token_accuracy: empty input");
  double sum = 0.0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const auto& h = hypotheses[i];
    const auto& r = references[i];
    const std::size_t positions = std::max(h.size(), r.size());
    if (positions == 0) {
      sum += 1.0;
      continue;
    }
    std::size_t hit = 0;
    for (std::size_t j = 0; j < std::min(h.size(), r.size()); ++j)
      hit += h[j] == r[j] ? 1 : 0;
    sum += static_cast<double>(hit) / static_cast<double>(positions);
  }
  return sum / static_cast<double>(hypotheses.size());
}

std::vector<Histogram> norm_histogram(std::span<const DeltaRecord> deltas,
                                      double bucket_width) {
  if (!(bucket_width > 0.0)) throw Error("bucket_width must be positive");
  std::vector<Histogram> out;
  for (auto g : {Group::encoder, Group::decoder, Group::shared}) {
    Histogram h{g, bucket_width, {}};
    std::vector<std::size_t> counts;
    for (const auto& d : deltas) {
      if (d.group != g) continue;
      const auto b = static_cast<std::size_t>(std::floor(d.norm / bucket_width));
      if (b >= counts.size()) counts.resize(b + 1, 0);
      ++counts[b];
    }
    for (std::size_t b = 0; b < counts.size(); ++b)
      h.buckets.emplace_back(static_cast<double>(b) * bucket_width, counts[b]);
    out.push_back(std::move(h));
  }
  return out;
}

EvalResult evaluate(const ModelState& model, const Corpus& test) {
  std::vector<TokenSeq> sources, refs;
  sources.reserve(test.size());
  refs.reserve(test.size());
  for (const auto& p : test.pairs) {
    sources.push_back(p.source);
    refs.push_back(p.target);
  }
  const auto hyps = greedy_decode_all(model, sources);
  return EvalResult{test.domain, corpus_bleu(hyps, refs),
                    token_accuracy(hyps, refs), test.size()};
}

std::vector<std::vector<EvalResult>> evaluate_matrix(
    std::span<const ModelState* const> models, std::span<const Corpus> tests,
    int threads) {
  std::vector<std::vector<EvalResult>> out(
      models.size(), std::vector<EvalResult>(tests.size()));
  const auto cells = static_cast<std::ptrdiff_t>(models.size() * tests.size());
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(cells));
#pragma omp parallel for schedule(dynamic) num_threads(std::max(threads, 1))
  for (std::ptrdiff_t c = 0; c < cells; ++c) {
    const auto m = static_cast<std::size_t>(c) / tests.size();
    const auto d = static_cast<std::size_t>(c) % tests.size();
    try {
      out[m][d] = evaluate(*models[m], tests[d]);
    } catch (...) {
      errors[static_cast<std::size_t>(c)] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

double mean_accuracy(std::span<const EvalResult> evals) {
  if (evals.empty()) return 0.0;
  double s = 0.0;
  for (const auto& e : evals) s += e.token_accuracy;
  return s / static_cast<double>(evals.size());
}

double mean_bleu(std::span<const EvalResult> evals) {
  if (evals.empty()) return 0.0;
  double s = 0.0;
  for (const auto& e : evals) s += e.bleu;
  return s / static_cast<double>(evals.size());
}

}  // namespace fedpull
