#pragma once

#include <span>
#include <string>
#include <vector>

#include "fedpull/data.hpp"
#include "fedpull/model.hpp"
#include "fedpull/tensor.hpp"

namespace fedpull {

struct EvalResult {
  std::string domain;
  double bleu = 0.0;            // [0, 100]
  double token_accuracy = 0.0;  // [0, 1]
  std::size_t n_sentences = 0;
};

/// Corpus BLEU: clipped n-gram precisions for n = 1..max_n, add-one smoothing
/// on n >= 2 (unigram precision stays raw), geometric mean, brevity penalty,
/// scaled to [0, 100].
double corpus_bleu(std::span<const TokenSeq> hypotheses,
                   std::span<const TokenSeq> references, int max_n = 4);

/// Mean over pairs of position-wise matches / max(|hyp|, |ref|).
double token_accuracy(std::span<const TokenSeq> hypotheses,
                      std::span<const TokenSeq> references);

struct Histogram {
  Group group = Group::shared;
  double bucket_width = 1.0;
  /// (lower bound, count), contiguous from 0 to the highest occupied bucket.
  std::vector<std::pair<double, std::size_t>> buckets;
};

/// One histogram per group (encoder, decoder, shared); bucket index is
/// floor(norm / bucket_width).
std::vector<Histogram> norm_histogram(std::span<const DeltaRecord> deltas,
                                      double bucket_width);

/// Greedy-decodes the corpus sources and scores them against the targets.
EvalResult evaluate(const ModelState& model, const Corpus& test);

/// Evaluates every model on every test set; parallel over (model, corpus)
/// pairs. result[m][d] belongs to models[m] on tests[d].
std::vector<std::vector<EvalResult>> evaluate_matrix(
    std::span<const ModelState* const> models, std::span<const Corpus> tests,
    int threads);

double mean_accuracy(std::span<const EvalResult> evals);
double mean_bleu(std::span<const EvalResult> evals);

}  // namespace fedpull
