#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "fedpull/model.hpp"

namespace fedpull {

/// 40 content symbols ("a".."z", "A".."N") after PAD/BOS/EOS/UNK.
class Vocab {
 public:
  static constexpr int kContentSymbols = 40;
  static constexpr TokenId kFirstContent = 4;

  Vocab();

  int size() const { return static_cast<int>(symbols_.size()); }
  /// UNK for unknown symbols.
  TokenId id(std::string_view symbol) const;
  const std::string& symbol(TokenId id) const;

  TokenSeq encode(std::string_view line) const;
  std::string decode(const TokenSeq& tokens) const;

 private:
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, TokenId> ids_;
};

enum class DomainKind { copy, reverse, sort, shift3, swap_pairs };

std::string_view to_string(DomainKind k);
DomainKind domain_kind_from_string(std::string_view s);

struct DomainSpec {
  DomainKind kind = DomainKind::copy;
  int size = 0;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const DomainSpec&, const DomainSpec&) = default;
};

/// Size profile shaped like the five-corpus table: two large, one medium,
/// two small.
std::vector<DomainSpec> default_domain_profile();

struct Corpus {
  std::string domain;
  std::vector<SentencePair> pairs;

  std::size_t size() const { return pairs.size(); }
  friend bool operator==(const Corpus&, const Corpus&) = default;
};

/// The target function of a domain applied to one source sequence.
TokenSeq apply_domain(DomainKind kind, const TokenSeq& source);

/// Seeded synthetic parallel corpus. Sources have length uniform in
/// [3, max_len-2]; each position draws from the domain's home band of 8
/// symbols with probability kHomeBandProbability, otherwise uniformly from all
/// content symbols.
Corpus generate_domain(const DomainSpec& spec, int max_len = 16);

inline constexpr double kHomeBandProbability = 0.75;

struct CorpusSplit {
  Corpus train, dev, test;
};

CorpusSplit split(const Corpus& c, std::size_t test_n, std::size_t dev_n,
                  std::uint64_t seed);

/// Line-aligned bitext. Whitespace tokenization, unknown symbols map to UNK,
/// sides longer than max_len-2 tokens are truncated, and pairs where either
/// side is empty are dropped.
Corpus load_parallel_files(const std::filesystem::path& source_path,
                           const std::filesystem::path& target_path,
                           std::string domain, const Vocab& vocab,
                           int max_len = 16);

/// Concatenation in argument order.
Corpus concatenate(std::span<const Corpus> corpora, std::string domain);

}  // namespace fedpull
