#include "fedpull/data.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "fedpull/rng.hpp"

namespace fedpull {

Vocab::Vocab() {
  symbols_ = {"<pad>", "<s>", "</s>", "<unk>"};
  for (char ch = 'a'; ch <= 'z'; ++ch) symbols_.emplace_back(1, ch);
  for (char ch = 'A'; ch <= 'N'; ++ch) symbols_.emplace_back(1, ch);
  for (std::size_t i = 0; i < symbols_.size(); ++i)
    ids_.emplace(symbols_[i], static_cast<TokenId>(i));
}

TokenId Vocab::id(std::string_view symbol) const {
  auto it = ids_.find(std::string(symbol));
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocab::symbol(TokenId id) const {
  if (id < 0 || id >= size())
    throw Error("token id " + std::to_string(id) + " outside the vocabulary");
  return symbols_[static_cast<std::size_t>(id)];
}

TokenSeq Vocab::encode(std::string_view line) const {
  TokenSeq out;
  std::istringstream is{std::string(line)};
  std::string tok;
  while (is >> tok) out.push_back(id(tok));
  return out;
}

std::string Vocab::decode(const TokenSeq& tokens) const {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += symbol(tokens[i]);
  }
  return out;
}

std::string_view to_string(DomainKind k) {
  switch (k) {
    case DomainKind::copy:
      return "copy";
    case DomainKind::reverse:
      return "reverse";
    case DomainKind::sort:
      return "sort";
    case DomainKind::shift3:
      return "shift3";
    case DomainKind::swap_pairs:
      return "swap_pairs";
  }
  return "copy";
}

DomainKind domain_kind_from_string(std::string_view s) {
  for (auto k : {DomainKind::copy, DomainKind::reverse, DomainKind::sort,
                 DomainKind::shift3, DomainKind::swap_pairs})
    if (to_string(k) == s) return k;
  throw Error("unknown domain kind '" + std::string(s) + "'");
}

void DomainSpec::validate() const {
  if (size < 30)
    throw Error("domain '" + std::string(to_string(kind)) +
                "' size must be >= 30, got " + std::to_string(size));
}

std::vector<DomainSpec> default_domain_profile() {
  return {{DomainKind::copy, 20000, 101},
          {DomainKind::reverse, 20000, 102},
          {DomainKind::sort, 2000, 103},
          {DomainKind::shift3, 600, 104},
          {DomainKind::swap_pairs, 200, 105}};
}

TokenSeq apply_domain(DomainKind kind, const TokenSeq& src) {
  TokenSeq out = src;
  switch (kind) {
    case DomainKind::copy:
      break;
    case DomainKind::reverse:
      std::reverse(out.begin(), out.end());
      break;
    case DomainKind::sort:
      std::sort(out.begin(), out.end());
      break;
    case DomainKind::shift3:
      for (auto& t : out)
        if (t >= Vocab::kFirstContent)
          t = ((t - Vocab::kFirstContent + 3) % Vocab::kContentSymbols) +
              Vocab::kFirstContent;
      break;
    case DomainKind::swap_pairs:
      for (std::size_t i = 0; i + 1 < out.size(); i += 2)
        std::swap(out[i], out[i + 1]);
      break;
  }
  return out;
}

Corpus generate_domain(const DomainSpec& spec, int max_len) {
  spec.validate();
  if (max_len < 5) throw Error("max_len too small for generated domains");
  constexpr int kBand = 8;
  const int band_start =
      Vocab::kFirstContent + kBand * static_cast<int>(spec.kind);
  Rng rng(spec.seed);
  Corpus c{std::string(to_string(spec.kind)), {}};
  c.pairs.reserve(static_cast<std::size_t>(spec.size));
  for (int i = 0; i < spec.size; ++i) {
    const auto len = static_cast<std::size_t>(rng.between(3, max_len - 2));
    TokenSeq src(len);
    for (auto& t : src) {
      if (rng.uniform() < kHomeBandProbability)
        t = static_cast<TokenId>(band_start + rng.between(0, kBand - 1));
      else
        t = static_cast<TokenId>(Vocab::kFirstContent +
                                 rng.between(0, Vocab::kContentSymbols - 1));
    }
    c.pairs.push_back({src, apply_domain(spec.kind, src)});
  }
  return c;
}

CorpusSplit split(const Corpus& c, std::size_t test_n, std::size_t dev_n,
                  std::uint64_t seed) {
  if (test_n + dev_n >= c.size())
    throw Error("split of '" + c.domain + "': test " + std::to_string(test_n) +
                " + dev " + std::to_string(dev_n) + " leaves no training data (n=" +
                std::to_string(c.size()) + ")");
  std::vector<std::size_t> order(c.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(std::span(order));
  CorpusSplit s{{c.domain, {}}, {c.domain, {}}, {c.domain, {}}};
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto& pair = c.pairs[order[i]];
    if (i < test_n)
      s.test.pairs.push_back(pair);
    else if (i < test_n + dev_n)
      s.dev.pairs.push_back(pair);
    else
      s.train.pairs.push_back(pair);
  }
  return s;
}

namespace {

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

}  // namespace

Corpus load_parallel_files(const std::filesystem::path& source_path,
                           const std::filesystem::path& target_path,
                           std::string domain, const Vocab& vocab,
                           int max_len) {
  const auto src = read_lines(source_path);
  const auto tgt = read_lines(target_path);
  if (src.size() != tgt.size())
    throw Error("line counts " + std::to_string(src.size()) +
                " != " + std::to_string(tgt.size()));
  const auto cap = static_cast<std::size_t>(max_len - 2);
  Corpus c{std::move(domain), {}};
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto s = vocab.encode(src[i]);
    auto t = vocab.encode(tgt[i]);
    if (s.empty() || t.empty()) continue;
    if (s.size() > cap) s.resize(cap);
    if (t.size() > cap) t.resize(cap);
    c.pairs.push_back({std::move(s), std::move(t)});
  }
  if (c.pairs.empty())
    throw Error("no non-empty line pairs in '" + source_path.string() + "'");
  return c;
}

Corpus concatenate(std::span<const Corpus> corpora, std::string domain) {
  Corpus out{std::move(domain), {}};
  for (const auto& c : corpora)
    out.pairs.insert(out.pairs.end(), c.pairs.begin(), c.pairs.end());
  return out;
}

}  // namespace fedpull
