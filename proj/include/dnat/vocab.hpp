#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dnat/error.hpp"

namespace dnat {

using TokenId = std::int32_t;

/// A fixed-length run of token ids. May contain [MASK] and [PAD].
struct TokenSequence {
  std::vector<TokenId> ids;

  TokenSequence() = default;
  explicit TokenSequence(std::vector<TokenId> v) : ids(std::move(v)) {}
  TokenSequence(std::size_t n, TokenId fill) : ids(n, fill) {}
  TokenSequence(std::initializer_list<TokenId> v) : ids(v) {}

  std::size_t size() const noexcept { return ids.size(); }
  bool empty() const noexcept { return ids.empty(); }
  TokenId operator[](std::size_t i) const { return ids[i]; }
  TokenId& operator[](std::size_t i) { return ids[i]; }
  auto begin() const noexcept { return ids.begin(); }
  auto end() const noexcept { return ids.end(); }
  bool contains(TokenId id) const {
    return std::find(ids.begin(), ids.end(), id) != ids.end();
  }
  std::size_t count(TokenId id) const {
    return static_cast<std::size_t>(std::count(ids.begin(), ids.end(), id));
  }

  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

inline constexpr std::string_view kPadToken = "[PAD]";
inline constexpr std::string_view kMaskToken = "[MASK]";
inline constexpr std::string_view kSepToken = "[SEP]";
inline constexpr std::string_view kUnkToken = "[UNK]";

/// Splits on ASCII whitespace.
inline std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string tok;
  while (in >> tok) out.push_back(std::move(tok));
  return out;
}

/// Token <-> id table. Specials occupy ids 0..3 as [PAD], [MASK], [SEP], [UNK].
class Vocabulary {
 public:
  static constexpr TokenId kPadId = 0;
  static constexpr TokenId kMaskId = 1;
  static constexpr TokenId kSepId = 2;
  static constexpr TokenId kUnkId = 3;
  static constexpr std::size_t kNumSpecials = 4;

  /// Takes the full ordered token list; the first four must be the specials.
  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.size() < kNumSpecials + 1) {
      throw Error("vocabulary needs the four specials plus at least one content token");
    }
    if (tokens_[kPadId] != kPadToken || tokens_[kMaskId] != kMaskToken ||
        tokens_[kSepId] != kSepToken || tokens_[kUnkId] != kUnkToken) {
      throw Error("vocabulary must start with [PAD] [MASK] [SEP] [UNK]");
    }
    index_.reserve(tokens_.size());
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (tokens_[i].empty()) throw Error("vocabulary contains an empty token");
      if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
        throw Error("duplicate vocabulary token: " + tokens_[i]);
      }
    }
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  TokenId mask_id() const noexcept { return kMaskId; }
  TokenId pad_id() const noexcept { return kPadId; }
  TokenId sep_id() const noexcept { return kSepId; }
  TokenId unk_id() const noexcept { return kUnkId; }

  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw Error("id out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  TokenId id(std::string_view tok) const {
    const auto it = index_.find(std::string(tok));
    return it == index_.end() ? kUnkId : it->second;
  }

  bool is_special(TokenId id) const noexcept {
    return id >= 0 && static_cast<std::size_t>(id) < kNumSpecials;
  }

  /// One token per line; line number is the id.
  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write vocabulary file " + path.string());
    for (const auto& t : tokens_) out << t << '\n';
    if (!out) throw Error("failed writing vocabulary file " + path.string());
  }

  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open vocabulary file " + path.string());
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      tokens.push_back(line);
    }
    return Vocabulary(std::move(tokens));
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.tokens_ == b.tokens_;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Specials first, then tokens with count >= min_count ordered by
/// (descending count, ascending string).
inline Vocabulary build_vocabulary(const std::vector<std::string>& corpus_lines,
                                   int min_count = 1) {
  if (corpus_lines.empty()) throw Error("empty corpus");
  if (min_count < 1) throw Error("min_count must be >= 1");
  std::map<std::string, long> counts;
  for (const auto& line : corpus_lines) {
    for (auto& tok : split_whitespace(line)) ++counts[tok];
  }
  std::vector<std::pair<std::string, long>> kept;
  for (auto& [tok, c] : counts) {
    if (c < min_count) continue;
    if (tok == kPadToken || tok == kMaskToken || tok == kSepToken || tok == kUnkToken) continue;
    kept.emplace_back(tok, c);
  }
  if (kept.empty()) throw Error("no content token reaches min_count");
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::vector<std::string> tokens{std::string(kPadToken), std::string(kMaskToken),
                                  std::string(kSepToken), std::string(kUnkToken)};
  for (auto& [tok, c] : kept) tokens.push_back(tok);
  return Vocabulary(std::move(tokens));
}

/// Whitespace tokenization, unknowns to [UNK], right-padded or truncated.
inline TokenSequence encode(const Vocabulary& v, std::string_view text, std::size_t target_len) {
  TokenSequence seq(target_len, v.pad_id());
  const auto toks = split_whitespace(text);
  const std::size_t n = std::min(toks.size(), target_len);
  for (std::size_t i = 0; i < n; ++i) seq[i] = v.id(toks[i]);
  return seq;
}

/// Joins tokens with single spaces, dropping [PAD], [MASK] and [SEP].
inline std::string decode(const Vocabulary& v, const TokenSequence& seq) {
  std::string out;
  for (TokenId id : seq) {
    const std::string& tok = v.token(id);
    if (id == v.pad_id() || id == v.mask_id() || id == v.sep_id()) continue;
    if (!out.empty()) out += ' ';
    out += tok;
  }
  return out;
}

/// Token strings for every id, specials included.
inline std::vector<std::string> token_strings(const Vocabulary& v, const TokenSequence& seq) {
  std::vector<std::string> out;
  out.reserve(seq.size());
  for (TokenId id : seq) out.push_back(v.token(id));
  return out;
}

}  // namespace dnat
