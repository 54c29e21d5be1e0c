#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dnat/error.hpp"
#include "dnat/rng.hpp"

namespace dnat {

/// (source, target) text pairs with a train/valid/test partition of indices.
struct ParallelCorpus {
  std::string name;
  std::vector<std::pair<std::string, std::string>> pairs;
  std::vector<std::size_t> train;
  std::vector<std::size_t> valid;
  std::vector<std::size_t> test;

  std::size_t size() const noexcept { return pairs.size(); }
};

/// 90/5/5 partition. Indices are ordered by mix64(index) and cut into
/// consecutive blocks: valid and test each get floor(n/20), train the rest.
inline void assign_default_split(ParallelCorpus& c) {
  const std::size_t n = c.pairs.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [](std::size_t a, std::size_t b) {
    const auto ha = mix64(a), hb = mix64(b);
    return ha != hb ? ha < hb : a < b;
  });
  const std::size_t n_valid = n / 20;
  const std::size_t n_test = n / 20;
  const std::size_t n_train = n - n_valid - n_test;
  c.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  c.valid.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                 order.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid));
  c.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid), order.end());
  for (auto* split : {&c.train, &c.valid, &c.test}) std::sort(split->begin(), split->end());
}

/// Reads `source<TAB>target` lines.
inline ParallelCorpus load_tsv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open corpus " + path.string());
  ParallelCorpus c;
  c.name = path.stem().string();
  std::vector<std::string> problems;
  std::size_t bad = 0;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto tabs = std::count(line.begin(), line.end(), '\t');
    std::string why;
    if (tabs != 1) {
      why = "expected exactly one TAB, found " + std::to_string(tabs);
    } else {
      const auto pos = line.find('\t');
      std::string src = line.substr(0, pos);
      std::string tgt = line.substr(pos + 1);
      if (tgt.find_first_not_of(" \t") == std::string::npos) {
        why = "empty target";
      } else {
        c.pairs.emplace_back(std::move(src), std::move(tgt));
      }
    }
    if (!why.empty()) {
      ++bad;
      if (problems.size() < 10) problems.push_back("line " + std::to_string(lineno) + ": " + why);
    }
  }
  if (bad > 0) {
    std::ostringstream msg;
    msg << path.string() << ": " << bad << " malformed line(s)";
    for (const auto& p : problems) msg << "\n  " << p;
    throw Error(msg.str());
  }
  if (c.pairs.empty()) throw Error("empty corpus");
  assign_default_split(c);
  return c;
}

inline void save_tsv(const ParallelCorpus& c, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write corpus " + path.string());
  for (const auto& [s, t] : c.pairs) out << s << '\t' << t << '\n';
  if (!out) throw Error("failed writing corpus " + path.string());
}

enum class SyntheticKind { copy, reverse, sort_digits };

inline std::string_view to_string(SyntheticKind k) {
  switch (k) {
    case SyntheticKind::copy:
      return "copy";
    case SyntheticKind::reverse:
      return "reverse";
    case SyntheticKind::sort_digits:
      return "sort_digits";
  }
  return "?";
}

/// Desk-scale synthetic task. Tokens are the decimal numerals
/// "0".."vocab_size-1"; sort_digits orders them numerically.
struct SyntheticTaskSpec {
  SyntheticKind kind = SyntheticKind::copy;
  int vocab_size = 10;
  int min_len = 8;
  int max_len = 8;
  int n_examples = 1000;
  std::uint64_t seed = 0;

  void validate() const {
    if (vocab_size < 1) throw Error("synthetic vocab_size must be >= 1");
    if (min_len < 1 || min_len > max_len) throw Error("synthetic lengths must satisfy 1 <= min_len <= max_len");
    if (n_examples < 1) throw Error("synthetic n_examples must be >= 1");
  }
};

/// Parses "copy,K=20,len=8,n=5000,seed=7". Also accepts min_len/max_len
/// and len=a-b.
inline SyntheticTaskSpec parse_synthetic_spec(std::string_view text) {
  SyntheticTaskSpec s;
  std::string str(text);
  std::stringstream ss(str);
  std::string part;
  bool first = true;
  while (std::getline(ss, part, ',')) {
    if (first) {
      first = false;
      if (part == "copy") s.kind = SyntheticKind::copy;
      else if (part == "reverse") s.kind = SyntheticKind::reverse;
      else if (part == "sort_digits" || part == "sort") s.kind = SyntheticKind::sort_digits;
      else throw UsageError("unknown synthetic task '" + part + "'");
      continue;
    }
    const auto eq = part.find('=');
    if (eq == std::string::npos) throw UsageError("malformed synthetic option '" + part + "'");
    const std::string key = part.substr(0, eq);
    const std::string val = part.substr(eq + 1);
    try {
      if (key == "K" || key == "vocab") {
        s.vocab_size = std::stoi(val);
      } else if (key == "len") {
        const auto dash = val.find('-');
        if (dash == std::string::npos) {
          s.min_len = s.max_len = std::stoi(val);
        } else {
          s.min_len = std::stoi(val.substr(0, dash));
          s.max_len = std::stoi(val.substr(dash + 1));
        }
      } else if (key == "min_len") {
        s.min_len = std::stoi(val);
      } else if (key == "max_len") {
        s.max_len = std::stoi(val);
      } else if (key == "n") {
        s.n_examples = std::stoi(val);
      } else if (key == "seed") {
        s.seed = std::stoull(val);
      } else {
        throw UsageError("unknown synthetic option '" + key + "'");
      }
    } catch (const std::logic_error&) {
      throw UsageError("bad value in synthetic option '" + part + "'");
    }
  }
  if (first) throw UsageError("empty synthetic spec");
  s.validate();
  return s;
}

inline std::string format_synthetic_spec(const SyntheticTaskSpec& s) {
  std::string out(to_string(s.kind));
  out += ",K=" + std::to_string(s.vocab_size);
  if (s.min_len == s.max_len) {
    out += ",len=" + std::to_string(s.min_len);
  } else {
    out += ",len=" + std::to_string(s.min_len) + "-" + std::to_string(s.max_len);
  }
  out += ",n=" + std::to_string(s.n_examples) + ",seed=" + std::to_string(s.seed);
  return out;
}

namespace detail {

/// Number of distinct sources, saturating at `cap`.
inline std::uint64_t distinct_sources(const SyntheticTaskSpec& s, std::uint64_t cap) {
  std::uint64_t total = 0;
  for (int len = s.min_len; len <= s.max_len; ++len) {
    std::uint64_t p = 1;
    for (int i = 0; i < len && p <= cap; ++i) p *= static_cast<std::uint64_t>(s.vocab_size);
    total += std::min(p, cap);
    if (total >= cap) return cap;
  }
  return total;
}

inline std::string join_numbers(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(v[i]);
  }
  return out;
}

}  // namespace detail

/// Target for a source under the task rule.
inline std::vector<int> synthetic_target(SyntheticKind kind, std::vector<int> src) {
  switch (kind) {
    case SyntheticKind::copy:
      break;
    case SyntheticKind::reverse:
      std::reverse(src.begin(), src.end());
      break;
    case SyntheticKind::sort_digits:
      std::sort(src.begin(), src.end());
      break;
  }
  return src;
}

/// Deterministic given the spec. Sources are drawn without repetition while
/// the requested count fits in the space of distinct sources.
inline ParallelCorpus generate_synthetic(const SyntheticTaskSpec& spec) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, 0x5e7));
  const auto want = static_cast<std::uint64_t>(spec.n_examples);
  const bool unique = detail::distinct_sources(spec, want) >= want;
  std::set<std::vector<int>> seen;
  ParallelCorpus c;
  c.name = format_synthetic_spec(spec);
  c.pairs.reserve(static_cast<std::size_t>(spec.n_examples));
  while (c.pairs.size() < static_cast<std::size_t>(spec.n_examples)) {
    const int len = spec.min_len +
                    static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.max_len - spec.min_len + 1)));
    std::vector<int> src(static_cast<std::size_t>(len));
    for (auto& x : src) x = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.vocab_size)));
    if (unique && !seen.insert(src).second) continue;
    const std::vector<int> tgt = synthetic_target(spec.kind, src);
    c.pairs.emplace_back(detail::join_numbers(src), detail::join_numbers(tgt));
  }
  assign_default_split(c);
  return c;
}

}  // namespace dnat
