#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dnat/error.hpp"
#include "dnat/vocab.hpp"

namespace dnat::metrics {

using Tokens = std::vector<std::string>;

namespace detail {

using NgramCounts = std::map<std::vector<std::string>, long>;

inline NgramCounts ngrams(const Tokens& toks, int n) {
  NgramCounts out;
  const auto un = static_cast<std::size_t>(n);
  if (toks.size() < un) return out;
  for (std::size_t i = 0; i + un <= toks.size(); ++i) {
    ++out[std::vector<std::string>(toks.begin() + static_cast<std::ptrdiff_t>(i),
                                   toks.begin() + static_cast<std::ptrdiff_t>(i + un))];
  }
  return out;
}

inline long total(const NgramCounts& c) {
  long s = 0;
  for (const auto& [g, k] : c) s += k;
  return s;
}

inline long clipped_overlap(const NgramCounts& hyp, const NgramCounts& ref) {
  long s = 0;
  for (const auto& [g, k] : hyp) {
    const auto it = ref.find(g);
    if (it != ref.end()) s += std::min(k, it->second);
  }
  return s;
}

inline double f1(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

inline void check_pairs(std::span<const Tokens> hyps, std::span<const Tokens> refs) {
  if (hyps.size() != refs.size()) throw Error("hypothesis and reference counts differ");
  if (hyps.empty()) throw Error("empty corpus");
}

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace detail

/// Corpus-level clipped n-gram precision of a single order, times the
/// brevity penalty exp(1 - r/c) when the total hypothesis length c is below
/// the total reference length r. No smoothing.
inline double bleu_n(std::span<const Tokens> hyps, std::span<const Tokens> refs, int n) {
  detail::check_pairs(hyps, refs);
  if (n < 1) throw Error("n-gram order must be >= 1");
  long matched = 0, proposed = 0;
  double hyp_len = 0.0, ref_len = 0.0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const auto h = detail::ngrams(hyps[i], n);
    matched += detail::clipped_overlap(h, detail::ngrams(refs[i], n));
    proposed += detail::total(h);
    hyp_len += static_cast<double>(hyps[i].size());
    ref_len += static_cast<double>(refs[i].size());
  }
  if (proposed == 0 || hyp_len == 0.0) return 0.0;
  const double precision = static_cast<double>(matched) / static_cast<double>(proposed);
  const double bp = hyp_len < ref_len ? std::exp(1.0 - ref_len / hyp_len) : 1.0;
  return precision * bp;
}

/// Unique n-grams over total n-grams across all hypotheses.
inline double distinct_n(std::span<const Tokens> hyps, int n) {
  if (n < 1) throw Error("n-gram order must be >= 1");
  detail::NgramCounts all;
  long count = 0;
  for (const auto& h : hyps) {
    for (const auto& [g, k] : detail::ngrams(h, n)) {
      all[g] += k;
      count += k;
    }
  }
  return count == 0 ? 0.0 : static_cast<double>(all.size()) / static_cast<double>(count);
}

/// Per-pair clipped n-gram F1, averaged. A pair where neither side has an
/// n-gram scores 1.
inline double rouge_n(std::span<const Tokens> hyps, std::span<const Tokens> refs, int n) {
  detail::check_pairs(hyps, refs);
  if (n < 1) throw Error("n-gram order must be >= 1");
  double sum = 0.0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const auto h = detail::ngrams(hyps[i], n);
    const auto r = detail::ngrams(refs[i], n);
    const long th = detail::total(h), tr = detail::total(r);
    if (th == 0 && tr == 0) {
      sum += 1.0;
      continue;
    }
    if (th == 0 || tr == 0) continue;
    const double overlap = static_cast<double>(detail::clipped_overlap(h, r));
    sum += detail::f1(overlap / static_cast<double>(th), overlap / static_cast<double>(tr));
  }
  return sum / static_cast<double>(hyps.size());
}

/// Per-pair LCS F1 (precision and recall weighted equally), averaged.
inline double rouge_l(std::span<const Tokens> hyps, std::span<const Tokens> refs) {
  detail::check_pairs(hyps, refs);
  double sum = 0.0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const auto& h = hyps[i];
    const auto& r = refs[i];
    if (h.empty() && r.empty()) {
      sum += 1.0;
      continue;
    }
    if (h.empty() || r.empty()) continue;
    const double lcs = static_cast<double>(detail::lcs_length(h, r));
    sum += detail::f1(lcs / static_cast<double>(h.size()), lcs / static_cast<double>(r.size()));
  }
  return sum / static_cast<double>(hyps.size());
}

/// Bag-of-tokens F1 per pair, averaged; both-empty pairs score 1.
inline double token_f1(std::span<const Tokens> hyps, std::span<const Tokens> refs) {
  detail::check_pairs(hyps, refs);
  double sum = 0.0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const auto& h = hyps[i];
    const auto& r = refs[i];
    if (h.empty() && r.empty()) {
      sum += 1.0;
      continue;
    }
    if (h.empty() || r.empty()) continue;
    const double common =
        static_cast<double>(detail::clipped_overlap(detail::ngrams(h, 1), detail::ngrams(r, 1)));
    sum += detail::f1(common / static_cast<double>(h.size()), common / static_cast<double>(r.size()));
  }
  return sum / static_cast<double>(hyps.size());
}

inline double exact_match(std::span<const Tokens> hyps, std::span<const Tokens> refs) {
  detail::check_pairs(hyps, refs);
  std::size_t same = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) same += hyps[i] == refs[i] ? 1 : 0;
  return static_cast<double>(same) / static_cast<double>(hyps.size());
}

/// Metric name -> value in [0, 1], in request order.
struct EvalReport {
  std::vector<std::pair<std::string, double>> values;
  std::size_t corpus_size = 0;

  double at(const std::string& name) const {
    for (const auto& [k, v] : values) {
      if (k == name) return v;
    }
    throw Error("metric not in report: " + name);
  }
};

inline const std::vector<std::string>& known_metrics() {
  static const std::vector<std::string> names{"bleu1", "bleu2", "bleu3", "bleu4", "distinct1",
                                              "distinct2", "rouge1", "rouge2", "rougeL", "f1", "em"};
  return names;
}

inline double compute(const std::string& name, std::span<const Tokens> hyps,
                      std::span<const Tokens> refs) {
  if (name.rfind("bleu", 0) == 0 && name.size() == 5) return bleu_n(hyps, refs, name[4] - '0');
  if (name == "distinct1") return distinct_n(hyps, 1);
  if (name == "distinct2") return distinct_n(hyps, 2);
  if (name == "rouge1") return rouge_n(hyps, refs, 1);
  if (name == "rouge2") return rouge_n(hyps, refs, 2);
  if (name == "rougeL") return rouge_l(hyps, refs);
  if (name == "f1") return token_f1(hyps, refs);
  if (name == "em") return exact_match(hyps, refs);
  throw UsageError("unknown metric '" + name + "'");
}

inline EvalReport evaluate(std::span<const Tokens> hyps, std::span<const Tokens> refs,
                           const std::vector<std::string>& names) {
  detail::check_pairs(hyps, refs);
  EvalReport r;
  r.corpus_size = hyps.size();
  for (const auto& n : names) r.values.emplace_back(n, compute(n, hyps, refs));
  return r;
}

inline std::vector<Tokens> tokenize_lines(const std::vector<std::string>& lines) {
  std::vector<Tokens> out;
  out.reserve(lines.size());
  for (const auto& l : lines) out.push_back(split_whitespace(l));
  return out;
}

}  // namespace dnat::metrics
