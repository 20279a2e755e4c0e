// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "rapsg/error.hpp"
#include "rapsg/fluency_filter.hpp"
#include "rapsg/text.hpp"

namespace rapsg {

inline constexpr double kRougeBetaSquared = 1.2;

struct CorpusScore {
  std::array<double, 4> bleu{};
  double rouge_l = 0.0;
  std::size_t sentence_count = 0;
};

namespace detail {

inline void check_corpus(const std::vector<std::string>& candidates,
                         const std::vector<std::vector<std::string>>& references) {
  if (candidates.size() != references.size()) {
    throw UsageError("metrics: " + std::to_string(candidates.size()) + " candidates but " +
                     std::to_string(references.size()) + " reference sets");
  }
  if (candidates.empty()) throw UsageError("metrics: empty corpus");
  for (std::size_t i = 0; i < references.size(); ++i) {
    if (references[i].empty()) throw UsageError("metrics: no reference for sentence " + std::to_string(i));
  }
}

}  // namespace detail

/// Per-n modified precisions and lengths accumulated over a corpus.
struct BleuStats {
  std::array<double, 4> matched{};
  std::array<double, 4> total{};
  double cand_len = 0.0;
  double ref_len = 0.0;

  double precision(std::size_t n) const { return total[n - 1] == 0.0 ? 0.0 : matched[n - 1] / total[n - 1]; }
};

inline BleuStats bleu_stats(const std::vector<std::string>& candidates,
                            const std::vector<std::vector<std::string>>& references) {
  detail::check_corpus(candidates, references);
  BleuStats s;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto cand = make_profile(tokenize(candidates[i]));
    std::vector<NGramProfile> refs;
    for (const auto& r : references[i]) refs.push_back(make_profile(tokenize(r)));

    // Effective reference length: the closest, shorter on ties.
    std::size_t best = refs.front().length;
    for (const auto& r : refs) {
      const auto dr = r.length > cand.length ? r.length - cand.length : cand.length - r.length;
      const auto db = best > cand.length ? best - cand.length : cand.length - best;
      if (dr < db || (dr == db && r.length < best)) best = r.length;
    }
    s.cand_len += static_cast<double>(cand.length);
    s.ref_len += static_cast<double>(best);

    for (std::size_t n = 0; n < 4; ++n) {
      for (const auto& [gram, count] : cand.counts[n]) {
        int max_ref = 0;
        for (const auto& r : refs) {
          auto it = r.counts[n].find(gram);
          if (it != r.counts[n].end()) max_ref = std::max(max_ref, it->second);
        }
        s.matched[n] += std::min(count, max_ref);
        s.total[n] += count;
      }
    }
  }
  return s;
}

/// Corpus BLEU-1..4: geometric mean of clipped precisions times the brevity
/// penalty exp(1 - r/c) (applied when c < r).
inline std::array<double, 4> bleu(const std::vector<std::string>& candidates,
                                  const std::vector<std::vector<std::string>>& references) {
  const auto s = bleu_stats(candidates, references);
  const double bp = s.cand_len == 0.0   ? 0.0
                    : s.cand_len < s.ref_len ? std::exp(1.0 - s.ref_len / s.cand_len)
                                             : 1.0;
  std::array<double, 4> out{};
  double log_sum = 0.0;
  bool zero = false;
  for (std::size_t n = 1; n <= 4; ++n) {
    const double p = s.precision(n);
    if (p == 0.0) zero = true;
    if (!zero) log_sum += std::log(p);
    out[n - 1] = zero ? 0.0 : bp * std::exp(log_sum / static_cast<double>(n));
  }
  return out;
}

inline std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  if (a.empty() || b.empty()) return 0;
  std::vector<std::size_t> prev(b.size() + 1, 0);
  std::vector<std::size_t> cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// LCS F-measure of one candidate against one reference.
inline double rouge_l_sentence(const std::vector<std::string>& cand, const std::vector<std::string>& ref,
                               double beta_sq = kRougeBetaSquared) {
  const auto lcs = static_cast<double>(lcs_length(cand, ref));
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(cand.size());
  const double r = lcs / static_cast<double>(ref.size());
  return (1.0 + beta_sq) * p * r / (r + beta_sq * p);
}

/// Mean over sentences of the best per-reference ROUGE-L F-measure.
inline double rouge_l(const std::vector<std::string>& candidates,
                      const std::vector<std::vector<std::string>>& references) {
  detail::check_corpus(candidates, references);
  double total = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto cand = tokenize(candidates[i]);
    double best = 0.0;
    for (const auto& r : references[i]) best = std::max(best, rouge_l_sentence(cand, tokenize(r)));
    total += best;
  }
  return total / static_cast<double>(candidates.size());
}

inline CorpusScore score_corpus(const std::vector<std::string>& candidates,
                                const std::vector<std::vector<std::string>>& references) {
  return CorpusScore{bleu(candidates, references), rouge_l(candidates, references), candidates.size()};
}

}  // namespace rapsg
