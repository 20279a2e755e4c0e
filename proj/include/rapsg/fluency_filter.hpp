// SPDX-License-Identifier: Apache-2.0
//
// CIDEr / CIDEr-D scoring of candidate pseudo-captions against the
// captioner's prediction, and argmax selection of the best candidate.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rapsg/error.hpp"
#include "rapsg/jsonl.hpp"
#include "rapsg/text.hpp"

namespace rapsg {

inline constexpr std::size_t kMaxNgram = 4;
inline constexpr double kDefaultCiderSigma = 6.0;

/// n-grams are their tokens joined by a single space.
struct NGramProfile {
  std::array<std::map<std::string, int>, kMaxNgram> counts;
  std::size_t length = 0;
};

inline NGramProfile make_profile(const std::vector<std::string>& tokens) {
  NGramProfile p;
  p.length = tokens.size();
  for (std::size_t n = 1; n <= kMaxNgram; ++n) {
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
      std::string gram = tokens[i];
      for (std::size_t j = i + 1; j < i + n; ++j) {
        gram.push_back(' ');
        gram += tokens[j];
      }
      ++p.counts[n - 1][gram];
    }
  }
  return p;
}

class IdfTable {
 public:
  IdfTable() = default;
  IdfTable(std::array<std::unordered_map<std::string, std::size_t>, kMaxNgram> df, std::size_t docs)
      : df_(std::move(df)), docs_(docs), log_docs_(std::log(static_cast<double>(docs))) {}

  std::size_t documents() const noexcept { return docs_; }

  /// Document frequency; 0 when the n-gram never occurred.
  std::size_t df(std::size_t n, const std::string& gram) const {
    const auto& table = df_.at(n - 1);
    auto it = table.find(gram);
    return it == table.end() ? 0 : it->second;
  }

  /// log(M / df), with unseen n-grams counted as df = 1.
  double weight(std::size_t n, const std::string& gram) const {
    const auto d = std::max<std::size_t>(df(n, gram), 1);
    return log_docs_ - std::log(static_cast<double>(d));
  }

  const std::unordered_map<std::string, std::size_t>& table(std::size_t n) const { return df_.at(n - 1); }

 private:
  std::array<std::unordered_map<std::string, std::size_t>, kMaxNgram> df_;
  std::size_t docs_ = 0;
  double log_docs_ = 0.0;
};

/// One document per corpus sentence.
inline IdfTable build_idf(const std::vector<std::string>& corpus) {
  if (corpus.empty()) throw UsageError("build_idf: corpus is empty");
  std::array<std::unordered_map<std::string, std::size_t>, kMaxNgram> df;
  for (const auto& sentence : corpus) {
    const auto profile = make_profile(tokenize(sentence));
    for (std::size_t n = 0; n < kMaxNgram; ++n) {
      for (const auto& [gram, _] : profile.counts[n]) ++df[n][gram];
    }
  }
  return IdfTable(std::move(df), corpus.size());
}

enum class CiderVariant {
  kCiderD,  // clipped numerator, Gaussian length penalty, x10
  kPlain,   // TF-IDF cosine averaged over n
};

struct CiderOptions {
  CiderVariant variant = CiderVariant::kCiderD;
  double sigma = kDefaultCiderSigma;
};

/// TF-IDF vectors for one sentence, sorted by n-gram for merge joins.
struct WeightedProfile {
  std::array<std::vector<std::pair<std::string, double>>, kMaxNgram> vec;
  std::array<double, kMaxNgram> sq_norm{};
  std::size_t length = 0;
};

inline WeightedProfile weigh(const NGramProfile& profile, const IdfTable& idf) {
  WeightedProfile w;
  w.length = profile.length;
  for (std::size_t n = 0; n < kMaxNgram; ++n) {
    auto& v = w.vec[n];
    v.reserve(profile.counts[n].size());
    for (const auto& [gram, tf] : profile.counts[n]) {
      const double x = tf * idf.weight(n + 1, gram);
      v.emplace_back(gram, x);
      w.sq_norm[n] += x * x;
    }
  }
  return w;
}

inline WeightedProfile weigh(const std::string& sentence, const IdfTable& idf) {
  return weigh(make_profile(tokenize(sentence)), idf);
}

/// Per-n similarity between a candidate and one reference, before any
/// length penalty or scaling.
inline double ngram_similarity(const WeightedProfile& cand, const WeightedProfile& ref, std::size_t n,
                               CiderVariant variant) {
  const auto& a = cand.vec[n - 1];
  const auto& b = ref.vec[n - 1];
  double num = 0.0;
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() && ib != b.end()) {
    if (ia->first < ib->first) {
      ++ia;
    } else if (ib->first < ia->first) {
      ++ib;
    } else {
      const double hv = variant == CiderVariant::kCiderD ? std::min(ia->second, ib->second) : ia->second;
      num += hv * ib->second;
      ++ia;
      ++ib;
    }
  }
  const double denom_sq = cand.sq_norm[n - 1] * ref.sq_norm[n - 1];
  if (denom_sq == 0.0) return 0.0;
  return num / std::sqrt(denom_sq);
}

inline double cider_prepared(const WeightedProfile& cand, const std::vector<WeightedProfile>& refs,
                             const CiderOptions& opt = {}) {
  if (refs.empty()) throw UsageError("cider: references must be non-empty");
  if (cand.length == 0) return 0.0;
  double total = 0.0;
  for (const auto& ref : refs) {
    double per_ref = 0.0;
    for (std::size_t n = 1; n <= kMaxNgram; ++n) per_ref += ngram_similarity(cand, ref, n, opt.variant);
    per_ref /= static_cast<double>(kMaxNgram);
    if (opt.variant == CiderVariant::kCiderD) {
      const double delta = static_cast<double>(cand.length) - static_cast<double>(ref.length);
      per_ref *= std::exp(-(delta * delta) / (2.0 * opt.sigma * opt.sigma));
    }
    total += per_ref;
  }
  double score = total / static_cast<double>(refs.size());
  if (opt.variant == CiderVariant::kCiderD) score *= 10.0;
  return score;
}

inline double cider(const std::string& candidate, const std::vector<std::string>& references,
                    const IdfTable& idf, const CiderOptions& opt = {}) {
  std::vector<WeightedProfile> refs;
  refs.reserve(references.size());
  for (const auto& r : references) refs.push_back(weigh(r, idf));
  return cider_prepared(weigh(candidate, idf), refs, opt);
}

inline double cider_d(const std::string& candidate, const std::vector<std::string>& references,
                      const IdfTable& idf, double sigma = kDefaultCiderSigma) {
  return cider(candidate, references, idf, CiderOptions{CiderVariant::kCiderD, sigma});
}

struct FilterResult {
  std::string image_id;
  std::vector<double> scores;
  std::size_t selected_index = 0;
  std::string selected_sentence;
};

/// First index of the maximum; ties go to the lowest index.
inline std::size_t argmax_lowest(const std::vector<double>& scores) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

/// Scores each candidate against the single prediction reference and picks
/// the highest.
inline FilterResult select_best(const std::string& image_id, const std::vector<std::string>& candidates,
                                const std::string& prediction, const IdfTable& idf,
                                const CiderOptions& opt = {}) {
  if (candidates.empty()) throw UsageError("select_best: no candidates for '" + image_id + "'");
  if (tokenize(prediction).empty()) {
    throw UsageError("select_best: prediction for '" + image_id + "' has no tokens");
  }
  const std::vector<WeightedProfile> refs{weigh(prediction, idf)};
  FilterResult result{image_id, {}, 0, {}};
  result.scores.reserve(candidates.size());
  for (const auto& c : candidates) result.scores.push_back(cider_prepared(weigh(c, idf), refs, opt));
  result.selected_index = argmax_lowest(result.scores);
  result.selected_sentence = candidates[result.selected_index];
  return result;
}

inline Json filter_to_json(const FilterResult& r) {
  return Json{{"image_id", r.image_id}, {"scores", r.scores},
              {"selected_index", r.selected_index}, {"selected_sentence", r.selected_sentence}};
}

}  // namespace rapsg
