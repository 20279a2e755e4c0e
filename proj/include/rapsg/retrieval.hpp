// SPDX-License-Identifier: Apache-2.0
//
// Exact cosine scoring and top-k ranking of descriptions against images.
#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "rapsg/embedding_store.hpp"
#include "rapsg/error.hpp"
#include "rapsg/parallel.hpp"

namespace rapsg {

inline constexpr std::size_t kDefaultTopK = 16;

struct ScoredId {
  std::string id;
  double score = 0.0;

  friend bool operator==(const ScoredId&, const ScoredId&) = default;
};

/// Full ranking of the corpus for one image, score descending.
struct RankedDescriptions {
  std::string image_id;
  std::vector<ScoredId> entries;
};

struct TopK {
  std::string image_id;
  std::size_t k = 0;
  std::vector<ScoredId> entries;

  friend bool operator==(const TopK&, const TopK&) = default;
};

/// Sequential double-precision dot product of two float rows.
inline double dot(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

namespace detail {

inline void require_unit_query(std::span<const float> query) {
  double sq = 0.0;
  for (float v : query) sq += static_cast<double>(v) * v;
  if (std::abs(std::sqrt(sq) - 1.0) > kUnitNormTolerance) {
    throw UsageError("cosine_scores: query is not unit-normalized");
  }
}

inline void require_normalized(const EmbeddingStore& store, const char* what) {
  if (!store.normalized()) {
    throw UsageError(std::string(what) + " store is not unit-normalized; run l2_normalize first");
  }
}

// Ranking order: higher score first, then lower row index.
inline bool ranks_before(const std::vector<double>& scores, std::size_t a, std::size_t b) {
  if (scores[a] != scores[b]) return scores[a] > scores[b];
  return a < b;
}

}  // namespace detail

/// Cosine similarity of a unit query against every row of a normalized
/// store, aligned with row order. Unit rows make cosine a dot product; the
/// result is clamped to [-1, 1] to absorb float32 norm rounding.
inline std::vector<double> score_rows(std::span<const float> query, const EmbeddingStore& store) {
  if (query.size() != store.dim()) {
    throw UsageError("cosine_scores: query dim " + std::to_string(query.size()) +
                     " != store dim " + std::to_string(store.dim()));
  }
  detail::require_normalized(store, "description");
  detail::require_unit_query(query);
  std::vector<double> scores(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    scores[i] = std::clamp(dot(query, store.row(i)), -1.0, 1.0);
  }
  return scores;
}

inline std::vector<ScoredId> cosine_scores(std::span<const float> query,
                                           const EmbeddingStore& store) {
  const auto scores = score_rows(query, store);
  std::vector<ScoredId> out;
  out.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) out.push_back({store.id(i), scores[i]});
  return out;
}

inline RankedDescriptions rank_descriptions(const std::string& image_id,
                                            const EmbeddingStore& image_store,
                                            const EmbeddingStore& desc_store) {
  auto row = image_store.find(image_id);
  if (!row) throw InputError("rank_descriptions: unknown image id '" + image_id + "'");
  detail::require_normalized(image_store, "image");
  const auto scores = score_rows(image_store.row(*row), desc_store);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return detail::ranks_before(scores, a, b); });
  RankedDescriptions ranked{image_id, {}};
  ranked.entries.reserve(order.size());
  for (std::size_t i : order) ranked.entries.push_back({desc_store.id(i), scores[i]});
  return ranked;
}

inline TopK take_top_k(const RankedDescriptions& ranked, std::size_t k = kDefaultTopK) {
  if (k == 0) throw UsageError("take_top_k: k must be >= 1");
  TopK top{ranked.image_id, k, {}};
  const auto n = std::min(k, ranked.entries.size());
  top.entries.assign(ranked.entries.begin(), ranked.entries.begin() + static_cast<std::ptrdiff_t>(n));
  return top;
}

/// Same result as take_top_k(rank_descriptions(...), k) without sorting the
/// whole corpus.
inline TopK top_k_descriptions(const std::string& image_id, const EmbeddingStore& image_store,
                               const EmbeddingStore& desc_store, std::size_t k = kDefaultTopK) {
  if (k == 0) throw UsageError("take_top_k: k must be >= 1");
  auto row = image_store.find(image_id);
  if (!row) throw InputError("rank_descriptions: unknown image id '" + image_id + "'");
  detail::require_normalized(image_store, "image");
  const auto scores = score_rows(image_store.row(*row), desc_store);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto n = std::min(k, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n), order.end(),
                    [&](std::size_t a, std::size_t b) { return detail::ranks_before(scores, a, b); });
  TopK top{image_id, k, {}};
  top.entries.reserve(n);
  for (std::size_t i = 0; i < n; ++i) top.entries.push_back({desc_store.id(order[i]), scores[order[i]]});
  return top;
}

/// TopK for every image, in image-store order.
inline std::vector<TopK> retrieve_all(const EmbeddingStore& image_store,
                                      const EmbeddingStore& desc_store, std::size_t k,
                                      std::size_t workers = 1) {
  if (image_store.dim() != desc_store.dim()) {
    throw UsageError("retrieve: image dim " + std::to_string(image_store.dim()) +
                     " != description dim " + std::to_string(desc_store.dim()));
  }
  std::vector<TopK> out(image_store.size());
  parallel_for(image_store.size(), workers, [&](std::size_t i) {
    out[i] = top_k_descriptions(image_store.id(i), image_store, desc_store, k);
  });
  return out;
}

inline Json topk_to_json(const TopK& top) {
  Json entries = Json::array();
  for (const auto& e : top.entries) entries.push_back(Json{{"desc_id", e.id}, {"score", e.score}});
  return Json{{"image_id", top.image_id}, {"topk", std::move(entries)}};
}

/// k is taken as the stored prefix length.
inline TopK topk_from_json(const Json& row) {
  const std::string where = "topk record";
  TopK top{field<std::string>(row, "image_id", where), 0, {}};
  for (const auto& e : field<Json>(row, "topk", where)) {
    top.entries.push_back({field<std::string>(e, "desc_id", where), field<double>(e, "score", where)});
  }
  top.k = top.entries.size();
  return top;
}

}  // namespace rapsg
