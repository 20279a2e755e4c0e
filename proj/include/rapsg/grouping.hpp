// SPDX-License-Identifier: Apache-2.0
//
// Rank-then-slice grouping of a TopK list. The top m descriptions form the
// head group (summarized into the first candidate). The remaining k-m
// are ordered by similarity to that sentence and cut into consecutive blocks
// of m, one block per further candidate.
#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "rapsg/embedding_store.hpp"
#include "rapsg/error.hpp"
#include "rapsg/retrieval.hpp"

namespace rapsg {

inline constexpr std::size_t kDefaultGroupSize = 4;

struct GroupingPlan {
  std::string image_id;
  std::vector<std::string> head;
  std::vector<std::vector<std::string>> tail_groups;
  // Similarity of each tail member to the head summary, parallel to tail_groups.
  std::vector<std::vector<double>> tail_scores;
  std::size_t m = 0;
  std::size_t k = 0;
  std::size_t n = 0;
};

inline void validate_group_shape(std::size_t k, std::size_t m) {
  if (m == 0) throw UsageError("grouping: m must be >= 1");
  if (m > k) throw UsageError("grouping: m=" + std::to_string(m) + " exceeds k=" + std::to_string(k));
  if ((k - m) % m != 0) {
    throw UsageError("grouping: k-m=" + std::to_string(k - m) + " is not divisible by m=" +
                     std::to_string(m));
  }
}

inline std::vector<std::string> select_head(const TopK& topk, std::size_t m = kDefaultGroupSize) {
  if (m == 0) throw UsageError("select_head: m must be >= 1");
  if (m > topk.entries.size()) {
    throw UsageError("select_head: m=" + std::to_string(m) + " exceeds TopK size " +
                     std::to_string(topk.entries.size()));
  }
  std::vector<std::string> head;
  head.reserve(m);
  for (std::size_t i = 0; i < m; ++i) head.push_back(topk.entries[i].id);
  return head;
}

/// `sentence_store` holds normalized sentence-space embeddings keyed by
/// description id; `c1_embedding` is the unit embedding of the head summary.
inline GroupingPlan partition_remainder(const TopK& topk, std::span<const std::string> head,
                                        std::span<const float> c1_embedding,
                                        const EmbeddingStore& sentence_store) {
  const std::size_t k = topk.entries.size();
  const std::size_t m = head.size();
  validate_group_shape(k, m);
  for (std::size_t i = 0; i < m; ++i) {
    if (head[i] != topk.entries[i].id) {
      throw UsageError("partition_remainder: head is not the TopK prefix");
    }
  }
  if (!sentence_store.normalized()) {
    throw UsageError("partition_remainder: sentence store is not unit-normalized");
  }
  if (c1_embedding.size() != sentence_store.dim()) {
    throw UsageError("partition_remainder: c1 embedding dim " + std::to_string(c1_embedding.size()) +
                     " != sentence store dim " + std::to_string(sentence_store.dim()));
  }

  struct Member {
    std::size_t rank;  // position in TopK
    double score;
  };
  std::vector<Member> rest;
  rest.reserve(k - m);
  for (std::size_t r = m; r < k; ++r) {
    const auto& id = topk.entries[r].id;
    auto row = sentence_store.find(id);
    if (!row) throw InputError("partition_remainder: no sentence embedding for '" + id + "'");
    rest.push_back({r, dot(c1_embedding, sentence_store.row(*row))});
  }
  std::sort(rest.begin(), rest.end(), [](const Member& a, const Member& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.rank < b.rank;
  });

  GroupingPlan plan{topk.image_id, {head.begin(), head.end()}, {}, {}, m, k, (k - m) / m};
  for (std::size_t g = 0; g < plan.n; ++g) {
    std::vector<std::string> ids;
    std::vector<double> scores;
    for (std::size_t j = g * m; j < (g + 1) * m; ++j) {
      ids.push_back(topk.entries[rest[j].rank].id);
      scores.push_back(rest[j].score);
    }
    plan.tail_groups.push_back(std::move(ids));
    plan.tail_scores.push_back(std::move(scores));
  }
  return plan;
}

/// Checks the partition law against `topk`: head plus tail groups cover the
/// TopK ids exactly once, every group of size m.
inline bool plan_tiles_topk(const GroupingPlan& plan, const TopK& topk) {
  std::unordered_set<std::string> expected;
  for (const auto& e : topk.entries) expected.insert(e.id);
  std::unordered_set<std::string> seen;
  auto take = [&](const std::vector<std::string>& group) {
    if (group.size() != plan.m) return false;
    for (const auto& id : group) {
      if (!expected.contains(id) || !seen.insert(id).second) return false;
    }
    return true;
  };
  if (!take(plan.head)) return false;
  for (const auto& g : plan.tail_groups) {
    if (!take(g)) return false;
  }
  return seen.size() == expected.size();
}

inline Json plan_to_json(const GroupingPlan& plan) {
  Json tail = Json::array();
  for (const auto& g : plan.tail_groups) tail.push_back(g);
  return Json{{"image_id", plan.image_id}, {"head", plan.head}, {"tail_groups", std::move(tail)}};
}

inline GroupingPlan plan_from_json(const Json& row) {
  const std::string where = "grouping record";
  GroupingPlan plan;
  plan.image_id = field<std::string>(row, "image_id", where);
  plan.head = field<std::vector<std::string>>(row, "head", where);
  plan.tail_groups = field<std::vector<std::vector<std::string>>>(row, "tail_groups", where);
  plan.m = plan.head.size();
  plan.n = plan.tail_groups.size();
  plan.k = plan.m * (plan.n + 1);
  return plan;
}

}  // namespace rapsg
