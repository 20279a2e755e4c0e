// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "rapsg/error.hpp"

namespace rapsg {

/// Lowercases ASCII, maps every byte outside [a-z0-9] to a space, splits on
/// whitespace. Shared by the summarizer fallback, CIDEr, BLEU and ROUGE.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char raw : text) {
    char c = raw;
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    const bool keep = (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9');
    if (keep) {
      cur.push_back(c);
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out.push_back(' ');
    out += t;
  }
  return out;
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Deterministic feature-hashing sentence embedder. Stands in for a real
/// sentence encoder in offline runs: unigrams and bigrams are hashed into
/// signed buckets, then the vector is scaled to unit length.
class HashEmbedder {
 public:
  static constexpr std::uint32_t kDefaultDim = 64;

  explicit HashEmbedder(std::uint32_t dim = kDefaultDim) : dim_(dim) {
    if (dim_ == 0) throw UsageError("hash embedder: dim must be positive");
  }

  std::uint32_t dim() const noexcept { return dim_; }

  std::vector<float> embed(std::string_view text) const {
    const auto tokens = tokenize(text);
    if (tokens.empty()) throw UsageError("hash embedder: text has no tokens");
    std::vector<double> acc(dim_, 0.0);
    auto add = [&](std::string_view feature, double weight) {
      const auto h = fnv1a64(feature);
      acc[h % dim_] += (h >> 63) ? -weight : weight;
    };
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      add(tokens[i], 1.0);
      if (i + 1 < tokens.size()) add(tokens[i] + "\x1f" + tokens[i + 1], 0.5);
    }
    double sq = 0.0;
    for (double v : acc) sq += v * v;
    if (sq == 0.0) {
      // Every feature cancelled out; fall back to a single bucket.
      acc[fnv1a64(text) % dim_] = 1.0;
      sq = 1.0;
    }
    const double norm = std::sqrt(sq);
    std::vector<float> out(dim_);
    for (std::size_t i = 0; i < dim_; ++i) out[i] = static_cast<float>(acc[i] / norm);
    return out;
  }

 private:
  std::uint32_t dim_;
};

}  // namespace rapsg
