// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "rapsg/fluency_filter.hpp"
#include "test_util.hpp"

namespace rapsg {
namespace {

using Tokens = std::vector<std::string>;

TEST(Tokenize, Examples) {
  EXPECT_EQ(tokenize("A man, riding!"), (Tokens{"a", "man", "riding"}));
  EXPECT_EQ(tokenize(""), Tokens{});
  EXPECT_EQ(tokenize("Kite-flying 2day"), (Tokens{"kite", "flying", "2day"}));
  EXPECT_EQ(tokenize("  \t...  "), Tokens{});
}

TEST(Tokenize, AgreesWithOracleTokenizer) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> ch(0, 127);
  for (int i = 0; i < 200; ++i) {
    std::string s;
    for (int j = 0; j < 40; ++j) s.push_back(static_cast<char>(ch(rng)));
    EXPECT_EQ(tokenize(s), oracle::words(s));
  }
}

TEST(BuildIdf, SmallCorpus) {
  const auto idf = build_idf({"a dog", "a cat"});
  EXPECT_EQ(idf.documents(), 2u);
  EXPECT_EQ(idf.df(1, "a"), 2u);
  EXPECT_EQ(idf.df(1, "dog"), 1u);
  EXPECT_EQ(idf.df(2, "a dog"), 1u);
  EXPECT_EQ(idf.df(1, "bird"), 0u);
  EXPECT_DOUBLE_EQ(idf.weight(1, "a"), 0.0);
  EXPECT_DOUBLE_EQ(idf.weight(1, "dog"), std::log(2.0));
  EXPECT_DOUBLE_EQ(idf.weight(1, "bird"), std::log(2.0));
}

TEST(BuildIdf, RepeatsInsideOneDocumentCountOnce) {
  const auto idf = build_idf({"dog dog dog"});
  EXPECT_EQ(idf.df(1, "dog"), 1u);
  EXPECT_EQ(idf.df(2, "dog dog"), 1u);
  EXPECT_EQ(idf.weight(1, "dog"), 0.0);
}

TEST(BuildIdf, EmptyCorpusIsPreconditionError) { EXPECT_THROW(build_idf({}), UsageError); }

TEST(BuildIdf, MatchesRecountOnRandomCorpus) {
  std::mt19937_64 rng(11);
  std::vector<std::string> corpus;
  for (int i = 0; i < 100; ++i) corpus.push_back(testing::random_sentence(rng, 1, 12));
  const auto idf = build_idf(corpus);
  for (std::size_t n = 1; n <= kMaxNgram; ++n) {
    ASSERT_FALSE(idf.table(n).empty());
    for (const auto& [gram, df] : idf.table(n)) {
      const auto g = tokenize(gram);
      ASSERT_EQ(g.size(), n);
      std::size_t expect = 0;
      for (const auto& doc : corpus) expect += oracle::count_of(oracle::ngrams(oracle::words(doc), n), g) > 0;
      EXPECT_EQ(df, expect) << gram;
    }
  }
}

// Corpus where the probe sentence's n-grams all have df < M.
std::vector<std::string> probe_corpus() {
  return {"a man rides a skateboard", "two dogs on the grass", "a red bus in the street", "kite over a beach"};
}

TEST(CiderD, SelfMatchIsTen) {
  const auto corpus = probe_corpus();
  const auto idf = build_idf(corpus);
  EXPECT_NEAR(cider_d("a man rides a skateboard", {"a man rides a skateboard"}, idf), 10.0, 1e-12);
  EXPECT_NEAR(cider_d("two dogs on the grass", {"two dogs on the grass"}, idf), 10.0, 1e-12);
}

TEST(CiderD, DisjointIsZero) {
  const auto idf = build_idf(probe_corpus());
  EXPECT_EQ(cider_d("two dogs", {"red bus"}, idf), 0.0);
  EXPECT_EQ(cider_d("", {"red bus"}, idf), 0.0);
  EXPECT_THROW(cider_d("red bus", {}, idf), UsageError);
}

TEST(CiderD, HandComputedUnigramOnlyCase) {
  // Two-token sentences: only n = 1, 2 contribute, and n = 2 is disjoint.
  const auto idf = build_idf({"dog cat", "bird fish", "cow pig"});
  // cand "dog fish", ref "dog cat": unigram cosine = w^2 / (sqrt(2) w * sqrt(2) w) = 0.5
  const double expect = 10.0 * (0.5 / 4.0);
  EXPECT_NEAR(cider_d("dog fish", {"dog cat"}, idf), expect, 1e-12);
}

TEST(CiderD, MatchesOracleOnRandomPairs) {
  std::mt19937_64 rng(2024);
  std::vector<std::string> corpus;
  for (int i = 0; i < 60; ++i) corpus.push_back(testing::random_sentence(rng, 1, 20));
  const auto idf = build_idf(corpus);
  for (int i = 0; i < 100; ++i) {
    const auto cand = testing::random_sentence(rng, 1, 20);
    std::vector<std::string> refs;
    const int nref = 1 + static_cast<int>(rng() % 3);
    for (int r = 0; r < nref; ++r) refs.push_back(testing::random_sentence(rng, 1, 20));
    const double got = cider_d(cand, refs, idf);
    const double want = oracle::cider_d(cand, refs, corpus);
    EXPECT_NEAR(got, want, 1e-9 * std::max(1.0, std::abs(want))) << cand;
    EXPECT_GE(got, 0.0);
    EXPECT_LE(got, 10.0 + 1e-12);
  }
}

TEST(CiderD, RepeatingACandidateTokenDoesNotInflateTheNumerator) {
  const auto idf = build_idf({"dog cat", "bird fish", "cow pig", "dog"});
  const auto ref = weigh("dog cat", idf);
  auto numerator = [&](const std::string& cand) {
    const auto c = weigh(cand, idf);
    return ngram_similarity(c, ref, 1, CiderVariant::kCiderD) * std::sqrt(c.sq_norm[0] * ref.sq_norm[0]);
  };
  const double once = numerator("dog");
  for (const char* s : {"dog dog", "dog dog dog", "dog dog dog dog dog"}) EXPECT_NEAR(numerator(s), once, 1e-12) << s;
  // The plain variant has no clipping, so the numerator grows.
  const auto c = weigh("dog dog dog", idf);
  EXPECT_GT(ngram_similarity(c, ref, 1, CiderVariant::kPlain) * std::sqrt(c.sq_norm[0] * ref.sq_norm[0]), once);
}

TEST(CiderD, LengthPenaltyShrinksLongerCandidates) {
  const auto idf = build_idf(probe_corpus());
  const double base = cider_d("a man rides", {"a man rides"}, idf);
  const double padded = cider_d("a man rides x y z w v u t", {"a man rides"}, idf);
  EXPECT_LT(padded, base);
}

TEST(CiderPlain, IsUnscaledCosineAverage) {
  const auto idf = build_idf(probe_corpus());
  const CiderOptions plain{CiderVariant::kPlain, kDefaultCiderSigma};
  EXPECT_NEAR(cider("a man rides a skateboard", {"a man rides a skateboard"}, idf, plain), 1.0, 1e-12);
  // No length penalty: padding with unseen tokens changes only the norms.
  EXPECT_GT(cider("two dogs on the grass", {"two dogs"}, idf, plain), 0.0);
}

TEST(SelectBest, SelfMatchWinsAtIndexZero) {
  const auto idf = build_idf(probe_corpus());
  const auto r = select_best("img", {"a red bus in the street", "a red bus", "kite over a beach"},
                             "a red bus in the street", idf);
  EXPECT_EQ(r.selected_index, 0u);
  EXPECT_EQ(r.selected_sentence, "a red bus in the street");
  EXPECT_NEAR(r.scores[0], 10.0, 1e-12);
}

TEST(SelectBest, TiesGoToLowestIndex) {
  const auto idf = build_idf(probe_corpus());
  const auto r = select_best("img", {"kite", "a red bus", "a red bus", "a red bus"}, "a red bus", idf);
  EXPECT_EQ(r.selected_index, 1u);
  const auto zeros = select_best("img", {"x", "y", "z"}, "a red bus", idf);
  EXPECT_EQ(zeros.selected_index, 0u);
  EXPECT_EQ(argmax_lowest({1.0, 3.0, 3.0, 2.0}), 1u);
}

TEST(SelectBest, ArgmaxAgreesWithOracleOnRandomSets) {
  std::mt19937_64 rng(77);
  std::vector<std::string> corpus;
  for (int i = 0; i < 40; ++i) corpus.push_back(testing::random_sentence(rng, 3, 12));
  const auto idf = build_idf(corpus);
  for (int i = 0; i < 50; ++i) {
    std::vector<std::string> cands;
    for (int c = 0; c < 5; ++c) cands.push_back(testing::random_sentence(rng, 2, 14));
    const auto pred = corpus[i % corpus.size()];
    const auto r = select_best("img", cands, pred, idf);
    std::vector<double> want;
    for (const auto& c : cands) want.push_back(oracle::cider_d(c, {pred}, corpus));
    std::size_t best = 0;
    for (std::size_t c = 1; c < want.size(); ++c) {
      if (want[c] > want[best] + 1e-12) best = c;
    }
    EXPECT_EQ(r.selected_index, best);
    EXPECT_EQ(r.selected_sentence, cands[r.selected_index]);
  }
}

TEST(SelectBest, ArgmaxInvariantUnderMonotoneTransform) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 10.0);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> s(6);
    for (auto& v : s) v = std::floor(u(rng));  // coarse values so ties happen
    std::vector<double> t;
    for (double v : s) t.push_back(std::exp(0.3 * v) + 2.0);
    EXPECT_EQ(argmax_lowest(s), argmax_lowest(t));
  }
}

TEST(SelectBest, PreconditionErrors) {
  const auto idf = build_idf(probe_corpus());
  EXPECT_THROW(select_best("img", {}, "a dog", idf), UsageError);
  EXPECT_THROW(select_best("img", {"a dog"}, " , ", idf), UsageError);
}

TEST(SelectBest, JsonShape) {
  const auto idf = build_idf(probe_corpus());
  const auto j = filter_to_json(select_best("img3", {"a red bus"}, "a red bus", idf));
  EXPECT_EQ(j["image_id"], "img3");
  EXPECT_EQ(j["selected_index"], 0);
  EXPECT_EQ(j["scores"].size(), 1u);
}

}  // namespace
}  // namespace rapsg
