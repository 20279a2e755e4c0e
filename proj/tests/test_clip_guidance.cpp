// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <numbers>
#include <random>

#include "oracles.hpp"
#include "rapsg/clip_guidance.hpp"
#include "test_util.hpp"

namespace rapsg {
namespace {

Matrix random_unit_rows(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      m(r, c) = g(rng);
      sq += m(r, c) * m(r, c);
    }
    for (std::size_t c = 0; c < cols; ++c) m(r, c) /= std::sqrt(sq);
  }
  return m;
}

TEST(Affinity, SingleRow) {
  Matrix q(1, 3), k(1, 3);
  q(0, 0) = k(0, 0) = 1.0;
  const auto a = affinity_matrix(GuidanceBatch::from_rows(q, k, 1.0));
  ASSERT_EQ(a.rows, 1u);
  EXPECT_DOUBLE_EQ(a(0, 0), 1.0);
}

TEST(Affinity, OrthonormalBasis) {
  Matrix e(3, 3);
  for (int i = 0; i < 3; ++i) e(i, i) = 1.0;
  const auto a = affinity_matrix(GuidanceBatch::from_rows(e, e, 0.5));
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(a(i, j), i == j ? 2.0 : 0.0);
  }
}

TEST(Affinity, MatchesNaiveProduct) {
  std::mt19937_64 rng(1);
  const auto q = random_unit_rows(rng, 7, 10);
  const auto k = random_unit_rows(rng, 7, 10);
  const auto a = affinity_matrix(GuidanceBatch::from_rows(q, k, 0.07));
  for (std::size_t i = 0; i < 7; ++i) {
    for (std::size_t j = 0; j < 7; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < 10; ++c) s += q(i, c) * k(j, c);
      EXPECT_NEAR(a(i, j), s / 0.07, 1e-12);
    }
  }
}

TEST(InfoNce, SingletonBatchHasZeroLoss) {
  std::mt19937_64 rng(2);
  const auto q = random_unit_rows(rng, 1, 8);
  const auto k = random_unit_rows(rng, 1, 8);
  const auto r = infonce_loss(GuidanceBatch::from_rows(q, k, 0.07));
  EXPECT_EQ(r.loss, 0.0);
  for (double v : r.grad_images.values) EXPECT_EQ(v, 0.0);
}

TEST(InfoNce, IdenticalKeysGiveLogB) {
  std::mt19937_64 rng(3);
  for (std::size_t b : {2u, 4u, 9u}) {
    const auto q = random_unit_rows(rng, b, 6);
    const auto one = random_unit_rows(rng, 1, 6);
    Matrix k(b, 6);
    for (std::size_t r = 0; r < b; ++r) {
      for (std::size_t c = 0; c < 6; ++c) k(r, c) = one(0, c);
    }
    EXPECT_NEAR(infonce_loss(GuidanceBatch::from_rows(q, k, 0.07)).loss, std::log(static_cast<double>(b)), 1e-12);
  }
}

TEST(InfoNce, MatchesNaiveLoss) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 20; ++t) {
    const std::size_t b = 1 + rng() % 16, d = 1 + rng() % 64;
    const auto q = random_unit_rows(rng, b, d);
    const auto k = random_unit_rows(rng, b, d);
    const double want = oracle::infonce(q.values, k.values, b, d, 0.07);
    EXPECT_NEAR(infonce_loss(GuidanceBatch::from_rows(q, k, 0.07)).loss, want, 1e-10 * std::max(1.0, want));
  }
}

TEST(InfoNce, SharpTemperatureStaysFinite) {
  Matrix q(2, 2), k(2, 2);
  q(0, 0) = k(1, 0) = 1.0;
  q(1, 1) = k(0, 1) = 1.0;
  const auto r = infonce_loss(GuidanceBatch::from_rows(q, k, 1e-3));
  EXPECT_NEAR(r.loss, 1000.0, 1e-9);
}

// Central differences of the naive loss against the analytic gradient, per
// coordinate, relative to the larger magnitude (floored for coordinates whose
// true gradient is essentially zero).
void check_gradients(std::size_t b, std::size_t d, bool symmetric, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double tau = 0.07, h = 1e-5;
  const auto q = random_unit_rows(rng, b, d);
  const auto k = random_unit_rows(rng, b, d);
  const auto r = infonce_loss(GuidanceBatch{q, k, tau}, symmetric);

  auto loss = [&](const std::vector<double>& qv, const std::vector<double>& kv) {
    if (!symmetric) return oracle::infonce(qv, kv, b, d, tau);
    return 0.5 * (oracle::infonce(qv, kv, b, d, tau) + oracle::infonce(kv, qv, b, d, tau));
  };
  auto check = [&](bool wrt_q, const Matrix& grad) {
    for (std::size_t i = 0; i < b * d; ++i) {
      auto qp = q.values, kp = k.values;
      auto qm = q.values, km = k.values;
      (wrt_q ? qp : kp)[i] += h;
      (wrt_q ? qm : km)[i] -= h;
      const double fd = (loss(qp, kp) - loss(qm, km)) / (2.0 * h);
      const double an = grad.values[i];
      const double scale = std::max({std::abs(fd), std::abs(an), 1e-6});
      ASSERT_LE(std::abs(fd - an) / scale, 1e-4)
          << (wrt_q ? "q" : "k") << "[" << i << "] analytic " << an << " fd " << fd;
    }
  };
  check(true, r.grad_images);
  check(false, r.grad_texts);
}

TEST(InfoNce, GradientsMatchFiniteDifferences) {
  check_gradients(2, 3, false, 10);
  check_gradients(8, 16, false, 11);
  check_gradients(16, 64, false, 12);
}

TEST(InfoNce, SymmetricGradientsMatchFiniteDifferences) {
  check_gradients(5, 8, true, 13);
  check_gradients(16, 32, true, 14);
}

TEST(InfoNce, NonNegativeAndBoundedWhenDiagonalDominates) {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 100; ++t) {
    const std::size_t b = 1 + rng() % 12, d = 2 + rng() % 20;
    const auto q = random_unit_rows(rng, b, d);
    const auto k = random_unit_rows(rng, b, d);
    const auto batch = GuidanceBatch::from_rows(q, k, 0.07);
    const double loss = infonce_loss(batch).loss;
    EXPECT_GE(loss, 0.0);
    const auto a = affinity_matrix(batch);
    bool dominant = true;
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < b; ++j) dominant = dominant && a(i, j) <= a(i, i);
    }
    if (dominant) {
      EXPECT_LE(loss, std::log(static_cast<double>(b)) + 1e-12);
    }
  }
}

TEST(InfoNce, PermutationEquivariance) {
  std::mt19937_64 rng(7);
  const std::size_t b = 6, d = 5;
  const auto q = random_unit_rows(rng, b, d);
  const auto k = random_unit_rows(rng, b, d);
  std::vector<std::size_t> perm(b);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Matrix qp(b, d), kp(b, d);
  for (std::size_t r = 0; r < b; ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      qp(r, c) = q(perm[r], c);
      kp(r, c) = k(perm[r], c);
    }
  }
  const auto base = infonce_loss(GuidanceBatch::from_rows(q, k, 0.07));
  const auto moved = infonce_loss(GuidanceBatch::from_rows(qp, kp, 0.07));
  EXPECT_NEAR(base.loss, moved.loss, 1e-12);
  for (std::size_t r = 0; r < b; ++r) {
    for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(moved.grad_images(r, c), base.grad_images(perm[r], c), 1e-12);
  }
}

TEST(InfoNce, RejectsBadBatches) {
  Matrix q(2, 3), k(3, 3);
  EXPECT_THROW(infonce_loss(GuidanceBatch{q, k, 0.07}), UsageError);
  EXPECT_THROW(infonce_loss(GuidanceBatch{Matrix(0, 3), Matrix(0, 3), 0.07}), UsageError);
  Matrix e(1, 2);
  e(0, 0) = 1.0;
  EXPECT_THROW(infonce_loss(GuidanceBatch{e, e, 0.0}), UsageError);
  Matrix bad = e;
  bad(0, 1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(infonce_loss(GuidanceBatch{bad, e, 0.07}), UsageError);
  Matrix unnormalized(1, 2);
  unnormalized(0, 0) = 2.0;
  EXPECT_THROW(GuidanceBatch::from_rows(unnormalized, e, 0.07), UsageError);
}

TEST(ClipS, Anchors) {
  const std::vector<float> a{0.6f, 0.8f}, neg{-0.6f, -0.8f}, ortho{0.8f, -0.6f};
  EXPECT_NEAR(clip_s(a, a), 2.5, 1e-6);
  EXPECT_EQ(clip_s(a, neg), 0.0);
  EXPECT_NEAR(clip_s(a, ortho), 0.0, 1e-7);
  // Scale invariant: only the angle matters.
  const std::vector<float> a3{1.8f, 2.4f};
  EXPECT_NEAR(clip_s(a, a3), 2.5, 1e-6);
}

TEST(ClipS, MatchesFormulaOnRandomVectors) {
  std::mt19937_64 rng(8);
  std::normal_distribution<float> g(0.0f, 1.0f);
  for (int t = 0; t < 100; ++t) {
    std::vector<float> x(32), y(32);
    for (auto& v : x) v = g(rng);
    for (auto& v : y) v = g(rng);
    const double c = oracle::dot(x.data(), y.data(), 32) /
                     std::sqrt(oracle::dot(x.data(), x.data(), 32) * oracle::dot(y.data(), y.data(), 32));
    EXPECT_NEAR(clip_s(x, y), 2.5 * std::max(c, 0.0), 1e-12);
  }
}

TEST(ClipS, Errors) {
  const std::vector<float> a{1.0f, 0.0f}, z{0.0f, 0.0f}, three{1.0f, 0.0f, 0.0f};
  EXPECT_THROW(clip_s(a, z), UsageError);
  EXPECT_THROW(clip_s(a, three), UsageError);
}

TEST(RowsToMatrix, GathersById) {
  std::mt19937_64 rng(9);
  const auto store = testing::random_store(rng, 5, 4, "t");
  const std::vector<std::string> ids{"t3", "t0"};
  const auto m = rows_to_matrix(store, ids);
  ASSERT_EQ(m.rows, 2u);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(m(0, c), static_cast<double>(store.row("t3")[c]));
    EXPECT_EQ(m(1, c), static_cast<double>(store.row("t0")[c]));
  }
  const std::vector<std::string> missing{"nope"};
  EXPECT_THROW(rows_to_matrix(store, missing), InputError);
}

}  // namespace
}  // namespace rapsg
