// SPDX-License-Identifier: Apache-2.0
//
// InfoNCE guidance loss over paired image/text embeddings, its analytic
// gradient, and the CLIP-S relevance score.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "rapsg/embedding_store.hpp"
#include "rapsg/error.hpp"

namespace rapsg {

inline constexpr double kDefaultTemperature = 0.07;
inline constexpr double kClipScoreWeight = 2.5;

/// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), values(r * c, 0.0) {}

  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(values).subspan(r * cols, cols);
  }
};

/// Row i of `images` is a query q; row i of `texts` is its positive key and
/// every other text row is an in-batch negative.
struct GuidanceBatch {
  Matrix images;
  Matrix texts;
  double tau = kDefaultTemperature;

  std::size_t size() const noexcept { return images.rows; }
  std::size_t dim() const noexcept { return images.cols; }

  /// Builds a batch and checks that every row is unit length.
  static GuidanceBatch from_rows(Matrix images, Matrix texts, double tau) {
    GuidanceBatch b{std::move(images), std::move(texts), tau};
    b.check_shape();
    for (const Matrix* m : {&b.images, &b.texts}) {
      for (std::size_t r = 0; r < m->rows; ++r) {
        double sq = 0.0;
        for (double v : m->row(r)) sq += v * v;
        if (std::abs(std::sqrt(sq) - 1.0) > kUnitNormTolerance) {
          throw UsageError("guidance batch: row " + std::to_string(r) + " is not unit-normalized");
        }
      }
    }
    return b;
  }

  void check_shape() const {
    if (images.rows == 0) throw UsageError("guidance batch: empty batch");
    if (images.rows != texts.rows || images.cols != texts.cols) {
      throw UsageError("guidance batch: image matrix " + std::to_string(images.rows) + "x" +
                       std::to_string(images.cols) + " does not match text matrix " +
                       std::to_string(texts.rows) + "x" + std::to_string(texts.cols));
    }
    if (!(tau > 0.0) || !std::isfinite(tau)) throw UsageError("guidance batch: tau must be > 0");
  }
};

/// A[i][j] = <image_i, text_j> / tau.
inline Matrix affinity_matrix(const GuidanceBatch& batch) {
  batch.check_shape();
  const std::size_t b = batch.size();
  Matrix a(b, b);
  for (std::size_t i = 0; i < b; ++i) {
    const auto q = batch.images.row(i);
    for (std::size_t j = 0; j < b; ++j) {
      const auto k = batch.texts.row(j);
      double acc = 0.0;
      for (std::size_t d = 0; d < q.size(); ++d) acc += q[d] * k[d];
      a(i, j) = acc / batch.tau;
    }
  }
  return a;
}

struct InfoNceResult {
  double loss = 0.0;
  Matrix grad_images;  // dL/d(images)
  Matrix grad_texts;   // dL/d(texts)
};

namespace detail {

// Row-wise softmax cross-entropy against the diagonal. Adds dL/dA (scaled by
// `weight`) into `grad_a` and returns the mean loss. When `transpose` is set
// the rows of A^T are used.
inline double diagonal_cross_entropy(const Matrix& a, bool transpose, double weight, Matrix& grad_a) {
  const std::size_t b = a.rows;
  auto at = [&](std::size_t i, std::size_t j) { return transpose ? a(j, i) : a(i, j); };
  double total = 0.0;
  std::vector<double> shifted(b);
  for (std::size_t i = 0; i < b; ++i) {
    double mx = at(i, 0);
    for (std::size_t j = 1; j < b; ++j) mx = std::max(mx, at(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < b; ++j) {
      shifted[j] = std::exp(at(i, j) - mx);
      sum += shifted[j];
    }
    const double lse = mx + std::log(sum);
    total += lse - at(i, i);
    for (std::size_t j = 0; j < b; ++j) {
      const double g = (shifted[j] / sum - (i == j ? 1.0 : 0.0)) * weight / static_cast<double>(b);
      if (transpose) {
        grad_a(j, i) += g;
      } else {
        grad_a(i, j) += g;
      }
    }
  }
  return total / static_cast<double>(b);
}

}  // namespace detail

/// Mean over images of -log softmax(A[i])[i]. With `symmetric`, the mean of
/// the image-anchored and text-anchored losses. Gradients are with respect to
/// the rows exactly as given (no renormalization).
inline InfoNceResult infonce_loss(const GuidanceBatch& batch, bool symmetric = false) {
  batch.check_shape();
  for (const Matrix* m : {&batch.images, &batch.texts}) {
    for (double v : m->values) {
      if (!std::isfinite(v)) throw UsageError("infonce_loss: non-finite embedding value");
    }
  }
  const Matrix a = affinity_matrix(batch);
  const std::size_t b = batch.size();
  const std::size_t d = batch.dim();

  Matrix grad_a(b, b);
  double loss = 0.0;
  if (symmetric) {
    loss = 0.5 * detail::diagonal_cross_entropy(a, false, 0.5, grad_a) +
           0.5 * detail::diagonal_cross_entropy(a, true, 0.5, grad_a);
  } else {
    loss = detail::diagonal_cross_entropy(a, false, 1.0, grad_a);
  }
  if (!std::isfinite(loss)) throw UsageError("infonce_loss: non-finite loss");

  InfoNceResult out{loss, Matrix(b, d), Matrix(b, d)};
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      const double g = grad_a(i, j) / batch.tau;
      if (g == 0.0) continue;
      const auto q = batch.images.row(i);
      const auto k = batch.texts.row(j);
      for (std::size_t c = 0; c < d; ++c) {
        out.grad_images(i, c) += g * k[c];
        out.grad_texts(j, c) += g * q[c];
      }
    }
  }
  return out;
}

/// 2.5 * max(cos(image, text), 0).
inline double clip_s(std::span<const float> image, std::span<const float> text) {
  if (image.size() != text.size()) {
    throw UsageError("clip_s: dims " + std::to_string(image.size()) + " and " +
                     std::to_string(text.size()) + " differ");
  }
  double dot = 0.0;
  double ni = 0.0;
  double nt = 0.0;
  for (std::size_t i = 0; i < image.size(); ++i) {
    dot += static_cast<double>(image[i]) * text[i];
    ni += static_cast<double>(image[i]) * image[i];
    nt += static_cast<double>(text[i]) * text[i];
  }
  if (ni == 0.0 || nt == 0.0) throw UsageError("clip_s: zero-norm embedding");
  const double cosine = dot / std::sqrt(ni * nt);
  return kClipScoreWeight * std::max(cosine, 0.0);
}

inline Matrix rows_to_matrix(const EmbeddingStore& store, std::span<const std::string> ids) {
  Matrix m(ids.size(), store.dim());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const auto src = store.row(ids[r]);
    for (std::size_t c = 0; c < src.size(); ++c) m(r, c) = src[c];
  }
  return m;
}

}  // namespace rapsg
