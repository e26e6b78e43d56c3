#pragma once

// Pairwise image-text contrastive losses (sigmoid and softmax), their per-pair
// matrices, unconditional (self-similarity) losses and analytic gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "jest/core/errors.hpp"
#include "jest/core/matrix.hpp"

namespace jest {

enum class LossKind { sigmoid, softmax };

inline const char* to_string(LossKind k) { return k == LossKind::sigmoid ? "sigmoid" : "softmax"; }

/// Contrastive head: logits are alpha * <z_im, z_txt> + beta (sigmoid) or
/// t * <z_im, z_txt> (softmax).
struct ContrastiveParams {
  double alpha = 10.0;
  double beta = -10.0;
  double t = 10.0;

  void validate() const {
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ValueError("ContrastiveParams: alpha must be positive");
    if (!(t > 0.0) || !std::isfinite(t)) throw ValueError("ContrastiveParams: t must be positive");
    if (!std::isfinite(beta)) throw ValueError("ContrastiveParams: beta must be finite");
  }

  friend bool operator==(const ContrastiveParams&, const ContrastiveParams&) = default;
};

/// L2-normalizes every row in place. An all-zero row becomes the first basis
/// vector so downstream dot products stay finite.
inline void normalize_rows(Matrix& m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const double norm = std::sqrt(dot(row, row));
    if (norm == 0.0 || !std::isfinite(norm)) {
      std::fill(row.begin(), row.end(), 0.0);
      row[0] = 1.0;
      continue;
    }
    for (double& v : row) v /= norm;
  }
}

/// Paired image/text embeddings, rows unit-normalized at construction.
class EmbeddingBatch {
 public:
  EmbeddingBatch(Matrix image, Matrix text) : image_(std::move(image)), text_(std::move(text)) {
    if (!image_.same_shape(text_)) {
      throw ShapeError("EmbeddingBatch: image " + std::to_string(image_.rows()) + "x" +
                       std::to_string(image_.cols()) + " vs text " + std::to_string(text_.rows()) +
                       "x" + std::to_string(text_.cols()));
    }
    if (image_.rows() < 1 || image_.cols() < 1) throw ShapeError("EmbeddingBatch: n and d must be >= 1");
    normalize_rows(image_);
    normalize_rows(text_);
  }

  std::size_t n() const noexcept { return image_.rows(); }
  std::size_t d() const noexcept { return image_.cols(); }
  const Matrix& image() const noexcept { return image_; }
  const Matrix& text() const noexcept { return text_; }

  EmbeddingBatch gather(std::span<const std::size_t> indices) const {
    return {image_.gather_rows(indices), text_.gather_rows(indices)};
  }

 private:
  Matrix image_;
  Matrix text_;
};

/// Per-pair loss matrix. For the sigmoid kind entries are -log sigmoid
/// probabilities; for the softmax kind they are the negated logits.
struct LossMatrix {
  Matrix values;
  LossKind kind = LossKind::sigmoid;

  std::size_t n() const noexcept { return values.rows(); }
};

namespace detail {

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) noexcept { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double sigmoid(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <typename Get>
double logsumexp(std::size_t n, Get&& get) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, get(k));
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (std::size_t k = 0; k < n; ++k) s += std::exp(get(k) - mx);
  return mx + std::log(s);
}

inline void check_mask(std::span<const std::uint8_t> mask, std::size_t n) {
  if (mask.empty()) return;
  if (mask.size() != n) throw ShapeError("softmax_nll: mask length differs from batch size");
  bool any = false;
  for (auto m : mask) {
    if (m > 1) throw ValueError("softmax_nll: mask must be 0/1 valued");
    any = any || m == 1;
  }
  if (!any) throw ValueError("softmax_nll: mask selects no examples (empty negative set)");
}

}  // namespace detail

/// Raw logits: alpha * dot + beta for sigmoid, t * dot for softmax.
inline Matrix pairwise_logits(const EmbeddingBatch& batch, const ContrastiveParams& params, LossKind kind) {
  params.validate();
  Matrix logits = matmul_transposed(batch.image(), batch.text());
  for (double& v : logits.values()) {
    v = kind == LossKind::sigmoid ? v * params.alpha + params.beta : v * params.t;
  }
  return logits;
}

struct SigmoidLoss {
  double loss = 0.0;  // mean over rows of row sums
  LossMatrix nll;
};

/// Sigmoid loss from a precomputed logits matrix (diagonal = positive pairs).
inline SigmoidLoss sigmoid_nll_from_logits(const Matrix& logits) {
  if (logits.rows() != logits.cols() || logits.rows() == 0) throw ShapeError("sigmoid_nll: logits must be square");
  const std::size_t n = logits.rows();
  SigmoidLoss out{0.0, {Matrix(n, n), LossKind::sigmoid}};
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double row_sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double sign = i == j ? 1.0 : -1.0;
      const double v = detail::softplus(-sign * logits(i, j));
      out.nll.values(i, j) = v;
      row_sum += v;
    }
    total += row_sum;
  }
  out.loss = total / static_cast<double>(n);
  return out;
}

inline SigmoidLoss sigmoid_nll(const ContrastiveParams& params, const EmbeddingBatch& batch) {
  return sigmoid_nll_from_logits(pairwise_logits(batch, params, LossKind::sigmoid));
}

struct SoftmaxLoss {
  double loss = 0.0;                // mean of per_example
  std::vector<double> per_example;  // 0.5 * (image->text + text->image) terms
  std::vector<double> neg_logits;   // 0.5 * (lse over column i + lse over row i)
  LossMatrix neg_logits_matrix;     // -logits
};

/// Softmax loss from a precomputed logits matrix. When `sampled_mask` is non-empty,
/// entries whose row (column-wise lse) or column (row-wise lse) is not sampled
/// receive a -1e8 additive penalty.
inline SoftmaxLoss softmax_nll_from_logits(const Matrix& logits, std::span<const std::uint8_t> sampled_mask = {}) {
  if (logits.rows() != logits.cols() || logits.rows() == 0) throw ShapeError("softmax_nll: logits must be square");
  const std::size_t n = logits.rows();
  detail::check_mask(sampled_mask, n);
  const bool masked = !sampled_mask.empty();
  auto penalty = [&](std::size_t k) { return masked ? (1.0 - sampled_mask[k]) * 1e8 : 0.0; };

  SoftmaxLoss out;
  out.per_example.resize(n);
  out.neg_logits.resize(n);
  out.neg_logits_matrix = {Matrix(n, n), LossKind::softmax};
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double lse_col = detail::logsumexp(n, [&](std::size_t k) { return logits(k, i) - penalty(k); });
    const double lse_row = detail::logsumexp(n, [&](std::size_t k) { return logits(i, k) - penalty(k); });
    const double diag = logits(i, i);
    out.per_example[i] = 0.5 * ((lse_col - diag) + (lse_row - diag));
    out.neg_logits[i] = 0.5 * (lse_col + lse_row);
    total += out.per_example[i];
    for (std::size_t j = 0; j < n; ++j) out.neg_logits_matrix.values(i, j) = -logits(i, j);
  }
  out.loss = total / static_cast<double>(n);
  return out;
}

inline SoftmaxLoss softmax_nll(const ContrastiveParams& params, const EmbeddingBatch& batch,
                               std::span<const std::uint8_t> sampled_mask = {}) {
  return softmax_nll_from_logits(pairwise_logits(batch, params, LossKind::softmax), sampled_mask);
}

/// Loss of each pair in isolation (no negatives). The sigmoid kind equals the
/// diagonal of sigmoid_nll's matrix.
inline std::vector<double> unconditional_loss(const EmbeddingBatch& batch, const ContrastiveParams& params,
                                              LossKind kind) {
  params.validate();
  std::vector<double> out(batch.n());
  for (std::size_t i = 0; i < batch.n(); ++i) {
    const double s = dot(batch.image().row(i), batch.text().row(i));
    out[i] = kind == LossKind::softmax ? -params.alpha * s : detail::softplus(-(params.alpha * s + params.beta));
  }
  return out;
}

/// Analytic gradients of a scalar contrastive loss with respect to the
/// (already normalized) embedding rows and the head parameters.
struct ContrastiveGrads {
  double loss = 0.0;
  Matrix image;
  Matrix text;
  double alpha = 0.0;
  double beta = 0.0;
  double t = 0.0;
};

namespace detail {

// Given dL/dlogits (G) and the raw dot products, chains into embeddings.
inline void backprop_logits(const Matrix& g, double scale, const EmbeddingBatch& batch, ContrastiveGrads& out) {
  out.image = matmul(g, batch.text());
  out.text = matmul_at_b(g, batch.image());
  for (double& v : out.image.values()) v *= scale;
  for (double& v : out.text.values()) v *= scale;
}

}  // namespace detail

inline ContrastiveGrads grad_sigmoid_nll(const ContrastiveParams& params, const EmbeddingBatch& batch) {
  params.validate();
  const std::size_t n = batch.n();
  const Matrix dots = matmul_transposed(batch.image(), batch.text());
  Matrix g(n, n);
  ContrastiveGrads out;
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double row_sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double sign = i == j ? 1.0 : -1.0;
      const double logit = params.alpha * dots(i, j) + params.beta;
      row_sum += detail::softplus(-sign * logit);
      // d/dx softplus(-s x) = -s * sigmoid(-s x)
      const double gij = -sign * detail::sigmoid(-sign * logit) * inv_n;
      g(i, j) = gij;
      out.alpha += gij * dots(i, j);
      out.beta += gij;
    }
    total += row_sum;
  }
  out.loss = total / static_cast<double>(n);
  detail::backprop_logits(g, params.alpha, batch, out);
  return out;
}

/// Gradient of the unmasked softmax loss; only `t` is used by the head.
inline ContrastiveGrads grad_softmax_nll(const ContrastiveParams& params, const EmbeddingBatch& batch) {
  params.validate();
  const std::size_t n = batch.n();
  const Matrix dots = matmul_transposed(batch.image(), batch.text());
  Matrix logits = dots;
  for (double& v : logits.values()) v *= params.t;

  std::vector<double> lse_row(n), lse_col(n);
  for (std::size_t i = 0; i < n; ++i) {
    lse_row[i] = detail::logsumexp(n, [&](std::size_t k) { return logits(i, k); });
    lse_col[i] = detail::logsumexp(n, [&](std::size_t k) { return logits(k, i); });
  }

  ContrastiveGrads out;
  Matrix g(n, n);
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    total += 0.5 * ((lse_col[i] - logits(i, i)) + (lse_row[i] - logits(i, i)));
    for (std::size_t j = 0; j < n; ++j) {
      const double p_row = std::exp(logits(i, j) - lse_row[i]);
      const double p_col = std::exp(logits(i, j) - lse_col[j]);
      double gij = 0.5 * inv_n * (p_row + p_col);
      if (i == j) gij -= inv_n;
      g(i, j) = gij;
      out.t += gij * dots(i, j);
    }
  }
  out.loss = total * inv_n;
  detail::backprop_logits(g, params.t, batch, out);
  return out;
}

}  // namespace jest
