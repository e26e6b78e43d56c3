#pragma once

// Score matrices built from learner/reference loss matrices, and the on-disk
// reference embedding cache.
//
// Cache layout (all little-endian):
//   8 bytes   magic "JESTREF1"
//   u64       n
//   u64       d
//   f32[n*d]  image embeddings, row-major
//   f32[n*d]  text embeddings, row-major
//   f64 x 3   alpha, beta, t
// Trainer checkpoints reuse the same envelope under the magic "JESTCKPT".

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "jest/contrastive.hpp"
#include "jest/core/binary_io.hpp"
#include "jest/core/errors.hpp"
#include "jest/core/matrix.hpp"

namespace jest {

enum class ScoringMethod { learnability, easy_ref, hard_learner };

inline const char* to_string(ScoringMethod m) {
  switch (m) {
    case ScoringMethod::learnability: return "learnability";
    case ScoringMethod::easy_ref: return "easy_ref";
    case ScoringMethod::hard_learner: return "hard_learner";
  }
  return "?";
}

inline ScoringMethod parse_scoring_method(std::string_view s) {
  if (s == "learnability") return ScoringMethod::learnability;
  if (s == "easy_ref") return ScoringMethod::easy_ref;
  if (s == "hard_learner") return ScoringMethod::hard_learner;
  throw ValueError("unknown scoring method: " + std::string(s));
}

inline constexpr double kDefaultScoreGain = 100.0;

struct ScoreMatrix {
  Matrix values;
  ScoringMethod method = ScoringMethod::learnability;
  double gain = kDefaultScoreGain;

  std::size_t n() const noexcept { return values.rows(); }
  double operator()(std::size_t i, std::size_t j) const noexcept { return values(i, j); }

  /// Wraps an arbitrary square matrix (synthetic benchmarks, tests).
  static ScoreMatrix from_values(Matrix v, double gain = 1.0,
                                 ScoringMethod method = ScoringMethod::learnability) {
    if (v.rows() != v.cols() || v.rows() == 0) throw ShapeError("ScoreMatrix: values must be square and non-empty");
    if (!v.all_finite()) throw ValueError("ScoreMatrix: non-finite entries");
    return {std::move(v), method, gain};
  }
};

/// learnability: gain * (L - R); easy_ref: gain * (-R); hard_learner: gain * L.
inline ScoreMatrix build_scores(const LossMatrix& learner_nll, const LossMatrix& reference_nll,
                               ScoringMethod method, double gain = kDefaultScoreGain) {
  if (!learner_nll.values.same_shape(reference_nll.values) || learner_nll.n() != learner_nll.values.cols()) {
    throw ShapeError("build_scores: learner and reference matrices must be square with equal shape");
  }
  if (learner_nll.kind != reference_nll.kind) throw ValueError("build_scores: loss kinds differ");
  if (!(gain > 0.0) || !std::isfinite(gain)) throw ValueError("build_scores: gain must be positive");

  const std::size_t n = learner_nll.n();
  ScoreMatrix out{Matrix(n, n), method, gain};
  const auto& l = learner_nll.values.values();
  const auto& r = reference_nll.values.values();
  auto& s = out.values.values();
  for (std::size_t k = 0; k < s.size(); ++k) {
    switch (method) {
      case ScoringMethod::learnability: s[k] = gain * (l[k] - r[k]); break;
      case ScoringMethod::easy_ref: s[k] = gain * (-r[k]); break;
      case ScoringMethod::hard_learner: s[k] = gain * l[k]; break;
    }
  }
  if (!out.values.all_finite()) throw ValueError("build_scores: non-finite scores");
  return out;
}

/// Fixed reference-model embeddings for a dataset, stored in single precision.
class ReferenceCache {
 public:
  ReferenceCache(std::size_t n, std::size_t d, std::vector<float> image, std::vector<float> text,
                 ContrastiveParams params)
      : n_(n), d_(d), image_(std::move(image)), text_(std::move(text)), params_(params) {
    if (n_ < 1 || d_ < 1) throw ShapeError("ReferenceCache: n and d must be >= 1");
    if (image_.size() != n_ * d_ || text_.size() != n_ * d_) throw ShapeError("ReferenceCache: buffer size mismatch");
    params_.validate();
  }

  static ReferenceCache from_batch(const EmbeddingBatch& batch, const ContrastiveParams& params) {
    auto narrow = [](const Matrix& m) {
      std::vector<float> v(m.size());
      for (std::size_t k = 0; k < v.size(); ++k) v[k] = static_cast<float>(m.values()[k]);
      return v;
    };
    return {batch.n(), batch.d(), narrow(batch.image()), narrow(batch.text()), params};
  }

  std::size_t n() const noexcept { return n_; }
  std::size_t d() const noexcept { return d_; }
  const std::vector<float>& image() const noexcept { return image_; }
  const std::vector<float>& text() const noexcept { return text_; }
  const ContrastiveParams& params() const noexcept { return params_; }

  /// Embeddings for the given dataset rows, widened to double and renormalized.
  EmbeddingBatch gather(std::span<const std::size_t> rows) const {
    Matrix img(rows.size(), d_), txt(rows.size(), d_);
    for (std::size_t k = 0; k < rows.size(); ++k) {
      if (rows[k] >= n_) throw ShapeError("ReferenceCache: row " + std::to_string(rows[k]) + " out of range");
      for (std::size_t c = 0; c < d_; ++c) {
        img(k, c) = image_[rows[k] * d_ + c];
        txt(k, c) = text_[rows[k] * d_ + c];
      }
    }
    return {std::move(img), std::move(txt)};
  }

  EmbeddingBatch to_batch() const {
    std::vector<std::size_t> all(n_);
    for (std::size_t k = 0; k < n_; ++k) all[k] = k;
    return gather(all);
  }

  /// Reference loss matrix over the given rows.
  LossMatrix loss_matrix(std::span<const std::size_t> rows) const {
    return sigmoid_nll(params_, gather(rows)).nll;
  }

  friend bool operator==(const ReferenceCache&, const ReferenceCache&) = default;

 private:
  std::size_t n_;
  std::size_t d_;
  std::vector<float> image_;
  std::vector<float> text_;
  ContrastiveParams params_;
};

inline constexpr std::string_view kReferenceMagic = "JESTREF1";

namespace detail {

struct Envelope {
  std::uint64_t n = 0;
  std::uint64_t d = 0;
  std::vector<float> first;
  std::vector<float> second;
  ContrastiveParams params;
};

inline std::vector<char> encode_envelope(std::string_view magic, const Envelope& e) {
  io::ByteWriter w;
  w.bytes(magic);
  w.u64(e.n);
  w.u64(e.d);
  for (float v : e.first) w.f32(v);
  for (float v : e.second) w.f32(v);
  w.f64(e.params.alpha);
  w.f64(e.params.beta);
  w.f64(e.params.t);
  return w.buffer();
}

inline Envelope decode_envelope(std::string_view magic, std::vector<char> bytes) {
  io::ByteReader r(std::move(bytes));
  r.expect(magic);
  Envelope e;
  const std::uint64_t header_end = r.offset();
  e.n = r.u64("n");
  e.d = r.u64("d");
  if (e.n == 0 || e.d == 0) throw FormatError("n and d must be >= 1", header_end);
  constexpr std::uint64_t kMax = std::numeric_limits<std::uint64_t>::max();
  if (e.n > kMax / e.d || e.n * e.d > kMax / 8) throw FormatError("dimension overflow", header_end);
  const std::uint64_t count = e.n * e.d;
  if (r.remaining() < 24 || (r.remaining() - 24) / 8 < count) {
    throw FormatError("truncated file: header promises more data than present", r.offset());
  }
  e.first.resize(count);
  e.second.resize(count);
  for (auto& v : e.first) v = r.f32("embedding");
  for (auto& v : e.second) v = r.f32("embedding");
  const std::uint64_t params_at = r.offset();
  e.params.alpha = r.f64("alpha");
  e.params.beta = r.f64("beta");
  e.params.t = r.f64("t");
  r.expect_end();
  try {
    e.params.validate();
  } catch (const ValueError& err) {
    throw FormatError(err.what(), params_at);
  }
  return e;
}

}  // namespace detail

inline std::vector<char> encode_reference_cache(const ReferenceCache& c) {
  return detail::encode_envelope(kReferenceMagic, {c.n(), c.d(), c.image(), c.text(), c.params()});
}

inline ReferenceCache decode_reference_cache(std::vector<char> bytes) {
  auto e = detail::decode_envelope(kReferenceMagic, std::move(bytes));
  return {e.n, e.d, std::move(e.first), std::move(e.second), e.params};
}

inline void write_reference_cache(const ReferenceCache& cache, const std::filesystem::path& path) {
  io::write_file(path, encode_reference_cache(cache));
}

inline ReferenceCache read_reference_cache(const std::filesystem::path& path) {
  return decode_reference_cache(io::read_file(path));
}

}  // namespace jest
