#pragma once

// Batch selection: chunked joint example selection for sigmoid and softmax
// scores, baseline samplers, and the exact / Metropolis oracles used to
// validate them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "jest/contrastive.hpp"
#include "jest/core/errors.hpp"
#include "jest/core/rng.hpp"
#include "jest/scoring.hpp"

namespace jest {

/// Additive penalty that removes already-sampled items from a chunk's logits.
inline constexpr double kSampledPenalty = 1e8;

struct SelectionConfig {
  std::size_t n_chunks = 16;
  double filter_ratio = 0.8;
  ScoringMethod method = ScoringMethod::learnability;
  double gain = kDefaultScoreGain;
  std::uint64_t seed = 0;

  /// b = round(B * (1 - f)).
  std::size_t sub_batch_size(std::size_t super_batch) const {
    if (!(filter_ratio >= 0.0 && filter_ratio < 1.0)) throw ValueError("SelectionConfig: filter_ratio must lie in [0, 1)");
    return static_cast<std::size_t>(std::llround(static_cast<double>(super_batch) * (1.0 - filter_ratio)));
  }

  /// Validates against a super-batch and returns b.
  std::size_t validate(std::size_t super_batch, bool chunked = true) const {
    if (n_chunks < 1) throw ValueError("SelectionConfig: n_chunks must be >= 1");
    if (!(gain > 0.0)) throw ValueError("SelectionConfig: gain must be positive");
    const std::size_t b = sub_batch_size(super_batch);
    if (b < 1 || b > super_batch) {
      throw ValueError("SelectionConfig: sub-batch size " + std::to_string(b) + " invalid for super-batch " +
                       std::to_string(super_batch));
    }
    if (chunked && b % n_chunks != 0) {
      throw ValueError("SelectionConfig: sub-batch size " + std::to_string(b) + " is not divisible by " +
                       std::to_string(n_chunks) + " chunks");
    }
    return b;
  }
};

struct SubBatchSelection {
  std::vector<std::size_t> indices;  // in draw order
  double joint_score = 0.0;
  /// Joint score of the prefix selected after each chunk (joint samplers only).
  std::vector<double> chunk_scores;
};

/// (1/b) * sum of scores over the selected sub-matrix.
inline double joint_score(const ScoreMatrix& scores, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ValueError("joint_score: empty index set");
  std::vector<std::uint8_t> seen(scores.n(), 0);
  for (auto i : indices) {
    if (i >= scores.n()) throw ValueError("joint_score: index " + std::to_string(i) + " out of range");
    if (seen[i]) throw ValueError("joint_score: duplicate index " + std::to_string(i));
    seen[i] = 1;
  }
  double total = 0.0;
  for (auto i : indices)
    for (auto j : indices) total += scores(i, j);
  return total / static_cast<double>(indices.size());
}

namespace detail {

inline void require_finite(const ScoreMatrix& s) {
  if (!s.values.all_finite()) throw ValueError("sampler: non-finite scores");
  if (s.values.rows() != s.values.cols() || s.n() == 0) throw ShapeError("sampler: score matrix must be square");
}

/// Draws `k` distinct indices with probability proportional to exp(logits),
/// sequentially without replacement, skipping `excluded` entries. Implemented
/// as Gumbel-top-k, which has the same law as renormalized sequential draws.
/// Returned in draw order. Consumes exactly logits.size() Gumbel variates.
inline std::vector<std::size_t> draw_without_replacement(std::span<const double> logits, std::size_t k, Rng& rng,
                                                         std::span<const std::uint8_t> excluded = {}) {
  const std::size_t n = logits.size();
  std::vector<double> keys(n);
  std::vector<std::size_t> candidates;
  candidates.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    keys[i] = logits[i] + rng.gumbel();
    if (excluded.empty() || !excluded[i]) candidates.push_back(i);
  }
  if (candidates.size() < k) throw ValueError("sampler: fewer candidates than draws");
  auto by_key = [&](std::size_t a, std::size_t b) { return keys[a] > keys[b] || (keys[a] == keys[b] && a < b); };
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k), candidates.end(), by_key);
  candidates.resize(k);
  return candidates;
}

inline std::vector<double> diagonal(const ScoreMatrix& s) {
  std::vector<double> d(s.n());
  for (std::size_t i = 0; i < s.n(); ++i) d[i] = s(i, i);
  return d;
}

}  // namespace detail

/// Chunked joint selection over a precomputed sigmoid score matrix.
inline SubBatchSelection jointly_sample_sigmoid(const ScoreMatrix& scores, const SelectionConfig& cfg, Rng& rng) {
  detail::require_finite(scores);
  const std::size_t n = scores.n();
  const std::size_t b = cfg.validate(n);
  const std::size_t chunk = b / cfg.n_chunks;

  const std::vector<double> logits_ii = detail::diagonal(scores);
  std::vector<double> interaction(n, 0.0);  // sum over sampled s of scores(s, c) + scores(c, s)
  std::vector<std::uint8_t> is_sampled(n, 0);
  std::vector<double> logits(n);

  SubBatchSelection out;
  out.indices.reserve(b);
  auto append = [&](const std::vector<std::size_t>& picked) {
    for (auto s : picked) {
      is_sampled[s] = 1;
      out.indices.push_back(s);
    }
    // Interaction sums are refreshed once per chunk; draws inside a chunk are
    // conditioned only on earlier chunks.
    for (auto s : picked) {
      auto row_s = scores.values.row(s);
      for (std::size_t c = 0; c < n; ++c) interaction[c] += row_s[c] + scores(c, s);
    }
    out.chunk_scores.push_back(joint_score(scores, out.indices));
  };

  append(detail::draw_without_replacement(logits_ii, chunk, rng));
  for (std::size_t k = 1; k < cfg.n_chunks; ++k) {
    for (std::size_t c = 0; c < n; ++c) logits[c] = logits_ii[c] + interaction[c] - is_sampled[c] * kSampledPenalty;
    append(detail::draw_without_replacement(logits, chunk, rng, is_sampled));
  }
  out.joint_score = out.chunk_scores.back();
  return out;
}

/// gain * (softmax loss of the sub-batch under the learner minus under the
/// reference), the joint learnability of a selection for the softmax path.
inline double softmax_joint_learnability(const EmbeddingBatch& learner, const EmbeddingBatch& reference,
                                         const ContrastiveParams& learner_params,
                                         const ContrastiveParams& reference_params,
                                         std::span<const std::size_t> indices, double gain) {
  const double l = softmax_nll(learner_params, learner.gather(indices)).loss;
  const double r = softmax_nll(reference_params, reference.gather(indices)).loss;
  return gain * (l - r);
}

/// Chunked joint selection for the softmax loss; conditional scores are
/// recomputed each chunk from masked log-sum-exp negatives. Only the
/// learnability criterion is defined for this path.
inline SubBatchSelection jointly_sample_softmax(const EmbeddingBatch& learner, const EmbeddingBatch& reference,
                                                const ContrastiveParams& learner_params,
                                                const ContrastiveParams& reference_params,
                                                const SelectionConfig& cfg, Rng& rng) {
  if (learner.n() != reference.n()) throw ShapeError("jointly_sample_softmax: learner/reference batch sizes differ");
  if (cfg.method != ScoringMethod::learnability) {
    throw ValueError("jointly_sample_softmax: only learnability scoring is defined for the softmax path");
  }
  const std::size_t n = learner.n();
  const std::size_t b = cfg.validate(n);
  const std::size_t chunk = b / cfg.n_chunks;

  const Matrix learner_logits = pairwise_logits(learner, learner_params, LossKind::softmax);
  const Matrix reference_logits = pairwise_logits(reference, reference_params, LossKind::softmax);
  const auto learner_full = softmax_nll_from_logits(learner_logits);
  const auto reference_full = softmax_nll_from_logits(reference_logits);
  const ScoreMatrix scores = build_scores(learner_full.neg_logits_matrix, reference_full.neg_logits_matrix,
                                          ScoringMethod::learnability, cfg.gain);
  detail::require_finite(scores);
  const std::vector<double> logits_ii = detail::diagonal(scores);

  std::vector<std::uint8_t> is_sampled(n, 0);
  std::vector<double> logits(n);
  SubBatchSelection out;
  out.indices.reserve(b);
  auto append = [&](const std::vector<std::size_t>& picked) {
    for (auto s : picked) {
      is_sampled[s] = 1;
      out.indices.push_back(s);
    }
    out.chunk_scores.push_back(joint_score(scores, out.indices));
  };

  append(detail::draw_without_replacement(logits_ii, chunk, rng));
  for (std::size_t k = 1; k < cfg.n_chunks; ++k) {
    const auto learner_n = softmax_nll_from_logits(learner_logits, is_sampled);
    const auto reference_n = softmax_nll_from_logits(reference_logits, is_sampled);
    for (std::size_t c = 0; c < n; ++c) {
      const double rho = (learner_n.neg_logits[c] - reference_n.neg_logits[c]) * cfg.gain;
      logits[c] = logits_ii[c] + rho - is_sampled[c] * kSampledPenalty;
    }
    append(detail::draw_without_replacement(logits, chunk, rng, is_sampled));
  }
  out.joint_score = out.chunk_scores.back();
  return out;
}

/// Baseline: b items without replacement with probability proportional to
/// exp(diagonal score), ignoring interactions.
inline SubBatchSelection independent_sample(const ScoreMatrix& scores, const SelectionConfig& cfg, Rng& rng) {
  detail::require_finite(scores);
  const std::size_t b = cfg.validate(scores.n(), /*chunked=*/false);
  SubBatchSelection out;
  out.indices = detail::draw_without_replacement(detail::diagonal(scores), b, rng);
  out.joint_score = joint_score(scores, out.indices);
  return out;
}

/// Uniform b-subset of [0, B) via partial Fisher-Yates. joint_score is left 0.
inline SubBatchSelection uniform_sample(std::size_t super_batch, std::size_t b, Rng& rng) {
  if (b > super_batch) throw ValueError("uniform_sample: b exceeds B");
  if (b == 0) throw ValueError("uniform_sample: b must be >= 1");
  std::vector<std::size_t> pool(super_batch);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  for (std::size_t k = 0; k < b; ++k) {
    const auto j = k + static_cast<std::size_t>(rng.index(super_batch - k));
    std::swap(pool[k], pool[j]);
  }
  pool.resize(b);
  return {std::move(pool), 0.0, {}};
}

inline SubBatchSelection uniform_sample(const ScoreMatrix& scores, std::size_t b, Rng& rng) {
  auto out = uniform_sample(scores.n(), b, rng);
  out.joint_score = joint_score(scores, out.indices);
  return out;
}

/// Single-swap Metropolis chain targeting p(S) proportional to
/// exp(sum of scores over S x S). One sweep is b proposals.
inline SubBatchSelection gibbs_oracle(const ScoreMatrix& scores, std::size_t b, std::size_t n_sweeps, Rng& rng) {
  detail::require_finite(scores);
  const std::size_t n = scores.n();
  if (n_sweeps < 1) throw ValueError("gibbs_oracle: n_sweeps must be >= 1");
  auto start = uniform_sample(n, b, rng);
  if (b == n) {
    start.joint_score = joint_score(scores, start.indices);
    return start;
  }

  std::vector<std::size_t> members = std::move(start.indices);
  std::vector<std::uint8_t> in_set(n, 0);
  for (auto m : members) in_set[m] = 1;
  std::vector<std::size_t> outsiders;
  outsiders.reserve(n - b);
  for (std::size_t i = 0; i < n; ++i)
    if (!in_set[i]) outsiders.push_back(i);

  // coupling[x] = sum over members s of scores(x, s) + scores(s, x)
  std::vector<double> coupling(n, 0.0);
  for (auto s : members) {
    for (std::size_t x = 0; x < n; ++x) coupling[x] += scores(x, s) + scores(s, x);
  }

  const std::size_t proposals = n_sweeps * b;
  for (std::size_t step = 0; step < proposals; ++step) {
    const auto mi = static_cast<std::size_t>(rng.index(members.size()));
    const auto oi = static_cast<std::size_t>(rng.index(outsiders.size()));
    const std::size_t r = members[mi];
    const std::size_t c = outsiders[oi];
    const double delta = coupling[c] - coupling[r] + scores(c, c) + scores(r, r) - scores(c, r) - scores(r, c);
    const double u = rng.uniform();
    if (delta >= 0.0 || u < std::exp(delta)) {
      members[mi] = c;
      outsiders[oi] = r;
      for (std::size_t x = 0; x < n; ++x) coupling[x] += scores(x, c) + scores(c, x) - scores(x, r) - scores(r, x);
    }
  }
  SubBatchSelection out;
  out.indices = std::move(members);
  out.joint_score = joint_score(scores, out.indices);
  return out;
}

/// Exact distribution over all b-subsets, p(S) proportional to exp(sum over S x S).
struct ExactDistribution {
  std::vector<std::vector<std::size_t>> subsets;  // ascending, lexicographic order
  std::vector<double> probabilities;

  /// Probability of a subset given in any order; 0 if b differs.
  double probability_of(std::vector<std::size_t> subset) const {
    std::sort(subset.begin(), subset.end());
    auto it = std::lower_bound(subsets.begin(), subsets.end(), subset);
    if (it == subsets.end() || *it != subset) return 0.0;
    return probabilities[static_cast<std::size_t>(it - subsets.begin())];
  }
};

inline constexpr double kMaxEnumeratedSubsets = 1e6;

inline ExactDistribution enumerate_exact(const ScoreMatrix& scores, std::size_t b) {
  detail::require_finite(scores);
  const std::size_t n = scores.n();
  if (b < 1 || b > n) throw ValueError("enumerate_exact: need 1 <= b <= B");
  double count = 1.0;
  for (std::size_t k = 0; k < b; ++k) {
    count = count * static_cast<double>(n - k) / static_cast<double>(k + 1);
    if (count > kMaxEnumeratedSubsets) throw ValueError("enumerate_exact: more than 1e6 subsets");
  }

  ExactDistribution dist;
  std::vector<double> log_weights;
  std::vector<std::size_t> cur(b);
  std::iota(cur.begin(), cur.end(), std::size_t{0});
  while (true) {
    double total = 0.0;
    for (auto i : cur)
      for (auto j : cur) total += scores(i, j);
    dist.subsets.push_back(cur);
    log_weights.push_back(total);
    // next combination in lexicographic order
    std::size_t k = b;
    while (k > 0 && cur[k - 1] == n - b + (k - 1)) --k;
    if (k == 0) break;
    ++cur[k - 1];
    for (std::size_t m = k; m < b; ++m) cur[m] = cur[m - 1] + 1;
  }
  const double lse = detail::logsumexp(log_weights.size(), [&](std::size_t k) { return log_weights[k]; });
  dist.probabilities.resize(log_weights.size());
  for (std::size_t k = 0; k < log_weights.size(); ++k) dist.probabilities[k] = std::exp(log_weights[k] - lse);
  return dist;
}

}  // namespace jest
