#pragma once

// Desk-scale dual-encoder contrastive trainer: score a super-batch against a
// cached reference model, select a sub-batch, and take one Adam step on the
// selected data, optionally routing part of it through a cheaper approximate
// image encoder.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "jest/contrastive.hpp"
#include "jest/core/errors.hpp"
#include "jest/core/matrix.hpp"
#include "jest/core/rng.hpp"
#include "jest/flop_model.hpp"
#include "jest/sampler.hpp"
#include "jest/scoring.hpp"

namespace jest {

/// Linear image and text encoders plus the contrastive head.
struct DualEncoderParams {
  Matrix image_weights;  // [input_dim x d]
  Matrix text_weights;   // [input_dim x d]
  ContrastiveParams head;

  std::size_t input_dim() const noexcept { return image_weights.rows(); }
  std::size_t embed_dim() const noexcept { return image_weights.cols(); }

  void validate() const {
    if (!image_weights.same_shape(text_weights)) throw ShapeError("DualEncoderParams: encoder shapes differ");
    if (image_weights.empty()) throw ShapeError("DualEncoderParams: empty encoder");
    if (!image_weights.all_finite() || !text_weights.all_finite()) throw ValueError("DualEncoderParams: non-finite weights");
    head.validate();
  }

  /// Gaussian init with std 1/sqrt(input_dim); head at alpha=10, beta=-10.
  static DualEncoderParams random(std::size_t input_dim, std::size_t embed_dim, Rng& rng) {
    DualEncoderParams p{Matrix(input_dim, embed_dim), Matrix(input_dim, embed_dim), {}};
    const double scale = 1.0 / std::sqrt(static_cast<double>(input_dim));
    for (double& v : p.image_weights.values()) v = rng.normal() * scale;
    for (double& v : p.text_weights.values()) v = rng.normal() * scale;
    return p;
  }

  friend bool operator==(const DualEncoderParams&, const DualEncoderParams&) = default;
};

/// Paired raw inputs, one row per example.
struct PairInputs {
  Matrix images;  // [n x input_dim]
  Matrix texts;   // [n x input_dim]

  std::size_t n() const noexcept { return images.rows(); }

  PairInputs gather(std::span<const std::size_t> rows) const {
    return {images.gather_rows(rows), texts.gather_rows(rows)};
  }
};

enum class Resolution { full, approximate };

/// How the approximate image path cuts cost.
enum class ApproxMethod {
  coarsen,       // average adjacent feature pairs, sum the matching weight rows
  feature_drop,  // keep a random half of the features, rescaled
};

inline ApproxMethod parse_approx_method(std::string_view s) {
  if (s == "coarsen") return ApproxMethod::coarsen;
  if (s == "feature_drop") return ApproxMethod::feature_drop;
  throw ValueError("unknown approximation method: " + std::string(s));
}

inline const char* to_string(ApproxMethod m) { return m == ApproxMethod::coarsen ? "coarsen" : "feature_drop"; }

struct Approximation {
  ApproxMethod method = ApproxMethod::coarsen;
  std::vector<std::size_t> kept_features;  // feature_drop only, ascending

  static Approximation random_drop(std::size_t input_dim, Rng& rng) {
    auto sel = uniform_sample(input_dim, input_dim / 2, rng).indices;
    std::sort(sel.begin(), sel.end());
    return {ApproxMethod::feature_drop, std::move(sel)};
  }
};

namespace detail {

/// One encoder side, retaining what the backward pass needs.
struct EncodedSide {
  Matrix inputs;                                  // effective inputs [n x k]
  std::vector<std::vector<std::size_t>> groups;   // weight rows summed into effective row k
  Matrix pre;                                     // pre-normalization outputs [n x d]
  Matrix z;                                       // normalized outputs
};

inline std::vector<std::vector<std::size_t>> feature_groups(std::size_t input_dim, Resolution res,
                                                            const Approximation& approx, double& scale) {
  std::vector<std::vector<std::size_t>> groups;
  if (res == Resolution::full) {
    scale = 1.0;
    for (std::size_t k = 0; k < input_dim; ++k) groups.push_back({k});
  } else if (approx.method == ApproxMethod::coarsen) {
    if (input_dim % 2 != 0) throw ShapeError("encode: coarsening needs an even input_dim");
    scale = 0.5;
    for (std::size_t k = 0; k < input_dim / 2; ++k) groups.push_back({2 * k, 2 * k + 1});
  } else {
    if (approx.kept_features.empty()) throw ValueError("encode: feature_drop needs a kept feature set");
    scale = static_cast<double>(input_dim) / static_cast<double>(approx.kept_features.size());
    for (auto k : approx.kept_features) {
      if (k >= input_dim) throw ShapeError("encode: kept feature out of range");
      groups.push_back({k});
    }
  }
  return groups;
}

inline EncodedSide encode_side(const Matrix& weights, const Matrix& inputs, Resolution res,
                               const Approximation& approx) {
  if (inputs.cols() != weights.rows()) {
    throw ShapeError("encode: inputs have " + std::to_string(inputs.cols()) + " features, encoder expects " +
                     std::to_string(weights.rows()));
  }
  double scale = 1.0;
  EncodedSide side;
  side.groups = feature_groups(weights.rows(), res, approx, scale);
  const std::size_t k_eff = side.groups.size();
  side.inputs = Matrix(inputs.rows(), k_eff);
  Matrix w_eff(k_eff, weights.cols());
  for (std::size_t k = 0; k < k_eff; ++k) {
    for (auto g : side.groups[k]) {
      for (std::size_t r = 0; r < inputs.rows(); ++r) side.inputs(r, k) += inputs(r, g);
      auto wg = weights.row(g);
      auto wk = w_eff.row(k);
      for (std::size_t c = 0; c < wk.size(); ++c) wk[c] += wg[c];
    }
    if (scale != 1.0)
      for (std::size_t r = 0; r < inputs.rows(); ++r) side.inputs(r, k) *= scale;
  }
  side.pre = matmul(side.inputs, w_eff);
  side.z = side.pre;
  normalize_rows(side.z);
  return side;
}

/// dL/dW given dL/dz for one side.
inline void backward_side(const EncodedSide& side, const Matrix& dz, Matrix& dweights) {
  Matrix dpre(dz.rows(), dz.cols());
  for (std::size_t r = 0; r < dz.rows(); ++r) {
    auto u = side.pre.row(r);
    const double norm = std::sqrt(dot(u, u));
    if (norm == 0.0 || !std::isfinite(norm)) continue;  // constant fallback vector
    auto z = side.z.row(r);
    auto g = dz.row(r);
    const double zg = dot(z, g);
    auto out = dpre.row(r);
    for (std::size_t c = 0; c < out.size(); ++c) out[c] = (g[c] - z[c] * zg) / norm;
  }
  const Matrix dw_eff = matmul_at_b(side.inputs, dpre);
  for (std::size_t k = 0; k < side.groups.size(); ++k) {
    auto src = dw_eff.row(k);
    for (auto g : side.groups[k]) {
      auto dst = dweights.row(g);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
    }
  }
}

}  // namespace detail

/// Linear map followed by row L2 normalization. The approximate resolution
/// only affects the image encoder.
inline EmbeddingBatch encode(const DualEncoderParams& params, const PairInputs& inputs,
                             Resolution resolution = Resolution::full, const Approximation& approx = {}) {
  if (inputs.images.rows() != inputs.texts.rows()) throw ShapeError("encode: image/text row counts differ");
  auto img = detail::encode_side(params.image_weights, inputs.images, resolution, approx);
  auto txt = detail::encode_side(params.text_weights, inputs.texts, Resolution::full, approx);
  return {std::move(img.z), std::move(txt.z)};
}

// ---------------------------------------------------------------------------
// Adam

struct AdamHyperparams {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double epsilon = 1e-8;
  double weight_decay = 1e-4;
  double grad_clip_norm = 1.0;  // <= 0 disables clipping
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t t = 0;

  AdamState() = default;
  explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
  friend bool operator==(const AdamState&, const AdamState&) = default;
};

struct AdamOutcome {
  bool applied = true;
  double grad_norm = 0.0;
};

/// Adam with decoupled weight decay; gradients are clipped to a global norm
/// before the moment updates. Non-finite gradients leave everything untouched.
inline AdamOutcome adam_update(std::span<double> params, AdamState& state, std::span<const double> grads,
                               const AdamHyperparams& hp, std::span<const std::uint8_t> decay_mask = {}) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adam_update: parameter, gradient and state sizes differ");
  }
  AdamOutcome out;
  double sq = 0.0;
  for (double g : grads) sq += g * g;
  out.grad_norm = std::sqrt(sq);
  if (!std::isfinite(out.grad_norm)) {
    out.applied = false;
    return out;
  }
  const double clip = (hp.grad_clip_norm > 0.0 && out.grad_norm > hp.grad_clip_norm) ? hp.grad_clip_norm / out.grad_norm : 1.0;

  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double bc1 = 1.0 - std::pow(hp.beta1, t);
  const double bc2 = 1.0 - std::pow(hp.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    const double g = grads[k] * clip;
    state.m[k] = hp.beta1 * state.m[k] + (1.0 - hp.beta1) * g;
    state.v[k] = hp.beta2 * state.v[k] + (1.0 - hp.beta2) * g * g;
    const double m_hat = state.m[k] / bc1;
    const double v_hat = state.v[k] / bc2;
    const double decay = (decay_mask.empty() || decay_mask[k]) ? hp.weight_decay * params[k] : 0.0;
    params[k] -= hp.learning_rate * (m_hat / (std::sqrt(v_hat) + hp.epsilon) + decay);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training configuration and metrics

enum class SelectionPolicy { uniform, joint, independent };

inline SelectionPolicy parse_selection_policy(std::string_view s) {
  if (s == "uniform") return SelectionPolicy::uniform;
  if (s == "joint") return SelectionPolicy::joint;
  if (s == "independent") return SelectionPolicy::independent;
  throw ValueError("unknown selection policy: " + std::string(s));
}

inline const char* to_string(SelectionPolicy p) {
  switch (p) {
    case SelectionPolicy::uniform: return "uniform";
    case SelectionPolicy::joint: return "joint";
    case SelectionPolicy::independent: return "independent";
  }
  return "?";
}

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t super_batch_size = 320;
  SelectionConfig selection{4, 0.8, ScoringMethod::learnability, kDefaultScoreGain, 0};
  SelectionPolicy policy = SelectionPolicy::joint;
  LossKind loss_kind = LossKind::sigmoid;

  double approx_fraction = 0.0;          // lambda: share of the sub-batch trained at approximate resolution
  double approx_factor = 0.75;           // A: FLOP fraction of the approximate forward pass
  ApproxMethod approx_method = ApproxMethod::coarsen;
  bool approximate_scoring = false;      // score the super-batch with the approximate learner (Flexi-JEST)
  bool count_reference_scoring = false;  // add uncached reference scoring cost

  double learning_rate = 1e-3;
  double warmup_fraction = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_epsilon = 1e-8;
  double weight_decay = 1e-4;
  double grad_clip_norm = 1.0;

  std::size_t eval_every = 1;

  std::size_t sub_batch_size() const {
    return policy == SelectionPolicy::uniform ? selection.sub_batch_size(super_batch_size)
                                              : selection.validate(super_batch_size, policy == SelectionPolicy::joint);
  }

  std::size_t approx_count() const {
    return static_cast<std::size_t>(std::llround(approx_fraction * static_cast<double>(sub_batch_size())));
  }

  flops::Method cost_method() const {
    if (policy == SelectionPolicy::uniform) return flops::Method::iid;
    return approximate_scoring ? flops::Method::flexi_jest : flops::Method::jest;
  }

  void validate() const {
    if (steps < 1) throw ValueError("TrainConfig: steps must be >= 1");
    const std::size_t b = sub_batch_size();
    if (b < 1 || b > super_batch_size) throw ValueError("TrainConfig: need 1 <= b <= B");
    if (!(approx_fraction >= 0.0 && approx_fraction <= 1.0)) throw ValueError("TrainConfig: approx_fraction must lie in [0, 1]");
    if (!(approx_factor > 0.0 && approx_factor <= 1.0)) throw ValueError("TrainConfig: approx_factor must lie in (0, 1]");
    const double lb = approx_fraction * static_cast<double>(b);
    if (std::abs(lb - std::round(lb)) > 1e-9) throw ValueError("TrainConfig: approx_fraction * b must be integral");
    if (approx_fraction > 0.0 && policy != SelectionPolicy::uniform && !approximate_scoring) {
      throw ValueError("TrainConfig: multi-resolution training with selection requires approximate scoring");
    }
    if (approximate_scoring && policy == SelectionPolicy::uniform) {
      throw ValueError("TrainConfig: approximate scoring requires a selection policy");
    }
    if (loss_kind == LossKind::softmax && policy == SelectionPolicy::joint &&
        selection.method != ScoringMethod::learnability) {
      throw ValueError("TrainConfig: softmax joint selection supports learnability scoring only");
    }
    if (!(learning_rate >= 0.0)) throw ValueError("TrainConfig: learning_rate must be >= 0");
    if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) throw ValueError("TrainConfig: warmup_fraction must lie in [0, 1]");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
      throw ValueError("TrainConfig: Adam betas must lie in [0, 1)");
    }
    if (eval_every < 1) throw ValueError("TrainConfig: eval_every must be >= 1");
  }

  /// Linear warmup then cosine decay to zero.
  double learning_rate_at(std::size_t step) const {
    const auto warmup = static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(steps)));
    if (step < warmup) return learning_rate * static_cast<double>(step + 1) / static_cast<double>(warmup);
    const double span = static_cast<double>(std::max<std::size_t>(steps - warmup, 1));
    const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
    return 0.5 * learning_rate * (1.0 + std::cos(std::numbers::pi * progress));
  }

  AdamHyperparams adam_at(std::size_t step) const {
    return {learning_rate_at(step), adam_beta1, adam_beta2, adam_epsilon, weight_decay, grad_clip_norm};
  }
};

struct TrainMetrics {
  std::size_t step = 0;
  double loss = 0.0;
  double mean_selected_score = 0.0;
  double eval_i2t_top1 = 0.0;
  double eval_t2i_top1 = 0.0;
  double cumulative_flops = 0.0;
  bool skipped = false;

  friend bool operator==(const TrainMetrics&, const TrainMetrics&) = default;
};

/// Abstract FLOPs of one forward pass of both encoders for one example.
inline double forward_cost(const DualEncoderParams& p) {
  return 4.0 * static_cast<double>(p.input_dim()) * static_cast<double>(p.embed_dim());
}

inline flops::FlopModel flop_model_for(const DualEncoderParams& p, const TrainConfig& cfg) {
  return {forward_cost(p), cfg.super_batch_size, cfg.sub_batch_size(), cfg.approx_factor, cfg.approx_fraction,
          cfg.count_reference_scoring};
}

// ---------------------------------------------------------------------------
// Parameter packing: [image weights, text weights, log alpha, beta, log t]

inline std::vector<double> pack(const DualEncoderParams& p) {
  std::vector<double> v;
  v.reserve(p.image_weights.size() * 2 + 3);
  v.insert(v.end(), p.image_weights.values().begin(), p.image_weights.values().end());
  v.insert(v.end(), p.text_weights.values().begin(), p.text_weights.values().end());
  v.push_back(std::log(p.head.alpha));
  v.push_back(p.head.beta);
  v.push_back(std::log(p.head.t));
  return v;
}

inline void unpack(std::span<const double> v, DualEncoderParams& p) {
  const std::size_t w = p.image_weights.size();
  if (v.size() != 2 * w + 3) throw ShapeError("unpack: size mismatch");
  std::copy(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(w), p.image_weights.values().begin());
  std::copy(v.begin() + static_cast<std::ptrdiff_t>(w), v.begin() + static_cast<std::ptrdiff_t>(2 * w),
            p.text_weights.values().begin());
  // exp(log(x)) need not return x; unchanged entries keep their exact value.
  if (v[2 * w] != std::log(p.head.alpha)) p.head.alpha = std::exp(v[2 * w]);
  p.head.beta = v[2 * w + 1];
  if (v[2 * w + 2] != std::log(p.head.t)) p.head.t = std::exp(v[2 * w + 2]);
}

inline std::vector<std::uint8_t> weight_decay_mask(const DualEncoderParams& p) {
  std::vector<std::uint8_t> mask(p.image_weights.size() * 2 + 3, 1);
  std::fill(mask.end() - 3, mask.end(), std::uint8_t{0});
  return mask;
}

/// Loss and packed gradient of the training loss on `inputs`, where rows
/// flagged in `approximate` go through the approximate image encoder. Full
/// rows come first in the concatenated batch.
struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

inline LossAndGrad loss_and_grad(const DualEncoderParams& p, const PairInputs& inputs,
                                 std::span<const std::uint8_t> approximate, LossKind kind,
                                 const Approximation& approx) {
  std::vector<std::size_t> full_rows, approx_rows;
  for (std::size_t r = 0; r < inputs.n(); ++r) (approximate.empty() || !approximate[r] ? full_rows : approx_rows).push_back(r);

  std::vector<detail::EncodedSide> img_parts, txt_parts;
  Matrix zi(inputs.n(), p.embed_dim()), zt(inputs.n(), p.embed_dim());
  std::size_t at = 0;
  for (int part = 0; part < 2; ++part) {
    const auto& rows = part == 0 ? full_rows : approx_rows;
    if (rows.empty()) continue;
    const PairInputs sub = inputs.gather(rows);
    const Resolution res = part == 0 ? Resolution::full : Resolution::approximate;
    img_parts.push_back(detail::encode_side(p.image_weights, sub.images, res, approx));
    txt_parts.push_back(detail::encode_side(p.text_weights, sub.texts, Resolution::full, approx));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      std::copy_n(img_parts.back().z.row(r).begin(), p.embed_dim(), zi.row(at + r).begin());
      std::copy_n(txt_parts.back().z.row(r).begin(), p.embed_dim(), zt.row(at + r).begin());
    }
    at += rows.size();
  }
  const EmbeddingBatch batch(std::move(zi), std::move(zt));
  const ContrastiveGrads g = kind == LossKind::sigmoid ? grad_sigmoid_nll(p.head, batch) : grad_softmax_nll(p.head, batch);

  Matrix dwi(p.input_dim(), p.embed_dim()), dwt(p.input_dim(), p.embed_dim());
  at = 0;
  for (std::size_t part = 0; part < img_parts.size(); ++part) {
    const std::size_t rows = img_parts[part].z.rows();
    Matrix dzi(rows, p.embed_dim()), dzt(rows, p.embed_dim());
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(g.image.row(at + r).begin(), p.embed_dim(), dzi.row(r).begin());
      std::copy_n(g.text.row(at + r).begin(), p.embed_dim(), dzt.row(r).begin());
    }
    detail::backward_side(img_parts[part], dzi, dwi);
    detail::backward_side(txt_parts[part], dzt, dwt);
    at += rows;
  }

  LossAndGrad out;
  out.loss = g.loss;
  out.grad.reserve(dwi.size() * 2 + 3);
  out.grad.insert(out.grad.end(), dwi.values().begin(), dwi.values().end());
  out.grad.insert(out.grad.end(), dwt.values().begin(), dwt.values().end());
  out.grad.push_back(kind == LossKind::sigmoid ? g.alpha * p.head.alpha : 0.0);
  out.grad.push_back(kind == LossKind::sigmoid ? g.beta : 0.0);
  out.grad.push_back(kind == LossKind::softmax ? g.t * p.head.t : 0.0);
  return out;
}

/// Which positions of a b-item selection take the approximate path:
/// position i is approximate when floor((i+1) * lambda) > floor(i * lambda),
/// giving the even/odd split at lambda = 0.5.
inline std::vector<std::uint8_t> approximate_positions(std::size_t b, double lambda) {
  std::vector<std::uint8_t> out(b, 0);
  for (std::size_t i = 0; i < b; ++i) {
    out[i] = std::floor(static_cast<double>(i + 1) * lambda) > std::floor(static_cast<double>(i) * lambda) ? 1 : 0;
  }
  return out;
}

/// A super-batch drawn from a dataset, with dataset row ids for cache lookup.
struct SuperBatch {
  PairInputs inputs;
  std::vector<std::size_t> rows;
};

struct TrainStepResult {
  DualEncoderParams learner;
  AdamState optimizer;
  TrainMetrics metrics;
  std::vector<std::size_t> selected;  // positions within the super-batch, ascending
};

/// One Adam step on the training loss of `selected` rows of `batch`. No
/// scoring quantities enter here, so the update depends on the selection only
/// through the chosen indices.
inline TrainStepResult apply_update(DualEncoderParams learner, const SuperBatch& batch,
                                    std::vector<std::size_t> selected, const TrainConfig& cfg, AdamState optimizer,
                                    const Approximation& approx, std::size_t step) {
  const PairInputs train_inputs = batch.inputs.gather(selected);
  const auto approx_rows = approximate_positions(selected.size(), cfg.approx_fraction);
  const LossAndGrad lg = loss_and_grad(learner, train_inputs, approx_rows, cfg.loss_kind, approx);

  std::vector<double> params = pack(learner);
  if (optimizer.m.empty()) optimizer = AdamState(params.size());
  const auto outcome = adam_update(params, optimizer, lg.grad, cfg.adam_at(step), weight_decay_mask(learner));
  if (outcome.applied) unpack(params, learner);

  TrainStepResult out{std::move(learner), std::move(optimizer), {}, std::move(selected)};
  out.metrics.step = step;
  out.metrics.loss = lg.loss;
  out.metrics.skipped = !outcome.applied;
  return out;
}

/// Scores the super-batch, selects a sub-batch per `cfg.policy`, and trains on
/// it. `reference` may be null only for the uniform policy (e.g. reference
/// pretraining), in which case mean_selected_score is reported as 0.
inline TrainStepResult train_step(DualEncoderParams learner, const ReferenceCache* reference,
                                  const SuperBatch& batch, const TrainConfig& cfg, AdamState optimizer, Rng& rng,
                                  std::size_t step) {
  const std::size_t B = batch.inputs.n();
  if (B != cfg.super_batch_size) throw ShapeError("train_step: super-batch size differs from config");
  if (batch.rows.size() != B) throw ShapeError("train_step: row id count differs from super-batch size");
  if (reference == nullptr && cfg.policy != SelectionPolicy::uniform) {
    throw ValueError("train_step: model-based selection requires a reference cache");
  }
  if (reference != nullptr) {
    for (auto r : batch.rows)
      if (r >= reference->n()) throw ShapeError("train_step: reference cache does not cover dataset row " + std::to_string(r));
  }
  const std::size_t b = cfg.sub_batch_size();

  Rng select_rng = rng.fork(1);
  Rng approx_rng = rng.fork(2);
  const Approximation approx = cfg.approx_method == ApproxMethod::coarsen
                                   ? Approximation{}
                                   : Approximation::random_drop(learner.input_dim(), approx_rng);

  // Scoring. Nothing computed here is differentiated.
  std::optional<ScoreMatrix> scores;
  std::optional<EmbeddingBatch> learner_emb, reference_emb;
  const bool need_scores = reference != nullptr;
  if (need_scores) {
    learner_emb.emplace(encode(learner, batch.inputs,
                               cfg.approximate_scoring ? Resolution::approximate : Resolution::full, approx));
    reference_emb.emplace(reference->gather(batch.rows));
    if (cfg.loss_kind == LossKind::sigmoid) {
      scores = build_scores(sigmoid_nll(learner.head, *learner_emb).nll,
                            sigmoid_nll(reference->params(), *reference_emb).nll, cfg.selection.method,
                            cfg.selection.gain);
    } else {
      scores = build_scores(softmax_nll(learner.head, *learner_emb).neg_logits_matrix,
                            softmax_nll(reference->params(), *reference_emb).neg_logits_matrix,
                            cfg.selection.method, cfg.selection.gain);
    }
  }

  SubBatchSelection sel;
  switch (cfg.policy) {
    case SelectionPolicy::uniform:
      if (b == B) {
        sel.indices.resize(B);
        std::iota(sel.indices.begin(), sel.indices.end(), std::size_t{0});
      } else {
        sel = uniform_sample(B, b, select_rng);
      }
      break;
    case SelectionPolicy::joint:
      sel = cfg.loss_kind == LossKind::sigmoid
                ? jointly_sample_sigmoid(*scores, cfg.selection, select_rng)
                : jointly_sample_softmax(*learner_emb, *reference_emb, learner.head, reference->params(),
                                         cfg.selection, select_rng);
      break;
    case SelectionPolicy::independent:
      sel = independent_sample(*scores, cfg.selection, select_rng);
      break;
  }
  const double selected_score = scores ? joint_score(*scores, sel.indices) : 0.0;

  // The selection is a set; train on it in ascending super-batch order.
  std::sort(sel.indices.begin(), sel.indices.end());
  auto out = apply_update(std::move(learner), batch, std::move(sel.indices), cfg, std::move(optimizer), approx, step);
  out.metrics.mean_selected_score = selected_score;
  out.metrics.cumulative_flops = flop_model_for(out.learner, cfg).cumulative(cfg.cost_method(), step + 1);
  return out;
}

/// Top-1 retrieval rates (image->text, text->image) on held-out pairs.
inline std::pair<double, double> evaluate(const DualEncoderParams& learner, const PairInputs& holdout) {
  if (holdout.n() == 0) throw ValueError("evaluate: empty holdout");
  const EmbeddingBatch emb = encode(learner, holdout);
  const Matrix sims = matmul_transposed(emb.image(), emb.text());
  const std::size_t n = holdout.n();
  std::size_t i2t = 0, t2i = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best_row = 0, best_col = 0;
    for (std::size_t j = 1; j < n; ++j) {
      if (sims(i, j) > sims(i, best_row)) best_row = j;
      if (sims(j, i) > sims(best_col, i)) best_col = j;
    }
    i2t += best_row == i;
    t2i += best_col == i;
  }
  return {static_cast<double>(i2t) / static_cast<double>(n), static_cast<double>(t2i) / static_cast<double>(n)};
}

// ---------------------------------------------------------------------------
// Checkpoints: reference-cache envelope with magic "JESTCKPT"; n = input_dim,
// d = embedding dim, the two payload blocks hold the encoder weights (f32).

inline constexpr std::string_view kCheckpointMagic = "JESTCKPT";

inline std::vector<char> encode_checkpoint(const DualEncoderParams& p) {
  auto narrow = [](const Matrix& m) {
    std::vector<float> v(m.size());
    for (std::size_t k = 0; k < v.size(); ++k) v[k] = static_cast<float>(m.values()[k]);
    return v;
  };
  return detail::encode_envelope(kCheckpointMagic,
                                 {p.input_dim(), p.embed_dim(), narrow(p.image_weights), narrow(p.text_weights), p.head});
}

inline DualEncoderParams decode_checkpoint(std::vector<char> bytes) {
  auto e = detail::decode_envelope(kCheckpointMagic, std::move(bytes));
  auto widen = [&](const std::vector<float>& v) {
    std::vector<double> out(v.begin(), v.end());
    return Matrix(e.n, e.d, std::move(out));
  };
  return {widen(e.first), widen(e.second), e.params};
}

inline void save_checkpoint(const DualEncoderParams& p, const std::filesystem::path& path) {
  io::write_file(path, encode_checkpoint(p));
}

inline DualEncoderParams load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path));
}

}  // namespace jest
