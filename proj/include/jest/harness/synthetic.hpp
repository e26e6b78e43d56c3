#pragma once

// Synthetic paired data. Each example has a concept id and a latent vector
// (concept centre plus item-specific spread); images and texts are noisy
// linear views of the latent through fixed modality-specific mixing matrices.
// Adjacent input features come in near-duplicate pairs, so averaging them is a
// faithful coarse view of the input.
//
// The uncurated set re-pairs a `noise_rate` fraction of examples with an
// independently drawn text, the misalignment defect that curation removes.

#include <cstdint>
#include <vector>

#include "jest/core/errors.hpp"
#include "jest/core/matrix.hpp"
#include "jest/core/rng.hpp"
#include "jest/trainer.hpp"

namespace jest::harness {

struct SyntheticDatasetSpec {
  std::size_t latent_dim = 16;
  std::size_t input_dim = 32;
  std::size_t n_concepts = 100;
  double noise_rate = 0.5;
  std::size_t curated_size = 2000;
  std::size_t uncurated_size = 20000;
  std::size_t holdout_size = 500;
  double concept_scale = 1.0;    // spread of concept centres
  double item_spread = 1.0;      // within-concept latent spread
  double feature_noise = 0.5;    // per-feature observation noise
  double pair_jitter = 0.1;      // difference between the two features of a pair
  std::uint64_t seed = 0;

  void validate() const {
    if (latent_dim < 1 || input_dim < 2 || input_dim % 2 != 0) throw ValueError("dataset: input_dim must be even and >= 2");
    if (n_concepts < 1) throw ValueError("dataset: n_concepts must be >= 1");
    if (!(noise_rate >= 0.0 && noise_rate <= 1.0)) throw ValueError("dataset: noise_rate must lie in [0, 1]");
    if (curated_size < 1 || uncurated_size < 1 || holdout_size < 1) throw ValueError("dataset: sizes must be >= 1");
  }
};

struct LabeledPairs {
  PairInputs inputs;
  std::vector<std::uint32_t> image_concept;
  std::vector<std::uint32_t> text_concept;
  std::vector<std::uint8_t> aligned;  // text drawn from the same item as the image

  std::size_t n() const noexcept { return inputs.n(); }

  LabeledPairs gather(std::span<const std::size_t> rows) const {
    LabeledPairs out{inputs.gather(rows), {}, {}, {}};
    for (auto r : rows) {
      out.image_concept.push_back(image_concept[r]);
      out.text_concept.push_back(text_concept[r]);
      out.aligned.push_back(aligned[r]);
    }
    return out;
  }
};

struct SyntheticData {
  LabeledPairs curated;
  LabeledPairs uncurated;
  LabeledPairs holdout;
};

namespace detail {

struct Generator {
  const SyntheticDatasetSpec& spec;
  Matrix centres;     // [n_concepts x latent]
  Matrix image_mix;   // [input_dim x latent]
  Matrix text_mix;

  Generator(const SyntheticDatasetSpec& s, Rng& rng)
      : spec(s), centres(s.n_concepts, s.latent_dim), image_mix(s.input_dim, s.latent_dim), text_mix(s.input_dim, s.latent_dim) {
    for (double& v : centres.values()) v = rng.normal() * s.concept_scale;
    const double scale = 1.0 / std::sqrt(static_cast<double>(s.latent_dim));
    for (Matrix* mix : {&image_mix, &text_mix}) {
      for (std::size_t r = 0; r < s.input_dim; r += 2) {
        for (std::size_t c = 0; c < s.latent_dim; ++c) {
          const double base = rng.normal() * scale;
          (*mix)(r, c) = base;
          (*mix)(r + 1, c) = base + rng.normal() * scale * s.pair_jitter;
        }
      }
    }
  }

  struct Item {
    std::uint32_t concept_id;
    std::vector<double> latent;
  };

  Item draw_item(Rng& rng) const {
    Item it{static_cast<std::uint32_t>(rng.index(spec.n_concepts)), std::vector<double>(spec.latent_dim)};
    for (std::size_t c = 0; c < spec.latent_dim; ++c) {
      it.latent[c] = centres(it.concept_id, c) + rng.normal() * spec.item_spread;
    }
    return it;
  }

  void view(const Matrix& mix, const Item& it, std::span<double> out, Rng& rng) const {
    for (std::size_t r = 0; r < spec.input_dim; ++r) out[r] = dot(mix.row(r), it.latent) + rng.normal() * spec.feature_noise;
  }

  LabeledPairs draw(std::size_t n, double noise_rate, Rng& rng) const {
    LabeledPairs out{{Matrix(n, spec.input_dim), Matrix(n, spec.input_dim)}, {}, {}, {}};
    out.image_concept.reserve(n);
    out.text_concept.reserve(n);
    out.aligned.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const Item img = draw_item(rng);
      const bool misaligned = noise_rate > 0.0 && rng.uniform() < noise_rate;
      const Item txt = misaligned ? draw_item(rng) : img;
      view(image_mix, img, out.inputs.images.row(i), rng);
      view(text_mix, txt, out.inputs.texts.row(i), rng);
      out.image_concept.push_back(img.concept_id);
      out.text_concept.push_back(txt.concept_id);
      out.aligned.push_back(misaligned ? 0 : 1);
    }
    return out;
  }
};

}  // namespace detail

/// Curated (noise-free), uncurated (noise_rate misaligned) and holdout
/// (noise-free, independently drawn) sets from one generative model.
inline SyntheticData generate_dataset(const SyntheticDatasetSpec& spec, Rng& rng) {
  spec.validate();
  const detail::Generator gen(spec, rng);
  Rng curated_rng = rng.fork(1);
  Rng uncurated_rng = rng.fork(2);
  Rng holdout_rng = rng.fork(3);
  return {gen.draw(spec.curated_size, 0.0, curated_rng), gen.draw(spec.uncurated_size, spec.noise_rate, uncurated_rng),
          gen.draw(spec.holdout_size, 0.0, holdout_rng)};
}

}  // namespace jest::harness
