#include <cmath>
#include <cstring>
#include <filesystem>

#include <gtest/gtest.h>

#include "jest/sampler.hpp"
#include "jest/scoring.hpp"
#include "test_support.hpp"

using namespace jest;
using testing_support::random_batch;
using testing_support::random_matrix;

namespace {

LossMatrix random_loss(std::size_t n, Rng& rng, LossKind kind = LossKind::sigmoid) {
  Matrix m(n, n);
  for (double& v : m.values()) v = std::abs(rng.normal());
  return {m, kind};
}

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "jest_scoring_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

ReferenceCache random_cache(std::size_t n, std::size_t d, Rng& rng) {
  return ReferenceCache::from_batch(random_batch(n, d, rng), ContrastiveParams{12.5, -7.25, 3.0});
}

}  // namespace

TEST(BuildScores, IdenticalModelsGiveZero) {
  Rng rng(1);
  const auto L = random_loss(6, rng);
  const auto s = build_scores(L, L, ScoringMethod::learnability);
  for (double v : s.values.values()) EXPECT_EQ(v, 0.0);
}

TEST(BuildScores, EasyRefLn2) {
  const LossMatrix R{Matrix(4, 4, std::log(2.0)), LossKind::sigmoid};
  Rng rng(2);
  const auto s = build_scores(random_loss(4, rng), R, ScoringMethod::easy_ref, 1.0);
  for (double v : s.values.values()) EXPECT_DOUBLE_EQ(v, -std::log(2.0));
}

TEST(BuildScores, EntrywiseOracle) {
  Rng rng(3);
  const auto L = random_loss(7, rng), R = random_loss(7, rng);
  const auto learn = build_scores(L, R, ScoringMethod::learnability, 100.0);
  const auto hard = build_scores(L, R, ScoringMethod::hard_learner, 100.0);
  const auto easy = build_scores(L, R, ScoringMethod::easy_ref, 100.0);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 7; ++j) {
      EXPECT_NEAR(learn(i, j), 100.0 * (L.values(i, j) - R.values(i, j)), 1e-12);
      EXPECT_NEAR(hard(i, j), 100.0 * L.values(i, j), 1e-12);
      EXPECT_NEAR(easy(i, j), -100.0 * R.values(i, j), 1e-12);
    }
  EXPECT_EQ(learn.gain, 100.0);
  EXPECT_EQ(learn.method, ScoringMethod::learnability);
}

TEST(BuildScores, DefaultGainIs100) {
  Rng rng(4);
  const auto L = random_loss(3, rng), R = random_loss(3, rng);
  EXPECT_EQ(build_scores(L, R, ScoringMethod::learnability).gain, 100.0);
}

TEST(BuildScores, Errors) {
  Rng rng(5);
  const auto L = random_loss(4, rng);
  EXPECT_THROW(build_scores(L, random_loss(5, rng), ScoringMethod::learnability), ShapeError);
  EXPECT_THROW(build_scores(L, random_loss(4, rng, LossKind::softmax), ScoringMethod::learnability), ValueError);
  EXPECT_THROW(build_scores(L, L, ScoringMethod::learnability, 0.0), ValueError);
  EXPECT_THROW(build_scores(L, L, ScoringMethod::learnability, -1.0), ValueError);
}

TEST(BuildScores, AntisymmetryUnderModelSwap) {
  Rng rng(6);
  const auto L = random_loss(5, rng), R = random_loss(5, rng);
  const auto a = build_scores(L, R, ScoringMethod::learnability, 37.0);
  const auto b = build_scores(R, L, ScoringMethod::learnability, 37.0);
  for (std::size_t k = 0; k < 25; ++k) EXPECT_EQ(a.values.values()[k], -b.values.values()[k]);
}

TEST(BuildScores, GainPreservesSubsetRanking) {
  Rng rng(7);
  const auto L = random_loss(8, rng), R = random_loss(8, rng);
  const auto base = build_scores(L, R, ScoringMethod::learnability, 1.0);
  std::vector<std::vector<std::size_t>> subsets;
  for (int k = 0; k < 40; ++k) {
    Rng r = rng.fork(k);
    subsets.push_back(uniform_sample(8, 3, r).indices);
  }
  for (double gain : {0.01, 3.0, 100.0, 1e4}) {
    const auto scaled = build_scores(L, R, ScoringMethod::learnability, gain);
    for (std::size_t a = 0; a < subsets.size(); ++a)
      for (std::size_t b = 0; b < subsets.size(); ++b) {
        const double da = joint_score(base, subsets[a]) - joint_score(base, subsets[b]);
        if (std::abs(da) < 1e-9) continue;
        const double ds = joint_score(scaled, subsets[a]) - joint_score(scaled, subsets[b]);
        EXPECT_EQ(da > 0, ds > 0);
      }
  }
}

TEST(ScoringMethod, ParseRoundTrip) {
  for (auto m : {ScoringMethod::learnability, ScoringMethod::easy_ref, ScoringMethod::hard_learner})
    EXPECT_EQ(parse_scoring_method(to_string(m)), m);
  EXPECT_THROW(parse_scoring_method("nope"), ValueError);
}

// reference cache

TEST(ReferenceCache, RejectsEmpty) {
  EXPECT_THROW(ReferenceCache(0, 4, {}, {}, ContrastiveParams{}), ShapeError);
  EXPECT_THROW(ReferenceCache(2, 0, {}, {}, ContrastiveParams{}), ShapeError);
  EXPECT_THROW(ReferenceCache(2, 2, std::vector<float>(3), std::vector<float>(4), ContrastiveParams{}), ShapeError);
}

TEST(ReferenceCache, RoundTripAndFileSize) {
  Rng rng(8);
  const auto cache = random_cache(3, 4, rng);
  const auto path = temp_path("n3d4.bin");
  write_reference_cache(cache, path);
  EXPECT_EQ(std::filesystem::file_size(path), 8u + 16u + 2u * 3 * 4 * 4 + 24u);
  const auto back = read_reference_cache(path);
  EXPECT_EQ(back, cache);
  EXPECT_EQ(encode_reference_cache(back), encode_reference_cache(cache));
  for (std::size_t k = 0; k < cache.image().size(); ++k) {
    EXPECT_EQ(std::memcmp(&cache.image()[k], &back.image()[k], sizeof(float)), 0);
    EXPECT_EQ(std::memcmp(&cache.text()[k], &back.text()[k], sizeof(float)), 0);
  }
}

TEST(ReferenceCache, LayoutIsLittleEndianAsDocumented) {
  const ReferenceCache c(1, 1, {1.0f}, {-2.0f}, ContrastiveParams{2.0, -1.0, 4.0});
  const auto bytes = encode_reference_cache(c);
  ASSERT_EQ(bytes.size(), 8u + 16 + 8 + 24);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "JESTREF1");
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(bytes[16], 1);
  float f;
  std::memcpy(&f, bytes.data() + 24, 4);
  EXPECT_EQ(f, 1.0f);
  double a;
  std::memcpy(&a, bytes.data() + 32, 8);
  EXPECT_EQ(a, 2.0);
}

TEST(ReferenceCache, HeaderCorruptionIsFormatError) {
  Rng rng(9);
  const auto bytes = encode_reference_cache(random_cache(3, 4, rng));
  for (std::size_t k = 0; k < 24; ++k) {
    auto bad = bytes;
    bad[k] = static_cast<char>(bad[k] ^ 0x5a);
    EXPECT_THROW(decode_reference_cache(bad), FormatError) << "byte " << k;
  }
}

TEST(ReferenceCache, TruncationAndOverflow) {
  Rng rng(10);
  const auto bytes = encode_reference_cache(random_cache(3, 4, rng));
  for (std::size_t cut : {0ul, 5ul, 12ul, 24ul, 40ul, bytes.size() - 1}) {
    std::vector<char> t(bytes.begin(), bytes.begin() + static_cast<long>(cut));
    EXPECT_THROW(decode_reference_cache(t), FormatError) << cut;
  }
  auto extra = bytes;
  extra.push_back(0);
  EXPECT_THROW(decode_reference_cache(extra), FormatError);

  auto huge = bytes;
  for (std::size_t k = 8; k < 24; ++k) huge[k] = static_cast<char>(0xff);
  try {
    decode_reference_cache(huge);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 8u);
  }
}

TEST(ReferenceCache, InvalidParamsIsFormatError) {
  const ReferenceCache c(1, 1, {1.0f}, {1.0f}, ContrastiveParams{});
  auto bytes = encode_reference_cache(c);
  const double bad_alpha = -1.0;
  std::memcpy(bytes.data() + 32, &bad_alpha, 8);
  EXPECT_THROW(decode_reference_cache(bytes), FormatError);
}

TEST(ReferenceCache, MissingFileIsError) {
  EXPECT_ANY_THROW(read_reference_cache(temp_path("does_not_exist.bin")));
}

TEST(ReferenceCache, RecomputedLossMatrixIsIdentical) {
  Rng rng(11);
  const auto cache = random_cache(12, 6, rng);
  const auto path = temp_path("fidelity.bin");
  write_reference_cache(cache, path);
  const auto loaded = read_reference_cache(path);
  const std::vector<std::size_t> rows{0, 3, 5, 11, 7};
  const auto a = cache.loss_matrix(rows);
  const auto b = loaded.loss_matrix(rows);
  ASSERT_TRUE(a.values.same_shape(b.values));
  EXPECT_EQ(std::memcmp(a.values.values().data(), b.values.values().data(), a.values.size() * sizeof(double)), 0);
  // equals the direct computation on the widened embeddings
  const auto direct = sigmoid_nll(cache.params(), cache.gather(rows)).nll;
  EXPECT_EQ(direct.values, a.values);
}

TEST(ReferenceCache, GatherRenormalizesAndChecksRange) {
  Rng rng(12);
  const auto cache = random_cache(4, 3, rng);
  const std::vector<std::size_t> rows{1, 2};
  const auto b = cache.gather(rows);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(dot(b.image().row(i), b.image().row(i)), 1.0, 1e-12);
  const std::vector<std::size_t> bad{4};
  EXPECT_THROW(cache.gather(bad), ShapeError);
}
