#include "imdiff/masking.hpp"

#include <gtest/gtest.h>

using namespace imdiff;

TEST(Grating, SmallestStaggeredCase) {
  const auto pair = grating_masks<double>(4, 1, 1, 1);
  EXPECT_EQ(pair.m0.col(0).transpose(), Eigen::RowVector4d(0, 0, 1, 1));
  EXPECT_EQ(pair.m1.col(0).transpose(), Eigen::RowVector4d(1, 1, 0, 0));
  EXPECT_EQ(pair.policy0, 0);
  EXPECT_EQ(pair.policy1, 1);
}

TEST(Grating, FiveAndFiveOnHundredSteps) {
  const auto pair = grating_masks<double>(100, 2, 5, 5);
  for (int l = 0; l < 100; ++l) {
    const bool hidden0 = (l / 10) % 2 == 0;
    for (int k = 0; k < 2; ++k) {
      EXPECT_EQ(pair.m0(l, k), hidden0 ? 0.0 : 1.0) << l;
      EXPECT_EQ(pair.m1(l, k), hidden0 ? 1.0 : 0.0) << l;
    }
  }
}

TEST(Grating, ComplementaryAndFeatureUniform) {
  for (int n : {1, 2, 5, 10})
    for (Eigen::Index K : {1, 3, 7}) {
      const Eigen::Index W = 2 * n * 3;
      const auto pair = grating_masks<float>(W, K, n, n);
      EXPECT_TRUE((pair.m0 + pair.m1).isOnes());
      for (Eigen::Index k = 1; k < K; ++k) EXPECT_EQ(pair.m0.col(k), pair.m0.col(0));
      EXPECT_EQ(pair.m0.sum(), pair.m1.sum());
    }
}

TEST(Grating, ErrorsNameWindowAndSegments) {
  try {
    grating_masks<double>(99, 2, 5, 5);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::config);
    EXPECT_NE(std::string(e.what()).find("W=99"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("10"), std::string::npos);
  }
  EXPECT_THROW(grating_masks<double>(100, 2, 4, 6), Error);
  EXPECT_THROW(grating_masks<double>(100, 2, 0, 0), Error);
}

TEST(RandomMask, MissingFractionNearProbability) {
  Rng rng(11);
  const auto m = random_mask<double>(100, 100, 0.5, rng);
  EXPECT_NEAR(1.0 - m.mean(), 0.5, 0.02);
  Rng rng2(11);
  EXPECT_EQ(random_mask<double>(100, 100, 0.5, rng2), m);
}

TEST(RandomMask, NeverDegenerate) {
  Rng rng(5);
  for (int i = 0; i < 2000; ++i) {
    const auto m = random_mask<double>(2, 1, 0.5, rng);
    EXPECT_EQ(m.sum(), 1.0);
  }
  EXPECT_THROW(random_mask<double>(1, 1, 0.5, rng), Error);
  EXPECT_THROW(random_mask<double>(4, 4, 1.0, rng), Error);
}

TEST(AblationMask, ForecastingAndReconstruction) {
  const auto f = ablation_mask<double>(100, 3, AblationMask::forecasting);
  EXPECT_TRUE(f.topRows(50).isOnes());
  EXPECT_TRUE(f.bottomRows(50).isZero());
  EXPECT_TRUE(ablation_mask<double>(7, 2, AblationMask::reconstruction).isZero());
  EXPECT_THROW(ablation_mask<double>(3, 1, AblationMask::forecasting), Error);
}

TEST(Merge, TakesEachPredictionOnItsHiddenCells) {
  const auto pair = grating_masks<double>(4, 1, 1, 1);
  const MatrixXd out = merge_imputations<double>(MatrixXd::Constant(4, 1, 1.0), MatrixXd::Constant(4, 1, 2.0), pair);
  EXPECT_EQ(out.col(0).transpose(), Eigen::RowVector4d(1, 1, 2, 2));
}

TEST(Merge, IgnoresPredictionsOnObservedCells) {
  const auto pair = grating_masks<double>(100, 5, 5, 5);
  Rng rng(2);
  const MatrixXd p0 = standard_normal<double>(100, 5, rng), p1 = standard_normal<double>(100, 5, rng);
  MatrixXd p0_dirty = p0;
  for (Eigen::Index k = 0; k < 5; ++k)
    for (Eigen::Index l = 0; l < 100; ++l)
      if (pair.m0(l, k) == 1.0) p0_dirty(l, k) = 1e9;
  const MatrixXd a = merge_imputations<double>(p0, p1, pair);
  EXPECT_EQ(merge_imputations<double>(p0_dirty, p1, pair), a);
  // Every cell is sourced from exactly one prediction.
  for (Eigen::Index k = 0; k < 5; ++k)
    for (Eigen::Index l = 0; l < 100; ++l) EXPECT_EQ(a(l, k), pair.m0(l, k) == 0.0 ? p0(l, k) : p1(l, k));
}

TEST(Merge, RejectsMismatchAndOverlap) {
  const auto pair = grating_masks<double>(4, 1, 1, 1);
  EXPECT_THROW(merge_imputations<double>(MatrixXd::Zero(5, 1), MatrixXd::Zero(4, 1), pair), Error);
  MaskPair<double> overlap{MatrixXd::Zero(4, 1), MatrixXd::Zero(4, 1)};
  EXPECT_THROW(merge_imputations<double>(MatrixXd::Zero(4, 1), MatrixXd::Zero(4, 1), overlap), Error);
}

TEST(MaskPasses, PoliciesPerScheme) {
  Rng rng(9);
  MaskSettings s;
  auto g = mask_passes<double>(s, 20, 2, rng);
  ASSERT_EQ(g.size(), 2u);
  EXPECT_EQ(g[0].policy, 0);
  EXPECT_EQ(g[1].policy, 1);

  s.scheme = MaskScheme::random;
  auto r = mask_passes<double>(s, 20, 2, rng);
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0].policy, kSentinelPolicy);
  EXPECT_EQ(r[1].policy, kSentinelPolicy);
  EXPECT_TRUE((r[0].mask + r[1].mask).isOnes());

  s.scheme = MaskScheme::forecasting;
  auto f = mask_passes<double>(s, 20, 2, rng);
  ASSERT_EQ(f.size(), 1u);
  EXPECT_EQ(f[0].policy, kSentinelPolicy);

  s.scheme = MaskScheme::reconstruction;
  auto c = mask_passes<double>(s, 20, 2, rng);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_TRUE(c[0].mask.isZero());
}

TEST(MaskScheme, NamesRoundTrip) {
  for (auto s : {MaskScheme::grating, MaskScheme::random, MaskScheme::forecasting, MaskScheme::reconstruction})
    EXPECT_EQ(mask_scheme_from_string(to_string(s)), s);
  EXPECT_THROW(mask_scheme_from_string("diagonal"), Error);
}
