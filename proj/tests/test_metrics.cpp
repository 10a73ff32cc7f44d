#include "imdiff/error.hpp"
#include "imdiff/metrics.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace imdiff;

namespace {

LabelVector lv(std::initializer_list<int> v) {
  LabelVector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (int x : v) out(i++) = x;
  return out;
}

std::vector<int> to_std(const LabelVector& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace

TEST(Events, MaximalRuns) {
  EXPECT_EQ(events_from_labels(lv({0, 1, 1, 0, 1})), (EventList{{1, 3}, {4, 5}}));
  EXPECT_TRUE(events_from_labels(lv({0, 0, 0})).empty());
  EXPECT_EQ(events_from_labels(lv({1, 1, 1, 1, 1})), (EventList{{0, 5}}));
}

TEST(Prf1, RawCounts) {
  const PRF1 r = prf1(lv({0, 1, 0, 0}), lv({0, 1, 1, 0}), false);
  EXPECT_DOUBLE_EQ(r.precision, 1.0);
  EXPECT_DOUBLE_EQ(r.recall, 0.5);
  EXPECT_DOUBLE_EQ(r.f1, 2.0 / 3.0);
}

TEST(Prf1, PointAdjustCreditsWholeEvent) {
  const PRF1 r = prf1(lv({0, 1, 0, 0}), lv({0, 1, 1, 0}), true);
  EXPECT_DOUBLE_EQ(r.precision, 1.0);
  EXPECT_DOUBLE_EQ(r.recall, 1.0);
  EXPECT_DOUBLE_EQ(r.f1, 1.0);
}

TEST(Prf1, NoPredictionsIsZero) {
  const PRF1 r = prf1(lv({0, 0, 0, 0}), lv({0, 1, 1, 0}), false);
  EXPECT_EQ(r.precision, 0.0);
  EXPECT_EQ(r.recall, 0.0);
  EXPECT_EQ(r.f1, 0.0);
}

TEST(Prf1, LengthMismatchThrows) {
  EXPECT_THROW(prf1(lv({0, 1}), lv({0, 1, 1}), false), Error);
}

TEST(Add, DirectDelay) {
  LabelVector pred = LabelVector::Zero(30);
  pred(13) = 1;
  EXPECT_DOUBLE_EQ(add_metric(pred, {{10, 20}}), 3.0);
  pred(10) = 1;
  EXPECT_DOUBLE_EQ(add_metric(pred, {{10, 20}}), 0.0);
}

TEST(Add, UndetectedEventCountsItsLength) {
  EXPECT_DOUBLE_EQ(add_metric(LabelVector::Zero(20), {{3, 10}}), 7.0);
}

TEST(Add, DetectionOutsideEventIgnored) {
  LabelVector pred = LabelVector::Zero(20);
  pred(2) = 1;
  pred(10) = 1;
  EXPECT_DOUBLE_EQ(add_metric(pred, {{3, 10}}), 7.0);
}

TEST(Add, EmptyEventListThrows) { EXPECT_THROW(add_metric(LabelVector::Zero(5), {}), Error); }

TEST(RangeAuc, PerfectScoreGivesUnitRoc) {
  const LabelVector truth = lv({0, 0, 1, 1, 0, 0, 0, 1, 0, 0});
  EXPECT_DOUBLE_EQ(range_auc(truth.cast<double>(), truth, 0).roc, 1.0);
}

TEST(RangeAuc, ConstantScorePrEqualsPrevalence) {
  const LabelVector truth = lv({0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0});
  for (int buffer : {0, 1, 2}) {
    const VectorXd soft = buffered_labels(truth, buffer);
    const double prevalence = soft.sum() / static_cast<double>(soft.size());
    EXPECT_NEAR(range_auc(VectorXd::Constant(12, 0.3), truth, buffer).pr, prevalence, 1e-12) << buffer;
  }
}

TEST(RangeAuc, ReversedScoresComplementRoc) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 1);
  for (int rep = 0; rep < 50; ++rep) {
    LabelVector truth(10);
    VectorXd score(10);
    for (int i = 0; i < 10; ++i) truth(i) = u(rng) < 0.3, score(i) = std::floor(u(rng) * 6);
    if (truth.sum() == 0 || truth.sum() == 10) continue;
    const double a = range_auc(score, truth, 0).roc;
    EXPECT_NEAR(range_auc(-score, truth, 0).roc, 1.0 - a, 1e-12);
  }
}

TEST(RangeAuc, BufferedLabelsDecayLinearly) {
  const VectorXd y = buffered_labels(lv({0, 0, 0, 1, 0, 0, 0}), 2);
  const VectorXd expected = (VectorXd(7) << 0, 1.0 / 3, 2.0 / 3, 1, 2.0 / 3, 1.0 / 3, 0).finished();
  EXPECT_TRUE(y.isApprox(expected));
}

TEST(RangeAuc, DefaultBufferIsHalfMeanLengthCapped) {
  EXPECT_EQ(default_buffer({{0, 10}, {20, 40}}), 7);
  EXPECT_EQ(default_buffer({{0, 400}}), 50);
}

// Exhaustive agreement with the brute-force oracles on all truth vectors up
// to length 8 (the acceptance binary covers up to 12).
TEST(MetricsOracle, ExhaustiveSmallVectors) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> level(0, 4);
  for (int n = 1; n <= 8; ++n) {
    for (int bits = 0; bits < (1 << n); ++bits) {
      LabelVector truth(n);
      for (int i = 0; i < n; ++i) truth(i) = (bits >> i) & 1;
      for (int rep = 0; rep < 2; ++rep) {
        VectorXd score(n);
        for (int i = 0; i < n; ++i) score(i) = level(rng);
        LabelVector pred = (score.array() >= 2).cast<int>();
        for (bool adjust : {false, true}) {
          const PRF1 got = prf1(pred, truth, adjust);
          const auto want = oracle::prf1(to_std(pred), to_std(truth), adjust);
          ASSERT_NEAR(got.precision, want.p, 1e-12);
          ASSERT_NEAR(got.recall, want.r, 1e-12);
          ASSERT_NEAR(got.f1, want.f1, 1e-12);
        }
        const std::vector<double> s(score.data(), score.data() + n);
        for (int buffer : {0, 1, 3}) {
          const RangeAuc got = range_auc(score, truth, buffer);
          const auto want = oracle::range_auc(s, to_std(truth), buffer);
          ASSERT_NEAR(got.roc, want.roc, 1e-12) << "n=" << n << " bits=" << bits;
          ASSERT_NEAR(got.pr, want.pr, 1e-12) << "n=" << n << " bits=" << bits;
        }
        if (truth.sum() > 0) {
          ASSERT_NEAR(add_metric(pred, events_from_labels(truth)), oracle::add(to_std(pred), to_std(truth)), 1e-12);
        }
      }
    }
  }
}

TEST(MetricsProperties, AdjustedRecallDominatesRaw) {
  std::mt19937_64 rng(5);
  std::bernoulli_distribution coin(0.35);
  for (int rep = 0; rep < 500; ++rep) {
    LabelVector truth(40), pred(40);
    for (int i = 0; i < 40; ++i) truth(i) = coin(rng), pred(i) = coin(rng);
    EXPECT_GE(prf1(pred, truth, true).recall, prf1(pred, truth, false).recall);
  }
}

TEST(MetricsProperties, RangeAucInvariantUnderMonotoneTransform) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n01;
  std::bernoulli_distribution coin(0.2);
  for (int rep = 0; rep < 50; ++rep) {
    LabelVector truth(60);
    VectorXd score(60);
    for (int i = 0; i < 60; ++i) truth(i) = coin(rng), score(i) = n01(rng);
    const VectorXd warped = score.array().exp() * 3.0 + 1.0;
    const RangeAuc a = range_auc(score, truth, 2), b = range_auc(warped, truth, 2);
    EXPECT_NEAR(a.roc, b.roc, 1e-12);
    EXPECT_NEAR(a.pr, b.pr, 1e-12);
  }
}

TEST(MetricsProperties, EarlierDetectionNeverIncreasesAdd) {
  std::mt19937_64 rng(7);
  std::bernoulli_distribution coin(0.1);
  const LabelVector truth = (LabelVector(30) << 0, 0, 1, 1, 1, 1, 1, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0,
                             0, 1, 1, 1, 0, 0, 0)
                                .finished();
  const EventList events = events_from_labels(truth);
  for (int rep = 0; rep < 200; ++rep) {
    LabelVector pred(30);
    for (int i = 0; i < 30; ++i) pred(i) = coin(rng);
    const double before = add_metric(pred, events);
    for (const Event& e : events)
      for (Eigen::Index l = e.start; l < e.end; ++l) {
        LabelVector more = pred;
        more(l) = 1;
        EXPECT_LE(add_metric(more, events), before);
      }
  }
}

TEST(EvaluateDetection, ReportMatchesComponents) {
  const LabelVector truth = lv({0, 0, 1, 1, 1, 0, 0, 0, 1, 1, 0, 0});
  const LabelVector pred = lv({0, 0, 0, 1, 0, 0, 1, 0, 0, 0, 0, 0});
  const VectorXd score = pred.cast<double>();
  const MetricsReport r = evaluate_detection(pred, score, truth);
  EXPECT_EQ(r.n_events, 2);
  EXPECT_DOUBLE_EQ(r.f1, prf1(pred, truth, true).f1);
  EXPECT_DOUBLE_EQ(r.f1_raw, prf1(pred, truth, false).f1);
  EXPECT_DOUBLE_EQ(r.add, (1.0 + 2.0) / 2.0);
  EXPECT_DOUBLE_EQ(r.r_auc_pr, range_auc(score, truth, 1).pr);
}
