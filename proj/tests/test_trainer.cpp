#include "imdiff/trainer.hpp"

#include <gtest/gtest.h>

using namespace imdiff;

namespace {

DenoiserConfig tiny(int K) {
  DenoiserConfig c;
  c.n_blocks = 1;
  c.hidden_dim = 8;
  c.n_heads = 2;
  c.step_embed_dim = 8;
  c.time_embed_dim = 8;
  c.feature_embed_dim = 2;
  c.ff_dim = 8;
  c.steps = 10;
  c.n_features = K;
  return c;
}

std::vector<MtsWindow> sine_windows(int n, Eigen::Index W, Eigen::Index K) {
  std::vector<MtsWindow> out;
  for (int i = 0; i < n; ++i) {
    MtsWindow w;
    w.values.resize(W, K);
    for (Eigen::Index k = 0; k < K; ++k)
      for (Eigen::Index l = 0; l < W; ++l) w.values(l, k) = std::sin(0.3 * (l + 7 * i) + k);
    w.start = i * W;
    out.push_back(std::move(w));
  }
  return out;
}

TrainConfig small_train(int epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 2;
  t.learning_rate = 1e-3;
  t.seed = 3;
  t.mask.n_masked = t.mask.n_unmasked = 2;
  return t;
}

}  // namespace

TEST(Trainer, InitialLossIsNoiseVariance) {
  Rng rng(1);
  const Denoiser<float> m(tiny(4), rng);
  const NoiseSchedule sched = build_schedule(10, 1e-4, 0.5, ScheduleShape::quadratic);
  const auto pair = grating_masks<float>(20, 4, 2, 2);
  std::vector<NoisedExample<float>> ex;
  Rng data(2);
  const Matrix<float> x0 = standard_normal<float>(20, 4, data);
  for (int i = 0; i < 200; ++i)
    ex.push_back(make_training_example<float>(x0, {i % 2 ? pair.m1 : pair.m0, i % 2}, 1 + i % 10, sched,
                                              Conditioning::unconditional, data));
  const LossStats s = masked_noise_loss<float>(m, ex, nullptr);
  EXPECT_EQ(s.cells, 200 * 40);
  EXPECT_NEAR(s.mean(), 1.0, 0.05);
}

TEST(Trainer, TrainingExampleReferences) {
  const NoiseSchedule sched = build_schedule(10, 1e-4, 0.5, ScheduleShape::quadratic);
  const auto pair = grating_masks<double>(8, 2, 1, 1);
  const MatrixXd x0 = MatrixXd::Constant(8, 2, 0.7);
  Rng a(4), b(4);
  const auto unc = make_training_example<double>(x0, {pair.m0, 0}, 5, sched, Conditioning::unconditional, a);
  const auto con = make_training_example<double>(x0, {pair.m0, 0}, 5, sched, Conditioning::conditional, b);
  const MatrixXd noised = forward_corrupt(x0, 5, unc.noise, sched);
  EXPECT_TRUE(unc.input.masked_channel.isApprox(noised.cwiseProduct((1.0 - pair.m0.array()).matrix())));
  EXPECT_TRUE(unc.input.reference_channel.isApprox(noised.cwiseProduct(pair.m0)));
  EXPECT_TRUE(con.input.reference_channel.isApprox(x0.cwiseProduct(pair.m0)));
  EXPECT_TRUE(con.input.masked_channel.isApprox(unc.input.masked_channel));
}

TEST(Trainer, AdamFirstStepMovesByLearningRate) {
  Vector<double> p = Vector<double>::Zero(3);
  AdamState<double> adam;
  Vector<double> g(3);
  g << 2.0, -0.5, 0.0;
  adam.apply(p, g, 0.01);
  EXPECT_NEAR(p(0), -0.01, 1e-9);
  EXPECT_NEAR(p(1), 0.01, 1e-9);
  EXPECT_EQ(p(2), 0.0);
  EXPECT_EQ(adam.step, 1);
}

TEST(Trainer, LearningRateMilestones) {
  TrainConfig t;
  t.epochs = 100;
  t.learning_rate = 1e-3;
  EXPECT_DOUBLE_EQ(learning_rate_at(t, 0), 1e-3);
  EXPECT_DOUBLE_EQ(learning_rate_at(t, 74), 1e-3);
  EXPECT_NEAR(learning_rate_at(t, 75), 1e-4, 1e-18);
  EXPECT_NEAR(learning_rate_at(t, 90), 1e-5, 1e-18);
  EXPECT_NEAR(learning_rate_at(t, 99), 1e-5, 1e-18);
}

TEST(Trainer, LossDecreasesOnSmoothData) {
  Rng rng(5);
  Denoiser<float> m(tiny(2), rng);
  AdamState<float> adam;
  const auto windows = sine_windows(8, 20, 2);
  TrainConfig t = small_train(30);
  t.learning_rate = 3e-3;
  const auto sched = build_schedule(10, 1e-4, 0.5, ScheduleShape::quadratic);
  const auto rec = train<float>(m, adam, windows, t, sched);
  ASSERT_EQ(rec.size(), 30u);
  double first = 0, last = 0;
  for (int i = 0; i < 5; ++i) {
    first += rec[i].loss;
    last += rec[25 + i].loss;
  }
  EXPECT_LT(last, first);
  EXPECT_EQ(m.training_steps, 30 * 4);
}

TEST(Trainer, DeterministicUnderSeed) {
  const auto windows = sine_windows(4, 20, 2);
  const auto sched = build_schedule(10, 1e-4, 0.5, ScheduleShape::quadratic);
  auto run = [&] {
    Rng rng(9);
    Denoiser<float> m(tiny(2), rng);
    AdamState<float> adam;
    train<float>(m, adam, windows, small_train(3), sched);
    return m.parameters();
  };
  EXPECT_EQ(run(), run());
}

TEST(Trainer, ResumeMatchesUninterruptedRun) {
  const auto windows = sine_windows(4, 20, 2);
  const auto sched = build_schedule(10, 1e-4, 0.5, ScheduleShape::quadratic);
  // The decay milestones scale with cfg.epochs; keep the rate flat so the
  // shortened first leg sees the same rates as the full run.
  TrainConfig full = small_train(4);
  full.lr_decay.milestones.clear();
  TrainConfig first_leg = full;
  first_leg.epochs = 2;

  Rng r1(9), r2(9);
  Denoiser<float> ref(tiny(2), r1), part(tiny(2), r2);
  AdamState<float> a_ref, a_part;
  const auto rec_ref = train<float>(ref, a_ref, windows, full, sched);

  int seen = 0;
  TrainHooks count;
  count.on_epoch = [&](const TrainRecord&, bool) { ++seen; };
  train<float>(part, a_part, windows, first_leg, sched, count);
  TrainHooks resume;
  resume.start_epoch = 2;
  const auto rest = train<float>(part, a_part, windows, full, sched, resume);

  EXPECT_EQ(seen, 2);
  ASSERT_EQ(rest.size(), 2u);
  EXPECT_EQ(rest.front().epoch, 2);
  EXPECT_EQ(rest.back().loss, rec_ref.back().loss);
  EXPECT_EQ(part.parameters(), ref.parameters());
  EXPECT_EQ(a_part.step, a_ref.step);
}

TEST(Trainer, RejectsBadConfigAndEmptyData) {
  Rng rng(1);
  Denoiser<float> m(tiny(2), rng);
  AdamState<float> adam;
  const auto sched = build_schedule(10, 1e-4, 0.5, ScheduleShape::quadratic);
  EXPECT_THROW(train<float>(m, adam, {}, small_train(1), sched), Error);
  TrainConfig bad = small_train(0);
  EXPECT_THROW(train<float>(m, adam, sine_windows(2, 20, 2), bad, sched), Error);
  const auto wrong = build_schedule(20, 1e-4, 0.5, ScheduleShape::quadratic);
  EXPECT_THROW(train<float>(m, adam, sine_windows(2, 20, 2), small_train(1), wrong), Error);
}
