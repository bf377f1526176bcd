#include <gtest/gtest.h>

#include <random>

#include "branchlab/experiments.hpp"

namespace bl = branchlab;
using bl::BranchArch;
using bl::BranchedModel;
using bl::LossSpec;
using bl::Matrix;
using bl::TrainConfig;

namespace {

BranchedModel perceptrons(std::vector<double> wb) {
  const std::size_t m = wb.size() / 2;
  return BranchedModel(BranchArch::scalar_perceptron(), bl::ParamStore(std::move(wb), m, 0));
}

}  // namespace

TEST(Train, ZeroLearningRateKeepsParameters) {
  const auto model = bl::init(BranchArch::scalar_perceptron(), 4, 3);
  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.max_steps = 25;
  const auto r = bl::train(model, bl::toy1(), LossSpec::squared_l2(), cfg);
  EXPECT_EQ(r.model, model);
  EXPECT_EQ(r.trace.losses.size(), 25u);
}

TEST(Train, MatchesClosedFormRecursion) {
  const double xs[] = {1.0}, ys[] = {1.0};
  const bl::Dataset data = bl::regression_dataset(xs, ys);
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.max_steps = 15;
  const auto r = bl::train(perceptrons({0.3, 0.2}), data, LossSpec::squared_l2(), cfg);
  double w = 0.3, b = 0.2;
  ASSERT_EQ(r.trace.losses.size(), 15u);
  for (std::size_t s = 0; s < 15; ++s) {
    const double e = w + b - 1.0;
    EXPECT_NEAR(r.trace.losses[s], 0.5 * e * e, 1e-12) << "step " << s;
    w -= cfg.learning_rate * e;
    b -= cfg.learning_rate * e;
  }
  EXPECT_NEAR(r.model.params().values()[0], w, 1e-12);
  EXPECT_NEAR(r.model.params().values()[1], b, 1e-12);
}

TEST(Success, ZeroModelOnToy1) {
  const auto zero = perceptrons({0, 0, 0, 0});
  const bl::Dataset d = bl::toy1();
  EXPECT_DOUBLE_EQ(bl::residual_sum_squares(bl::forward(zero, d.inputs), d.targets), 2.5);
  EXPECT_FALSE(bl::success(zero, d, 1e-4));
}

TEST(Success, StrictInequalityAndPerfectFit) {
  const double xs[] = {1.0, 2.0}, ys[] = {1.0, 2.0};
  const bl::Dataset d = bl::regression_dataset(xs, ys);
  const auto exact = perceptrons({1, 0});
  EXPECT_TRUE(bl::success(exact, d, 1e-12));
  EXPECT_FALSE(bl::success(exact, d, 0.0));
  EXPECT_THROW(bl::success(exact, d, -1.0), std::invalid_argument);
}

TEST(Train, ZeroCollaborativeFactorIsFixedPoint) {
  const double xs[] = {1.0, 2.0}, ys[] = {1.0, 2.0};
  const bl::Dataset d = bl::regression_dataset(xs, ys);
  TrainConfig cfg;
  cfg.max_steps = 1;
  cfg.success_delta = 0.0;
  const auto model = perceptrons({1, 0, -1, 0, 0.5, -2});
  // Targets are the model outputs, so every residual is zero.
  bl::Dataset fit = d;
  fit.targets = bl::forward(model, d.inputs);
  const auto r = bl::train(model, fit, LossSpec::squared_l2(), cfg);
  EXPECT_EQ(r.model, model);
}

TEST(Train, StopsOnSuccessWithoutExtraUpdate) {
  const double xs[] = {1.0, 2.0}, ys[] = {1.0, 2.0};
  const auto exact = perceptrons({1, 0});
  const auto r = bl::train(exact, bl::regression_dataset(xs, ys), LossSpec::squared_l2(), TrainConfig{});
  ASSERT_TRUE(r.trace.converged_at.has_value());
  EXPECT_EQ(*r.trace.converged_at, 0u);
  EXPECT_EQ(r.model, exact);
}

TEST(Train, DeterministicTraces) {
  const auto model = bl::init(BranchArch::scalar_perceptron(), 6, 12);
  TrainConfig cfg;
  cfg.max_steps = 500;
  const auto a = bl::train(model, bl::toy2(), LossSpec::squared_l2(), cfg);
  const auto b = bl::train(model, bl::toy2(), LossSpec::squared_l2(), cfg);
  EXPECT_EQ(a.trace.losses, b.trace.losses);
  EXPECT_EQ(a.model, b.model);
}

TEST(Train, SgdDeterministicGivenSeed) {
  bl::BlobConfig blobs;
  blobs.per_class = 20;
  const bl::Dataset d = bl::gaussian_blobs(blobs);
  const auto model = bl::init(BranchArch::mlp({2, 4, 4}, 0.01, true), 3, 1, bl::ResidualMode::None, 0.1);
  TrainConfig cfg = bl::experiments::classify_train_defaults();
  cfg.max_steps = 40;
  cfg.batch_size = 7;
  const auto a = bl::train(model, d, LossSpec::clamped_cross_entropy(4), cfg);
  const auto b = bl::train(model, d, LossSpec::clamped_cross_entropy(4), cfg);
  EXPECT_EQ(a.trace.losses, b.trace.losses);
  cfg.seed = 1;
  const auto c = bl::train(model, d, LossSpec::clamped_cross_entropy(4), cfg);
  EXPECT_NE(a.trace.losses, c.trace.losses);
}

TEST(Train, SmallStepDecreasesLoss) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 30; ++trial) {
    const auto model = bl::init(BranchArch::mlp({2, 4, 2}), 3, rng());
    bl::Dataset d;
    d.inputs.x = Matrix::Random(2, 10);
    d.targets = Matrix::Random(2, 10);
    const double before = bl::mean_loss(model, LossSpec::squared_l2(), d);
    TrainConfig cfg;
    cfg.max_steps = 1;
    double lr = 0.1;
    double after = before;
    for (int halving = 0; halving < 20 && after >= before; ++halving, lr /= 2) {
      cfg.learning_rate = lr;
      after = bl::mean_loss(bl::train(model, d, LossSpec::squared_l2(), cfg).model, LossSpec::squared_l2(), d);
    }
    EXPECT_LT(after, before) << "trial " << trial;
  }
}

TEST(Train, DivergenceReportsStep) {
  const double xs[] = {10.0}, ys[] = {1.0};
  TrainConfig cfg;
  cfg.learning_rate = 1e4;
  cfg.max_steps = 10'000;
  try {
    bl::train(perceptrons({1, 1}), bl::regression_dataset(xs, ys), LossSpec::squared_l2(), cfg);
    FAIL() << "expected divergence";
  } catch (const bl::DivergenceError& e) {
    EXPECT_GT(e.step(), 0u);
  }
}

TEST(Train, SnapshotsAtRequestedCadence) {
  TrainConfig cfg;
  cfg.max_steps = 30;
  cfg.snapshot_every = 10;
  cfg.success_delta = 0.0;
  const auto r = bl::train(bl::init(BranchArch::scalar_perceptron(), 3, 2), bl::toy1(), LossSpec::squared_l2(), cfg);
  ASSERT_EQ(r.trace.snapshots.size(), 3u);
  EXPECT_EQ(r.trace.snapshots[2].step, 20u);
  EXPECT_EQ(r.trace.snapshots[0].branch_outputs.size(), 3u);
}

TEST(Train, Toy2TwentyBranchesFitReliably) {
  std::size_t fit = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto r = bl::train(bl::init(BranchArch::scalar_perceptron(), 20, seed), bl::toy2(), LossSpec::squared_l2(), TrainConfig{});
    fit += bl::mean_loss(r.model, LossSpec::squared_l2(), bl::toy2()) < 1e-3;
  }
  EXPECT_GE(fit, 90u);
}
