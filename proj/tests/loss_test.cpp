#include <atac/loss.hpp>
#include <atac/training.hpp>

#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"

using namespace atac;

TEST(DeviationLoss, NormalAtReferenceMeanIsZero) {
  EXPECT_DOUBLE_EQ(deviation_loss(0.0, 0, ReferenceDistribution::analytic(), LossConfig{}), 0.0);
}

TEST(DeviationLoss, AnomalyAtCutoffIsZero) {
  EXPECT_DOUBLE_EQ(deviation_loss(10.0, 1, ReferenceDistribution::analytic(), LossConfig{}), 0.0);
}

TEST(DeviationLoss, AnomalyInsideCutoffPaysTheMargin) {
  EXPECT_DOUBLE_EQ(deviation_loss(4.0, 1, ReferenceDistribution::analytic(), LossConfig{}), 6.0);
}

TEST(DeviationLoss, NormalPaysAbsoluteDeviation) {
  EXPECT_DOUBLE_EQ(deviation_loss(-3.0, 0, ReferenceDistribution::analytic(), LossConfig{}), 3.0);
}

TEST(DeviationLoss, DeviationUsesReferenceMoments) {
  ReferenceDistribution ref;
  ref.mu_R = 1.0;
  ref.sigma_R = 2.0;
  EXPECT_DOUBLE_EQ(deviation(3.0, ref), 1.0);
}

TEST(DeviationLoss, HingeClampsWhatTheRawMarginDoesNot) {
  LossConfig raw;
  raw.hinge = false;
  EXPECT_DOUBLE_EQ(deviation_loss(15.0, 1, ReferenceDistribution::analytic(), raw), -5.0);
  EXPECT_DOUBLE_EQ(deviation_loss(15.0, 1, ReferenceDistribution::analytic(), LossConfig{}), 0.0);
}

TEST(DeviationLoss, RejectsBadLabelAndBadSigma) {
  EXPECT_THROW(deviation_loss(0.0, 2, ReferenceDistribution::analytic(), LossConfig{}),
               std::invalid_argument);
  ReferenceDistribution bad;
  bad.sigma_R = 0.0;
  EXPECT_THROW(deviation(1.0, bad), std::invalid_argument);
}

TEST(DeviationLoss, HingedLossIsNeverNegative) {
  Rng rng(61);
  for (int i = 0; i < 500; ++i) {
    const double s = rng.uniform(-30.0, 30.0);
    const int y = rng.bernoulli(0.5) ? 1 : 0;
    EXPECT_GE(deviation_loss(s, y, ReferenceDistribution::analytic(), LossConfig{}), 0.0);
  }
}

TEST(BatchLoss, FullySeparatedPairIsZero) {
  auto scores = Tensor<double>::from_values({2}, {0.0, 10.0});
  auto loss = batch_loss(scores, {0, 1}, ReferenceDistribution::analytic(), LossConfig{});
  EXPECT_DOUBLE_EQ(loss.value(), 0.0);
}

TEST(BatchLoss, MatchesPerSampleLoopReference) {
  Rng rng(67);
  std::vector<double> s(64);
  std::vector<int> y(64);
  for (std::size_t i = 0; i < 64; ++i) {
    s[i] = rng.uniform(-15.0, 15.0);
    y[i] = rng.bernoulli(0.5) ? 1 : 0;
  }
  auto scores = Tensor<double>::from_values({64}, s);
  auto loss = batch_loss(scores, y, ReferenceDistribution::analytic(), LossConfig{});
  EXPECT_NEAR(loss.value(), oracle::deviation_batch_loss(s, y, 0.0, 1.0, 10.0, true), 1e-12);

  ReferenceDistribution ref;
  ref.mu_R = 1.0;
  ref.sigma_R = 2.0;
  LossConfig raw;
  raw.hinge = false;
  auto loss2 = batch_loss(scores, y, ref, raw);
  EXPECT_NEAR(loss2.value(), oracle::deviation_batch_loss(s, y, 1.0, 2.0, 10.0, false), 1e-9);
}

TEST(BatchLoss, RejectsMismatchedInputs) {
  auto scores = Tensor<double>::from_values({2}, {0.0, 1.0});
  EXPECT_THROW(batch_loss(scores, {0}, ReferenceDistribution::analytic(), LossConfig{}),
               std::invalid_argument);
  EXPECT_THROW(batch_loss(scores, {0, 3}, ReferenceDistribution::analytic(), LossConfig{}),
               std::invalid_argument);
}

TEST(BatchLoss, NormalGradientPullsTowardReferenceMean) {
  auto scores = Tensor<double>::from_values({2}, {3.0, -3.0});
  scores.set_requires_grad(true);
  auto loss = batch_loss(scores, {0, 0}, ReferenceDistribution::analytic(), LossConfig{});
  backward(loss);
  EXPECT_DOUBLE_EQ(scores.grad()[0], 0.5);
  EXPECT_DOUBLE_EQ(scores.grad()[1], -0.5);
  Tape<double>::active().clear();
}

TEST(BatchLoss, AnomalyGradientVanishesBeyondCutoff) {
  auto scores = Tensor<double>::from_values({2}, {12.0, 4.0});
  scores.set_requires_grad(true);
  auto loss = batch_loss(scores, {1, 1}, ReferenceDistribution::analytic(), LossConfig{});
  backward(loss);
  EXPECT_DOUBLE_EQ(scores.grad()[0], 0.0);
  EXPECT_DOUBLE_EQ(scores.grad()[1], -0.5);
  Tape<double>::active().clear();
}

TEST(ReferenceDistributionT, SampledMomentsAreSeededAndNearStandardNormal) {
  Rng a(123), b(123), c(321);
  auto ra = ReferenceDistribution::sampled(5000, a);
  auto rb = ReferenceDistribution::sampled(5000, b);
  auto rc = ReferenceDistribution::sampled(5000, c);
  EXPECT_EQ(ra.mu_R, rb.mu_R);
  EXPECT_EQ(ra.sigma_R, rb.sigma_R);
  EXPECT_NE(ra.mu_R, rc.mu_R);
  EXPECT_NEAR(ra.mu_R, 0.0, 0.05);
  EXPECT_NEAR(ra.sigma_R, 1.0, 0.05);
  Rng d(1);
  EXPECT_THROW(ReferenceDistribution::sampled(1, d), std::invalid_argument);
}

TEST(BatchLoss, FreeScoresOptimizeToTheIntendedSeparation) {
  // twelve directly optimized scores stand in for the network: the loss alone
  // must drive normals to the reference mean and anomalies past the cutoff
  std::vector<double> init(12, 0.5);
  std::vector<int> labels;
  for (int i = 0; i < 12; ++i) labels.push_back(i < 6 ? 0 : 1);
  auto scores = Tensor<double>::from_values({12}, init);
  scores.set_requires_grad(true);
  Adam<double> opt({{"scores", scores}});
  const LossConfig cfg;
  for (int step = 0; step < 250; ++step) {
    opt.zero_grad();
    auto loss = batch_loss(scores, labels, ReferenceDistribution::analytic(), cfg);
    backward(loss);
    opt.step(0.1);
    Tape<double>::active().clear();
  }
  for (int i = 0; i < 12; ++i) {
    const double dev = std::abs(scores.values()[i]);
    if (labels[i] == 0)
      EXPECT_LT(dev, 0.1) << "normal score " << i << " stuck at deviation " << dev;
    else
      EXPECT_GT(dev, cfg.k - 0.1) << "anomaly score " << i << " stuck at deviation " << dev;
  }
}
