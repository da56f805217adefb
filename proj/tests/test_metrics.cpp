#include <gtest/gtest.h>

#include <random>
#include <vector>

#include "latref/errors.hpp"
#include "latref/metrics.hpp"
#include "oracles.hpp"

using namespace latref;


TEST(Metrics, PerfectSeparation) {
  const std::vector<double> s{0.9, 0.1};
  const std::vector<int> y{1, 0};
  for (auto o : {Orientation::RefusalPositive, Orientation::AnswerablePositive}) {
    const auto r = compute_metrics(s, y, 0.5, o);
    EXPECT_EQ(r.accuracy, 1.0);
    EXPECT_EQ(r.precision, 1.0);
    EXPECT_EQ(r.recall, 1.0);
    EXPECT_EQ(r.f1, 1.0);
    ASSERT_TRUE(r.auc);
    EXPECT_EQ(*r.auc, 1.0);
  }
}

TEST(Metrics, AllTiedScoresGiveHalfAuc) {
  const std::vector<double> s(6, 0.3);
  const std::vector<int> y{1, 0, 1, 1, 0, 0};
  EXPECT_EQ(*auc(s, y, Orientation::RefusalPositive), 0.5);
}

TEST(Metrics, ConfusionArithmetic) {
  // refusal-positive: label 0 is positive, score < 0.5 predicts it
  const std::vector<double> s{0.1, 0.2, 0.3, 0.8, 0.9};
  const std::vector<int> y{0, 0, 1, 0, 1};
  const auto r = compute_metrics(s, y, 0.5, Orientation::RefusalPositive);
  EXPECT_EQ(r.tp, 2u);
  EXPECT_EQ(r.fp, 1u);
  EXPECT_EQ(r.fn, 1u);
  EXPECT_EQ(r.tn, 1u);
  EXPECT_DOUBLE_EQ(r.precision, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.recall, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.f1, 2.0 / 3.0);
  EXPECT_EQ(r.tp + r.fp + r.tn + r.fn, r.n);
}

TEST(Metrics, ThresholdEqualityAnswers) {
  const auto r = compute_metrics(std::vector<double>{0.5}, std::vector<int>{0}, 0.5, Orientation::RefusalPositive);
  EXPECT_EQ(r.fn, 1u);
}

TEST(Metrics, SingleClassHasNoAuc) {
  const auto r = compute_metrics(std::vector<double>{0.2, 0.7}, std::vector<int>{1, 1}, 0.5,
                                 Orientation::RefusalPositive);
  EXPECT_FALSE(r.auc);
  EXPECT_EQ(r.f1, 0.0);
  EXPECT_TRUE(nlohmann::json(r).at("auc").is_null());
}

TEST(Metrics, F1ZeroWhenBothZero) { EXPECT_EQ(f1_score(0.0, 0.0), 0.0); }

TEST(Metrics, BadInput) {
  EXPECT_THROW(compute_metrics(std::vector<double>{}, std::vector<int>{}, 0.5, Orientation::RefusalPositive),
               DataError);
  EXPECT_THROW(compute_metrics(std::vector<double>{0.1}, std::vector<int>{2}, 0.5, Orientation::RefusalPositive),
               DataError);
  EXPECT_THROW(compute_metrics(std::vector<double>{0.1}, std::vector<int>{1, 0}, 0.5, Orientation::RefusalPositive),
               ShapeError);
}

TEST(Metrics, MatchesBruteForceExactly) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> len(1, 64), grid(0, 20), bit(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = len(rng);
    std::vector<double> s(n);
    std::vector<int> y(n);
    // coarse grid so ties and threshold hits happen often
    for (int i = 0; i < n; ++i) {
      s[i] = grid(rng) / 20.0;
      y[i] = bit(rng);
    }
    const double tau = grid(rng) / 20.0;
    for (auto o : {Orientation::RefusalPositive, Orientation::AnswerablePositive}) {
      const auto got = compute_metrics(s, y, tau, o);
      const auto want = oracle::confusion(s, y, tau, o == Orientation::RefusalPositive);
      ASSERT_EQ(got.tp, want.tp);
      ASSERT_EQ(got.fp, want.fp);
      ASSERT_EQ(got.tn, want.tn);
      ASSERT_EQ(got.fn, want.fn);
      ASSERT_EQ(got.accuracy, want.accuracy);
      ASSERT_EQ(got.precision, want.precision);
      ASSERT_EQ(got.recall, want.recall);
      ASSERT_EQ(got.f1, want.f1);
      ASSERT_EQ(got.auc.has_value(), want.auc.has_value());
      if (want.auc) ASSERT_EQ(*got.auc, *want.auc);
    }
  }
}

TEST(Metrics, OrientationFlip) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::bernoulli_distribution b(0.4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> s(40), neg(40);
    std::vector<int> y(40);
    for (int i = 0; i < 40; ++i) {
      s[i] = u(rng);
      neg[i] = -s[i];
      y[i] = b(rng);
    }
    const auto r = compute_metrics(s, y, 0.5, Orientation::RefusalPositive);
    const auto a = compute_metrics(s, y, 0.5, Orientation::AnswerablePositive);
    EXPECT_EQ(r.tp, a.tn);
    EXPECT_EQ(r.fp, a.fn);
    EXPECT_EQ(r.fn, a.fp);
    EXPECT_EQ(r.accuracy, a.accuracy);
    if (!r.auc) continue;
    EXPECT_DOUBLE_EQ(*r.auc, *a.auc);
    EXPECT_NEAR(*auc(neg, y, Orientation::RefusalPositive), 1.0 - *r.auc, 1e-15);
  }
}
