#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "latref/errors.hpp"
#include "latref/synthlab.hpp"
#include "latref/training.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace latref;

namespace {

synth::SynthConfig small_synth(std::uint64_t seed) {
  synth::SynthConfig c;
  c.seed = seed;
  c.num_examples = 120;
  c.tokens = 8;
  c.d_in = 16;
  c.signal_scale = 3.0;
  c.signal_positions = 4;
  return c;
}

ProbeConfig small_probe() {
  ProbeConfig c;
  c.d_in = 16;
  c.d_model = 8;
  c.heads = 2;
  c.layers = 1;
  c.ffn_dim = 16;
  c.swiglu_hidden = 16;
  c.max_len = 8;
  c.dropout = 0.1;
  return c;
}

TrainConfig small_train(std::size_t epochs = 6) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 8;
  t.optimizer.lr = 3e-3;
  t.seed = 5;
  return t;
}

struct Splits {
  hsio::Dataset train, dev, test;
};

Splits splits(const synth::SynthConfig& c) {
  const auto samples = synth::generate(c);
  return {synth::to_dataset(samples, hsio::Split::Train), synth::to_dataset(samples, hsio::Split::Dev),
          synth::to_dataset(samples, hsio::Split::Test)};
}

double mean_loss(const ProbeModel& m, const hsio::Dataset& d) {
  const auto p = predict(m, d);
  return bce_loss(p, labels_of(d));
}

bool same_parameters(const ProbeModel& a, const ProbeModel& b) {
  if (a.parameters().size() != b.parameters().size()) return false;
  for (std::size_t k = 0; k < a.parameters().size(); ++k)
    if (!a.parameters()[k].value.bitwise_equal(b.parameters()[k].value)) return false;
  return true;
}

}  // namespace

TEST(Losses, ClosedForms) {
  EXPECT_NEAR(bce_loss(std::vector<double>{0.5}, std::vector<int>{1}), std::log(2.0), 1e-15);
  EXPECT_NEAR(bce_loss(std::vector<double>{1.0, 0.0}, std::vector<int>{1, 0}), 0.0, 1e-11);
  EXPECT_NEAR(focal_loss(std::vector<double>{0.5}, std::vector<int>{1}, 2.0), 0.25 * std::log(2.0), 1e-15);
  EXPECT_NEAR(focal_loss(std::vector<double>{0.5}, std::vector<int>{1}, 2.0), 0.173287, 1e-6);
  EXPECT_DOUBLE_EQ(smoothed_target(1, 0.1), 0.95);
  EXPECT_DOUBLE_EQ(smoothed_target(0, 0.1), 0.05);
  EXPECT_THROW(bce_loss(std::vector<double>{}, std::vector<int>{}), DataError);
}

TEST(Losses, RandomBatchesAgainstSummation) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  std::bernoulli_distribution b(0.5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> p(10);
    std::vector<int> y(10);
    for (int i = 0; i < 10; ++i) {
      p[i] = u(rng);
      y[i] = b(rng);
    }
    double bce = 0.0, smooth = 0.0;
    for (int i = 0; i < 10; ++i) {
      bce -= y[i] * std::log(p[i]) + (1 - y[i]) * std::log(1 - p[i]);
      const double t = y[i] * 0.9 + 0.05;
      smooth -= t * std::log(p[i]) + (1 - t) * std::log(1 - p[i]);
    }
    EXPECT_NEAR(bce_loss(p, y), bce / 10, 1e-12);
    EXPECT_NEAR(label_smoothed_bce_loss(p, y, 0.1), smooth / 10, 1e-12);
    EXPECT_NEAR(focal_loss(p, y, 0.0, 1.0), bce_loss(p, y), 1e-12);
  }
}

TEST(Losses, LogitGradientExamples) {
  EXPECT_EQ(logit_gradient(0.0, 1), -0.5);
  EXPECT_EQ(logit_gradient(0.0, 0), 0.5);
  EXPECT_NEAR(logit_gradient(2.0, 1), -0.11920292202211755, 1e-12);
}

TEST(Losses, TapeLogitGradientMatchesClosedForm) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 4.0);
  std::bernoulli_distribution b(0.5);
  for (int trial = 0; trial < 100; ++trial) {
    const double s = n(rng);
    const int y = b(rng);
    Tape tape(true);
    const Var logit = tape.variable(Matrix{{s}});
    tape.backward(loss_from_logit(logit, y, LossSpec{}));
    EXPECT_NEAR(tape.grad_or_zero(logit)(0, 0), logit_gradient(s, y), 1e-10);
    EXPECT_NEAR(logit_gradient(s, y), oracle::sigmoid(s) - y, 1e-15);
  }
}

TEST(Losses, TapeLossesMatchProbabilityForms) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 2.0);
  for (const LossSpec spec : {LossSpec{LossKind::BCE}, LossSpec{LossKind::LabelSmooth, 0.1},
                              LossSpec{LossKind::Focal, 0.1, 2.0, 1.0}, LossSpec{LossKind::Focal, 0.1, 1.0, 0.5}}) {
    for (int trial = 0; trial < 30; ++trial) {
      const double s = n(rng);
      const int y = trial % 2;
      Tape tape(true);
      const Var logit = tape.variable(Matrix{{s}});
      const Var loss = loss_from_logit(logit, y, spec);
      const std::vector<double> p{oracle::sigmoid(s)};
      const std::vector<int> yy{y};
      const double want = spec.kind == LossKind::BCE           ? bce_loss(p, yy)
                          : spec.kind == LossKind::LabelSmooth ? label_smoothed_bce_loss(p, yy, spec.epsilon)
                                                               : focal_loss(p, yy, spec.gamma, spec.alpha);
      EXPECT_NEAR(loss.value()(0, 0), want, 1e-12) << spec.label();
      const auto f = [&](double x) {
        Tape t(false);
        return loss_from_logit(t.constant(Matrix{{x}}), y, spec).value()(0, 0);
      };
      tape.backward(loss);
      const double fd = (f(s + 1e-6) - f(s - 1e-6)) / 2e-6;
      EXPECT_NEAR(tape.grad_or_zero(logit)(0, 0), fd, 1e-7) << spec.label();
    }
  }
}

TEST(Losses, SaturatedLogitsStayFinite) {
  Tape tape(true);
  const Var logit = tape.variable(Matrix{{-800.0}});
  const Var loss = loss_from_logit(logit, 1, LossSpec{});
  EXPECT_NEAR(loss.value()(0, 0), 800.0, 1e-9);
  tape.backward(loss);
  EXPECT_NEAR(tape.grad_or_zero(logit)(0, 0), -1.0, 1e-12);
}

TEST(Losses, Validation) {
  EXPECT_THROW((LossSpec{LossKind::LabelSmooth, 0.5}.validate()), ConfigError);
  EXPECT_THROW((LossSpec{LossKind::Focal, 0.1, -1.0}.validate()), ConfigError);
  TrainConfig t;
  t.epochs = 0;
  EXPECT_THROW(t.validate(), ConfigError);
}

TEST(AdamWStep, FirstStepMovesByLearningRate) {
  std::vector<Parameter> params{{"w", Matrix{{1.0, -2.0}}}};
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.0;
  AdamW opt(cfg, params);
  opt.step(params, {Matrix{{0.5, -3.0}}});
  // bias-corrected first step is lr * g / (|g| + eps')
  EXPECT_NEAR(params[0].value(0, 0), 0.9, 1e-7);
  EXPECT_NEAR(params[0].value(0, 1), -1.9, 1e-7);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(AdamWStep, DecoupledWeightDecay) {
  std::vector<Parameter> params{{"w", Matrix{{2.0}}}};
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.5;
  AdamW opt(cfg, params);
  opt.step(params, {Matrix{{0.0}}});
  EXPECT_NEAR(params[0].value(0, 0), 2.0 * (1.0 - 0.1 * 0.5), 1e-12);
}

TEST(Training, LossDropsAndDevF1IsHigh) {
  const Splits s = splits(small_synth(11));
  ProbeConfig pc = small_probe();
  const TrainConfig tc = small_train(8);
  const double initial = mean_loss(ProbeModel(pc, tc.seed), s.train);
  const TrainResult r = train_probe(s.train, s.dev, pc, tc);
  ASSERT_EQ(r.history.size(), 8u);
  EXPECT_LT(mean_loss(r.best_model, s.train), 0.5 * initial);
  EXPECT_LT(r.history.back().train_loss, 0.5 * r.history.front().train_loss);
  EXPECT_GE(r.best_f1, 0.95);
  const auto dev = compute_metrics(predict(r.best_model, s.dev), labels_of(s.dev), 0.5,
                                   Orientation::RefusalPositive);
  EXPECT_EQ(dev.f1, r.best_f1);
}

TEST(Training, SelectionKeepsStrictBest) {
  const Splits s = splits(small_synth(12));
  const TrainResult r = train_probe(s.train, s.dev, small_probe(), small_train(5));
  double best = -1.0;
  std::size_t epoch = 0;
  for (const auto& h : r.history) {
    EXPECT_EQ(h.selected, h.dev_f1 > best);
    if (h.dev_f1 > best) {
      best = h.dev_f1;
      epoch = h.epoch;
    }
  }
  EXPECT_EQ(r.best_epoch, epoch);
  EXPECT_EQ(r.best_f1, best);
}

TEST(Training, SingleEpochReturnsThatEpoch) {
  const Splits s = splits(small_synth(13));
  const TrainResult r = train_probe(s.train, s.dev, small_probe(), small_train(1));
  ASSERT_EQ(r.history.size(), 1u);
  EXPECT_EQ(r.best_epoch, 1u);
  EXPECT_TRUE(r.history[0].selected);
}

TEST(Training, SeedDeterministic) {
  const Splits s = splits(small_synth(14));
  const TrainResult a = train_probe(s.train, s.dev, small_probe(), small_train(3));
  const TrainResult b = train_probe(s.train, s.dev, small_probe(), small_train(3));
  EXPECT_TRUE(same_parameters(a.best_model, b.best_model));
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].dev_f1, b.history[i].dev_f1);
    EXPECT_EQ(a.history[i].train_loss, b.history[i].train_loss);
  }
  testutil::TempDir dir("det");
  save_checkpoint(dir.path() / "a", a.best_model);
  save_checkpoint(dir.path() / "b", b.best_model);
  EXPECT_EQ(checkpoint_model_id(dir.path() / "a"), checkpoint_model_id(dir.path() / "b"));
}

TEST(Training, SingleClassDevIsRejected) {
  Splits s = splits(small_synth(15));
  hsio::Dataset dev;
  for (const auto& e : s.dev.examples)
    if (e.label == 1) dev.examples.push_back(e);
  EXPECT_THROW(train_probe(s.train, dev, small_probe(), small_train(1)), SelectionError);
  EXPECT_THROW(train_probe(hsio::Dataset{}, s.dev, small_probe(), small_train(1)), SelectionError);
}

TEST(Calibration, SeparableScores) {
  const auto r = calibrate_threshold(std::vector<double>{0.2, 0.4, 0.6, 0.8}, std::vector<int>{0, 0, 1, 1},
                                     GateConfig{});
  EXPECT_EQ(r.tau, 0.5);
  EXPECT_EQ(r.refusal_f1, 1.0);
  EXPECT_TRUE(r.feasible);
}

TEST(Calibration, IdenticalScoresPickRefuseNothingOnTie) {
  // two trivial policies: refuse none (F1 0) or refuse all (F1 = 2*0.5/1.5)
  const std::vector<double> s(4, 0.7);
  const auto r = calibrate_threshold(s, std::vector<int>{0, 1, 0, 1}, GateConfig{});
  EXPECT_GT(r.tau, 0.7);
  EXPECT_DOUBLE_EQ(r.refusal_f1, 2.0 / 3.0);
  // all unanswerable but one: refusing everything is still the best policy
  const auto all = calibrate_threshold(s, std::vector<int>{0, 0, 0, 1}, GateConfig{});
  EXPECT_GT(all.tau, 0.7);
}


TEST(Calibration, MaxF1MatchesExhaustiveSearch) {
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<int> len(2, 64), grid(1, 19);
  std::bernoulli_distribution b(0.5);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = len(rng);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (int i = 0; i < n; ++i) {
      s[i] = grid(rng) / 20.0;
      y[i] = b(rng);
    }
    y[0] = 0;
    y[1] = 1;
    const auto want = oracle::best_f1_policy(s, y);
    const auto r = calibrate_threshold(s, y, GateConfig{});
    ASSERT_EQ(r.refusal_f1, want.f1);
    ASSERT_EQ(oracle::refusals(s, r.tau), want.refusals);
  }
}

TEST(Calibration, BoundedFalseRefusalMatchesExhaustiveSearch) {
  std::mt19937_64 rng(22);
  std::uniform_int_distribution<int> len(2, 64), grid(1, 19);
  std::bernoulli_distribution b(0.5);
  std::uniform_real_distribution<double> u(0.5, 1.0);
  std::size_t infeasible = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = len(rng);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (int i = 0; i < n; ++i) {
      s[i] = grid(rng) / 20.0;
      y[i] = b(rng);
    }
    y[0] = 0;
    y[1] = 1;
    GateConfig g;
    g.objective = CalibrationObjective::RecallAtBoundedFpr;
    g.target_recall = u(rng);
    g.max_false_refusal = u(rng) - 0.5;
    const auto want = oracle::recall_policy(s, y, g.target_recall, g.max_false_refusal);
    const auto r = calibrate_threshold(s, y, g);
    ASSERT_EQ(r.feasible, want.feasible);
    ASSERT_EQ(oracle::refusals(s, r.tau), want.refusals);
    ASSERT_GE(r.refusal_recall, g.target_recall);
    infeasible += !want.feasible;
  }
  EXPECT_GT(infeasible, 0u);
}

TEST(Calibration, OverlappingClassesAtHighRecallAreInfeasible) {
  const std::vector<double> s{0.1, 0.3, 0.5, 0.7, 0.9, 0.2, 0.4, 0.6, 0.8, 0.95};
  const std::vector<int> y{0, 0, 0, 0, 0, 1, 1, 1, 1, 1};
  GateConfig g;
  g.objective = CalibrationObjective::RecallAtBoundedFpr;
  g.target_recall = 0.999;
  g.max_false_refusal = 0.1;
  const auto r = calibrate_threshold(s, y, g);
  EXPECT_FALSE(r.feasible);
  EXPECT_EQ(r.refusal_recall, 1.0);
  EXPECT_GT(r.tau, 0.9);
  EXPECT_LT(r.tau, 0.95);
  EXPECT_FALSE(r.note.empty());
}

TEST(Calibration, SingleClassIsRejected) {
  EXPECT_THROW(calibrate_threshold(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}, GateConfig{}),
               SelectionError);
}

TEST(Calibration, CandidatesIncludeMidpointsAndTrivialPolicies) {
  const auto c = candidate_thresholds(std::vector<double>{0.2, 0.6, 0.2});
  EXPECT_EQ(c, (std::vector<double>{0.1, 0.4, 0.5, 0.8}));
}

TEST(Calibration, SaturatedScoresKeepTauInsideUnitInterval) {
  const auto c = candidate_thresholds(std::vector<double>{0.0, 0.4, 1.0});
  EXPECT_EQ(c, (std::vector<double>{0.2, 0.5, 0.7}));

  // exactly-1 scores cannot be refused, so full recall is out of reach
  const std::vector<double> s{0.0, 1.0, 1.0, 0.3};
  const std::vector<int> y{0, 0, 1, 1};
  for (auto objective : {CalibrationObjective::MaxF1, CalibrationObjective::RecallAtBoundedFpr}) {
    GateConfig g;
    g.objective = objective;
    g.target_recall = 1.0;
    const auto r = calibrate_threshold(s, y, g);
    EXPECT_GT(r.tau, 0.0);
    EXPECT_LT(r.tau, 1.0);
    if (objective == CalibrationObjective::RecallAtBoundedFpr) EXPECT_FALSE(r.feasible);
  }
}

TEST(MultiDomain, SingleDomainEqualsTrainProbe) {
  const Splits s = splits(small_synth(31));
  std::vector<DomainData> d{{"a", s.train, s.dev, s.test}};
  const auto multi = multi_domain_train(d, small_probe(), small_train(3));
  const auto single = train_probe(s.train, s.dev, small_probe(), small_train(3));
  ASSERT_EQ(multi.domains.size(), 1u);
  EXPECT_TRUE(same_parameters(multi.domains[0].training.best_model, single.best_model));
  EXPECT_EQ(multi.cross_f1(0, 0), multi.domains[0].test_f1);
}

TEST(MultiDomain, ProbesWinOnTheirOwnDomain) {
  std::vector<DomainData> d;
  for (std::uint64_t seed : {41u, 42u}) {
    auto c = small_synth(seed);
    c.d_in = 32;
    const Splits s = splits(c);
    d.push_back({"dom" + std::to_string(seed), s.train, s.dev, s.test});
  }
  ProbeConfig pc = small_probe();
  pc.d_in = 32;
  const auto r = multi_domain_train(d, pc, small_train(8));
  EXPECT_GT(r.cross_f1(0, 0), r.cross_f1(1, 0));
  EXPECT_GT(r.cross_f1(1, 1), r.cross_f1(0, 1));
}

TEST(MultiDomain, ThreeDomainsEmitThreeCheckpoints) {
  std::vector<DomainData> d;
  for (std::uint64_t seed : {51u, 52u, 53u}) {
    const Splits s = splits(small_synth(seed));
    d.push_back({"d" + std::to_string(seed), s.train, s.dev, s.test});
  }
  const auto r = multi_domain_train(d, small_probe(), small_train(1));
  testutil::TempDir dir("multi");
  const auto paths = save_domain_checkpoints(r, dir.path());
  ASSERT_EQ(paths.size(), 3u);
  std::size_t found = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir.path())) found += e.is_directory();
  EXPECT_EQ(found, 3u);
  for (const auto& p : paths) EXPECT_NO_THROW(load_checkpoint(p));
  EXPECT_EQ(r.cross_f1.rows(), 3u);
  EXPECT_THROW(multi_domain_train(std::vector<DomainData>{}, small_probe(), small_train(1)), ConfigError);
}

TEST(TrainConfigJson, RoundTrip) {
  TrainConfig t = small_train(4);
  t.loss = LossSpec{LossKind::Focal, 0.1, 1.5, 0.25};
  t.epoch_lr_scale = {1.0, 2.0};
  const nlohmann::json j = t;
  const auto back = j.get<TrainConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  GateConfig g;
  g.objective = CalibrationObjective::RecallAtBoundedFpr;
  EXPECT_EQ(nlohmann::json(g).get<GateConfig>().objective, g.objective);
  EXPECT_THROW((nlohmann::json{{"objective", "MIN_LOSS"}}.get<GateConfig>()), ConfigError);
}
