#include <cmath>
#include <numbers>
#include <sstream>

#include <gtest/gtest.h>

#include "rawser/training.hpp"
#include "test_util.hpp"

using namespace rawser;

namespace {

ModelConfig toy_config() {
  ModelConfig c;
  c.input_seconds = 0.25;
  c.branch_widths_ms = {15, 25};
  c.filters_per_branch = 3;
  c.pooled_frames = 8;
  c.block = parse_block_spec("conv2d(2x2,3) pool2d(2x2) lstm(6) dense(8)");
  return c;
}

// Four tone classes with per-example jitter and noise; easy to separate.
struct ToyData {
  std::vector<std::vector<double>> storage;
  Dataset data;

  ToyData(std::size_t per_class, std::uint64_t seed, std::size_t length = 4000) {
    Rng rng(seed);
    std::normal_distribution<double> noise(0.0, 0.05);
    std::uniform_real_distribution<double> jitter(-0.05, 0.05);
    storage.reserve(per_class * 4);
    for (std::size_t i = 0; i < per_class; ++i)
      for (int cls = 0; cls < 4; ++cls) {
        std::vector<double> s(length);
        const double f = (100.0 + 90.0 * cls) * (1.0 + jitter(rng));
        for (std::size_t t = 0; t < length; ++t)
          s[t] = 0.5 * std::sin(2.0 * std::numbers::pi * f * static_cast<double>(t) / 16000.0) + noise(rng);
        storage.push_back(std::move(s));
      }
    for (std::size_t i = 0; i < storage.size(); ++i) data.push_back({&storage[i], static_cast<int>(i % 4)});
  }
};

TrainOptions quick_options(int epochs) {
  TrainOptions o;
  o.batch_size = 8;
  o.max_epochs = epochs;
  o.learning_rate = 1e-3;
  return o;
}

}  // namespace

TEST(RmsProp, ZeroGradientLeavesParameters) {
  std::vector<double> p{1.0, -2.0, 3.5}, g(3, 0.0), acc(3, 0.0);
  rmsprop_update(p, g, acc, 0.1, 0.9, 1e-8);
  EXPECT_EQ(p, (std::vector<double>{1.0, -2.0, 3.5}));
  EXPECT_EQ(acc, std::vector<double>(3, 0.0));
}

TEST(RmsProp, FirstStepByHand) {
  std::vector<double> p{0.0}, g{1.0}, acc{0.0};
  rmsprop_update(p, g, acc, 0.1, 0.9, 1e-8);
  EXPECT_NEAR(acc[0], 0.1, 1e-15);
  EXPECT_NEAR(-p[0], 0.1 / (std::sqrt(0.1) + 1e-8), 1e-15);
  EXPECT_NEAR(-p[0], 0.31623, 1e-5);
}

TEST(RmsProp, TwoStepTrace) {
  std::vector<double> p{1.0}, g{0.5}, acc{0.0};
  rmsprop_update(p, g, acc, 0.01, 0.9, 1e-8);
  rmsprop_update(p, g, acc, 0.01, 0.9, 1e-8);
  const double a1 = 0.9 * 0.0 + (1.0 - 0.9) * 0.5 * 0.5;
  const double p1 = 1.0 - 0.01 * 0.5 / (std::sqrt(a1) + 1e-8);
  const double a2 = 0.9 * a1 + (1.0 - 0.9) * 0.5 * 0.5;
  const double p2 = p1 - 0.01 * 0.5 / (std::sqrt(a2) + 1e-8);
  EXPECT_EQ(acc[0], a2);
  EXPECT_EQ(p[0], p2);
}

TEST(RmsProp, RejectsNonFinite) {
  std::vector<double> p{1.0}, g{std::nan("")}, acc{0.0};
  EXPECT_THROW(rmsprop_update(p, g, acc, 0.1, 0.9, 1e-8), NumericError);
}

TEST(RmsProp, DescendsQuadratic) {
  Tensor w = Tensor::from({1}, {3.0}, true);
  ParamList params{{"w", w, true}};
  OptimizerState st{1e-3, 0.9, 1e-8, {}};
  for (int i = 0; i < 20; ++i) {
    w.zero_grad();
    Tensor loss = sum(mul(w, w));
    const double before = loss.item();
    backward(loss);
    rmsprop_step(params, st);
    EXPECT_LT(w[0] * w[0], before);
  }
}

TEST(Clip, ScalesToNorm) {
  Tensor a = Tensor::zeros({2}, true);
  ParamList params{{"a", a, true}};
  a.grad()[0] = 3.0;
  a.grad()[1] = 4.0;
  EXPECT_DOUBLE_EQ(clip_grad_norm(params, 1.0), 5.0);
  EXPECT_DOUBLE_EQ(a.grad()[0], 0.6);
  EXPECT_DOUBLE_EQ(a.grad()[1], 0.8);
}

TEST(Schedule, IncreasingNeverHalves) {
  ScheduleState s;
  for (int e = 1; e <= 60; ++e) EXPECT_EQ(schedule_update(s, e / 100.0), ScheduleDecision::Continue);
  EXPECT_EQ(s.halvings_applied, 0);
}

TEST(Schedule, ConstantTrace) {
  ScheduleState s;
  s.best_val_uar = 0.5;
  std::vector<int> halves;
  int stop = 0;
  for (int e = 1; e <= 30 && !stop; ++e) {
    const auto d = schedule_update(s, 0.5);
    if (d == ScheduleDecision::Halve) halves.push_back(e);
    if (d == ScheduleDecision::Stop) stop = e;
  }
  EXPECT_EQ(halves, (std::vector<int>{5, 10, 15}));
  EXPECT_EQ(stop, 20);
}

TEST(Schedule, ConstantFromStart) {
  // A trace that never beats the initial best counts from epoch 1.
  ScheduleState s;
  std::vector<int> halves;
  int stop = 0;
  for (int e = 1; e <= 30 && !stop; ++e) {
    const auto d = schedule_update(s, 0.0);
    if (d == ScheduleDecision::Halve) halves.push_back(e);
    if (d == ScheduleDecision::Stop) stop = e;
  }
  EXPECT_EQ(halves, (std::vector<int>{5, 10, 15}));
  EXPECT_EQ(stop, 20);
  EXPECT_TRUE(s.stopped);
  EXPECT_EQ(schedule_update(s, 1.0), ScheduleDecision::Stop);
}

TEST(Schedule, ImprovementResets) {
  ScheduleState s;
  schedule_update(s, 0.5);
  for (int e = 2; e <= 5; ++e) EXPECT_EQ(schedule_update(s, 0.5), ScheduleDecision::Continue);
  EXPECT_EQ(schedule_update(s, 0.6), ScheduleDecision::Continue);
  EXPECT_EQ(s.epochs_since_improvement, 0);
  EXPECT_EQ(s.halvings_applied, 0);
  // Noise below the threshold is not an improvement.
  EXPECT_EQ(schedule_update(s, 0.6 + 5e-7), ScheduleDecision::Continue);
  EXPECT_EQ(s.epochs_since_improvement, 1);
}

TEST(Schedule, ReplayIsPure) {
  Rng rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> trace(80);
  for (auto& v : trace) v = std::round(u(rng) * 4.0) / 4.0;
  auto run = [&] {
    ScheduleState s;
    std::vector<ScheduleDecision> d;
    for (double v : trace) d.push_back(schedule_update(s, v, 3, 9));
    return d;
  };
  EXPECT_EQ(run(), run());
}

TEST(Schedule, HalvedRatesAreExact) {
  double lr = 1e-4;
  for (int k = 1; k <= 10; ++k) {
    lr /= 2.0;
    EXPECT_EQ(lr, std::ldexp(1e-4, -k));
  }
  EXPECT_EQ(std::ldexp(1e-4, -2), 2.5e-5);
}

TEST(Batches, NeverLeaveSingletons) {
  for (std::size_t n = 2; n < 100; ++n)
    for (std::size_t b : {2u, 3u, 8u, 32u}) {
      std::size_t covered = 0, prev = 0;
      for (const auto& [lo, hi] : batch_ranges(n, b)) {
        EXPECT_EQ(lo, prev);
        EXPECT_GE(hi - lo, 2u);
        covered += hi - lo;
        prev = hi;
      }
      EXPECT_EQ(covered, n);
    }
}

TEST(TrainFold, LearnsToyTask) {
  const ToyData train(12, 1), val(4, 2);
  TrainOptions o = quick_options(40);
  o.learning_rate = 1e-2;
  o.halve_patience = 100;
  o.stop_patience = 100;
  const TrainRunResult r = train_fold(toy_config(), o, train.data, val.data, 7);
  ASSERT_FALSE(r.history.empty());
  double best_train = 0.0, best_val = 0.0;
  for (const auto& e : r.history) {
    best_train = std::max(best_train, e.train_uar);
    best_val = std::max(best_val, e.val_uar);
  }
  EXPECT_GE(best_train, 0.95) << r.history.size() << " epochs";
  EXPECT_EQ(r.best_val_uar, best_val);
  EXPECT_EQ(r.history[static_cast<std::size_t>(r.best_epoch - 1)].val_uar, r.best_val_uar);
  // The returned weights are the best checkpoint.
  Model m = r.model.clone();
  EXPECT_NEAR(uar(evaluate(m, val.data)), r.best_val_uar, 1e-12);
}

TEST(TrainFold, DeterministicHistory) {
  const ToyData train(4, 1), val(2, 2);
  std::ostringstream a, b;
  const TrainRunResult r1 = train_fold(toy_config(), quick_options(4), train.data, val.data, 3, &a);
  const TrainRunResult r2 = train_fold(toy_config(), quick_options(4), train.data, val.data, 3, &b);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(r1.model.serialize(), r2.model.serialize());
  const std::string log = a.str();
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 4);
}

TEST(TrainFold, HalvingShowsInHistory) {
  const ToyData train(2, 1), val(1, 2);
  TrainOptions o = quick_options(12);
  o.learning_rate = 1e-4;
  o.halve_patience = 1;
  o.stop_patience = 100;
  const TrainRunResult r = train_fold(toy_config(), o, train.data, val.data, 3);
  int halvings = 0;
  for (const auto& e : r.history) {
    EXPECT_EQ(e.learning_rate, std::ldexp(1e-4, -halvings)) << "epoch " << e.epoch;
    if (e.decision == "halve") ++halvings;
  }
}

TEST(TrainFold, RejectsEmptyPartitions) {
  const ToyData train(2, 1);
  EXPECT_THROW(train_fold(toy_config(), quick_options(1), train.data, {}, 1), Error);
  EXPECT_THROW(train_fold(toy_config(), quick_options(1), {}, train.data, 1), Error);
}

TEST(Repeats, SingleRepeat) {
  const ToyData train(4, 1), val(2, 2), test(2, 3);
  const RepeatResult r = repeat_and_aggregate(toy_config(), quick_options(3), train.data, val.data, test.data, 1, 11);
  ASSERT_EQ(r.test_uars.size(), 1u);
  EXPECT_EQ(r.summary.std, 0.0);
  EXPECT_EQ(r.summary.mean, r.test_uars[0]);
  EXPECT_EQ(r.ensemble_uar, r.test_uars[0]);
  EXPECT_EQ(r.ensemble_cm, r.test_cms[0]);
}

TEST(Repeats, SameSeedHasNoVariance) {
  const ToyData train(4, 1), val(2, 2), test(2, 3);
  const RepeatResult r =
      repeat_and_aggregate(toy_config(), quick_options(3), train.data, val.data, test.data, 3, 11, true);
  EXPECT_EQ(r.seeds, (std::vector<std::uint64_t>{11, 11, 11}));
  EXPECT_EQ(r.summary.std, 0.0);
}

TEST(Repeats, SummaryMatchesRecomputation) {
  const ToyData train(4, 1), val(2, 2), test(3, 3);
  int observed = 0;
  const RepeatResult r = repeat_and_aggregate(toy_config(), quick_options(3), train.data, val.data, test.data, 3, 20,
                                              false, [&](int, const TrainRunResult&) { ++observed; });
  EXPECT_EQ(observed, 3);
  EXPECT_EQ(r.seeds, (std::vector<std::uint64_t>{20, 21, 22}));
  double m = 0.0;
  for (double u : r.test_uars) m += u;
  m /= 3.0;
  double ss = 0.0;
  for (double u : r.test_uars) ss += (u - m) * (u - m);
  EXPECT_NEAR(r.summary.mean, m, 1e-15);
  EXPECT_NEAR(r.summary.std, std::sqrt(ss / 2.0), 1e-15);
}
