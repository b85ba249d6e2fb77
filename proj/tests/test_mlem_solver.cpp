#include <gtest/gtest.h>

#include <cmath>

#include "mlem/diffusion_toy.hpp"
#include "mlem/em_solver.hpp"
#include "mlem/mlem_solver.hpp"

using namespace mlem;

namespace {
SdeProblem ou_problem(int k_max = 6, int base = 0) {
  SdeProblem pb;
  pb.ladder = make_synthetic_ladder(ou_drift(2, 1.0), 1.0, 3.0, 0, k_max, 11);
  pb.sigma = NoiseSchedule::constant(0.5);
  pb.x0 = {0.5, -0.3};
  pb.noise_base_steps = base;
  return pb;
}

DriftField constant_field(Vec v) {
  const std::size_t d = v.size();
  return make_drift_field(d, [v](double, auto, auto out) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i];
  }, 0.0, std::sqrt(squared_distance(v, Vec(v.size(), 0.0))));
}
}  // namespace

TEST(MlemStep, AllOnesTelescopesToTopLevel) {
  const auto pb = ou_problem();
  const Vec y = {0.3, -0.8}, z = {0.2, 1.1};
  const std::vector<std::uint8_t> ones(pb.ladder.num_levels(), 1);
  const auto r = mlem_step(y, 0.2, 0.01, pb.ladder, LevelSchedule::constant(1.0), ones, pb.sigma, z);
  const auto e = em_step(y, 0.2, 0.01, pb.ladder.level(pb.ladder.k_max()), pb.sigma, z);
  EXPECT_EQ(r.y, e);
  EXPECT_EQ(r.levels_evaluated.size(), static_cast<std::size_t>(pb.ladder.num_levels()));
}

TEST(MlemStep, AllZerosIsPureNoise) {
  const auto pb = ou_problem();
  const Vec y = {0.3, -0.8}, z = {0.2, 1.1};
  const std::vector<std::uint8_t> zeros(pb.ladder.num_levels(), 0);
  const auto r = mlem_step(y, 0.2, 0.04, pb.ladder, LevelSchedule::constant(0.5), zeros, pb.sigma, z);
  EXPECT_DOUBLE_EQ(r.y[0], y[0] + 0.2 * 0.5 * z[0]);
  EXPECT_DOUBLE_EQ(r.y[1], y[1] + 0.2 * 0.5 * z[1]);
  EXPECT_TRUE(r.levels_evaluated.empty());
}

TEST(MlemStep, SingleRandomLevelHasBernoulliVariance) {
  // f^0 = a, f^1 = a + Delta with ||Delta|| = 1; p_0 = 1, p_1 = 1/4 -> Var = (1 - p) / p = 3
  const Vec a = {0.3, -0.2}, delta = {0.6, 0.8};
  const DriftLadder ladder(0, 1, 1.0, 3.0,
                           {DriftField::zero(2), constant_field(a), constant_field({a[0] + delta[0], a[1] + delta[1]})});
  MlemStepper stepper(ladder, {0, 1});
  const int N = 100000;
  const Vec y = {0.0, 0.0}, z = {0.0, 0.0};
  const double probs[2] = {1.0, 0.25};
  Vec out(2);
  double s[2] = {0, 0}, s2 = 0;
  for (int i = 0; i < N; ++i) {
    const std::uint8_t draws[2] = {1, static_cast<std::uint8_t>(plan_uniform(5, i, 1) < 0.25)};
    stepper.step(0, 0.0, y, 1.0, 0.0, draws, probs, z, out, nullptr);
    for (int j = 0; j < 2; ++j) s[j] += out[j];
    s2 += out[0] * out[0] + out[1] * out[1];
  }
  const double m0 = s[0] / N, m1 = s[1] / N;
  const double var = s2 / N - m0 * m0 - m1 * m1;
  EXPECT_NEAR(var, 3.0, 0.05 * 3.0);
}

TEST(MlemSolve, UnitScheduleIsBitIdenticalToEm) {
  const auto pb = ou_problem(6, 1000);
  const NoiseDriver drv{3, 2};
  const auto ml = mlem_solve(pb, LevelSchedule::constant(1.0), 1000, drv, 4, 77);
  const auto em = em_solve(pb, 6, 1000, drv, 4);
  ASSERT_EQ(ml.states.size(), em.states.size());
  for (std::size_t i = 0; i < em.states.size(); ++i) ASSERT_EQ(ml.states[i], em.states[i]) << i;
}

TEST(MlemSolve, SubsetUnitScheduleIsBitIdenticalToEmAtTopOfSubset) {
  const auto pb = ou_problem(6);
  const NoiseDriver drv{3, 2};
  MlemOptions o;
  o.levels = {1, 3, 5};
  const auto ml = mlem_solve(pb, LevelSchedule::constant(1.0), 200, drv, 1, 7, o);
  EXPECT_EQ(ml.final_state(), em_solve(pb, 5, 200, drv, 1).final_state());
  EXPECT_DOUBLE_EQ(ml.ledger.drawn_total(), 200 * (8.0 + 512.0 + 32768.0));
}

TEST(MlemSolve, MixtureUnitScheduleIsBitIdenticalToEm) {
  const GaussianMixture mix({0.6, 0.4}, {{-1.0, 0.5}, {1.0, -0.5}}, {0.2, 0.3});
  const auto pb = make_diffusion_problem(mix, {});
  const NoiseDriver drv{9, 2};
  const auto ml = mlem_solve(pb, LevelSchedule::constant(1.0), 300, drv, 2, 1);
  EXPECT_EQ(ml.final_state(), em_solve(pb, pb.ladder.k_max(), 300, drv, 2).final_state());
}

TEST(MlemSolve, ConditionalMeanOfOneStepMatchesEm) {
  const auto pb = ou_problem(5);
  const auto sched = LevelSchedule::theorem(2.0, 3.0);
  const auto levels = full_levels(pb.ladder);
  MlemStepper stepper(pb.ladder, levels);
  const Vec y = {0.7, -0.4}, z = {0.3, -1.2};
  const double eta = 0.05, t = 0.3;
  Vec probs(levels.size());
  for (std::size_t j = 0; j < levels.size(); ++j) probs[j] = sched.prob(levels[j], t);
  const int N = 10000;
  double s[2] = {0, 0}, s2[2] = {0, 0};
  Vec out(2);
  std::vector<std::uint8_t> draws(levels.size());
  for (int i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < levels.size(); ++j) draws[j] = plan_uniform(derived_plan_seed(4, i), 0, levels[j]) < probs[j];
    stepper.step(0, t, y, eta, std::sqrt(eta) * 0.5, draws, probs, z, out, nullptr);
    for (int c = 0; c < 2; ++c) s[c] += out[c], s2[c] += out[c] * out[c];
  }
  const auto em = em_step(y, t, eta, pb.ladder.level(5), pb.sigma, z);
  for (int c = 0; c < 2; ++c) {
    const double m = s[c] / N;
    const double se = std::sqrt((s2[c] / N - m * m) / N);
    EXPECT_LT(std::abs(m - em[c]), 4 * se + 1e-15);
  }
}

TEST(MlemSolve, LevelCountsConcentrate) {
  const auto pb = ou_problem(4);
  const auto sched = LevelSchedule::theorem(3.0, 3.0);
  const NoiseDriver drv{3, 2};
  const int n = 2000;
  const auto tr = mlem_solve(pb, sched, n, drv, 0, 5);
  // drawn-mode counts: records with companion = false
  std::vector<double> own(5, 0.0);
  for (const auto& r : tr.ledger.records())
    if (!r.companion) own[r.level] += 1;
  for (int k = 0; k <= 4; ++k) {
    const double p = sched.prob(k, 0.0);
    EXPECT_LE(std::abs(own[k] - n * p), 4 * std::sqrt(n * p * (1 - p)) + 1e-9) << k;
  }
}

TEST(ExpectedCost, ClosedForms) {
  const auto pb = ou_problem(4);
  EXPECT_EQ(expected_cost(LevelSchedule::constant(0.0), pb.ladder, 100), 0.0);
  const DriftLadder one(2, 2, 1.0, 3.0, {DriftField::zero(2), ou_drift(2, 1.0)});
  EXPECT_DOUBLE_EQ(expected_cost(LevelSchedule::constant(0.5), one, 100), 3200.0);
}

TEST(ExpectedCost, MeanLedgerMatchesExpectation) {
  const auto pb = ou_problem(6);
  const auto sched = LevelSchedule::theorem(4.0, 3.0);
  const NoiseDriver drv{3, 2};
  const int n = 100, R = 2000;
  MlemOptions o;
  o.keep_path = false;
  for (auto mode : {CostAccounting::drawn, CostAccounting::full}) {
    double s = 0, s2 = 0;
    for (int r = 0; r < R; ++r) {
      const auto tr = mlem_solve(pb, sched, n, drv, r, derived_plan_seed(8, r), o);
      const double c = mode == CostAccounting::drawn ? tr.ledger.drawn_total() : tr.ledger.total();
      s += c, s2 += c * c;
    }
    const double mean = s / R;
    const double se = std::sqrt((s2 / R - mean * mean) / (R - 1));
    EXPECT_NEAR(mean, expected_cost(sched, pb.ladder, n, mode), 4.0 * se);
  }
  EXPECT_GT(expected_cost(sched, pb.ladder, n, CostAccounting::full), expected_cost(sched, pb.ladder, n));
}

TEST(ExpectedCost, TheoremScheduleLedgerWithinFivePercent) {
  const auto pb = ou_problem(4);
  const auto sched = LevelSchedule::theorem(4.0, 3.0);
  const NoiseDriver drv{3, 2};
  const int n = 1000;
  MlemOptions o;
  o.keep_path = false;
  double mean = 0.0;
  for (int r = 0; r < 200; ++r) mean += mlem_solve(pb, sched, n, drv, r, derived_plan_seed(8, r), o).ledger.drawn_total() / 200;
  const double ex = expected_cost(sched, pb.ladder, n);
  EXPECT_NEAR(mean, ex, 0.05 * ex);
}

TEST(ExpectedCost, MatchConstantHitsTarget) {
  const auto pb = ou_problem(6);
  const auto base = LevelSchedule::theorem(1.0, 3.0);
  const double target = 12345.0;
  const double C = match_constant([&](double c) { return expected_cost(base.with_constant(c), pb.ladder, 50); }, target);
  EXPECT_NEAR(expected_cost(base.with_constant(C), pb.ladder, 50), target, 1e-6 * target);
}

TEST(BestOfN, Properties) {
  const auto pb = ou_problem(4);
  const NoiseDriver drv{3, 2};
  const auto ref = em_solve(pb, 4, 50, drv, 0);
  const auto one = best_of_n(pb, LevelSchedule::theorem(1.0, 3.0), 50, drv, 0, 1, ref, 3);
  EXPECT_EQ(one.mse.size(), 1u);
  EXPECT_EQ(one.best_index, 0u);
  const auto det = best_of_n(pb, LevelSchedule::constant(1.0), 50, drv, 0, 5, ref, 3);
  for (double m : det.mse) EXPECT_EQ(m, det.mse.front());
  const auto many = best_of_n(pb, LevelSchedule::theorem(1.0, 3.0), 50, drv, 0, 15, ref, 3);
  const double mn = *std::min_element(many.mse.begin(), many.mse.end());
  double mean = 0;
  for (double m : many.mse) mean += m / many.mse.size();
  EXPECT_LE(mn, mean);
  EXPECT_EQ(many.mse[many.best_index], mn);
  // the persisted seed replays the winner
  const auto replay = mlem_solve(pb, LevelSchedule::theorem(1.0, 3.0), 50, drv, 0, many.best_plan_seed);
  EXPECT_EQ(replay.final_state(), many.best.final_state());
}

TEST(Levels, Validation) {
  const auto pb = ou_problem(4);
  EXPECT_THROW(validate_levels(pb.ladder, {2, 1}), std::invalid_argument);
  EXPECT_THROW(validate_levels(pb.ladder, {1, 7}), std::out_of_range);
  EXPECT_NO_THROW(validate_levels(pb.ladder, {0, 2, 4}));
}
