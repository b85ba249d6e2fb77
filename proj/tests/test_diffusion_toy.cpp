#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mlem/diffusion_toy.hpp"
#include "mlem/em_solver.hpp"

using namespace mlem;

namespace {

GaussianMixture two_component() { return GaussianMixture({0.35, 0.65}, {{-1.0, 0.5}, {1.5, -0.4}}, {0.3, 0.8}); }

double norm(const Vec& v) { return std::sqrt(squared_distance(v, Vec(v.size(), 0.0))); }

}  // namespace

TEST(MixtureScore, StandardNormalIsMinusX) {
  const auto mix = GaussianMixture::standard_normal(3);
  for (double t : {0.0, 0.1, 2.0}) {
    const Vec x = {0.3, -1.7, 2.2};
    const Vec s = mixture_score(mix, t, x);
    for (std::size_t r = 0; r < 3; ++r) EXPECT_NEAR(s[r], -x[r], 1e-14);
  }
}

TEST(MixtureScore, ShiftedUnitGaussian) {
  const Vec mu = {2.0, -1.0};
  const GaussianMixture mix({1.0}, {mu}, {1.0});
  for (double t : {0.05, 0.7, 3.0}) {
    const Vec x = {0.4, 0.9};
    const Vec s = mixture_score(mix, t, x);
    const double a = std::sqrt(std::exp(-t));
    for (std::size_t r = 0; r < 2; ++r) EXPECT_NEAR(s[r], -(x[r] - a * mu[r]), 1e-13);
  }
}

TEST(MixtureScore, MatchesNumericalGradientOfLogDensity) {
  const auto mix = two_component();
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> ut(0.01, 5.0), ux(-3.0, 3.0);
  double worst = 0.0;
  for (int n = 0; n < 1000; ++n) {
    const double t = ut(rng);
    Vec x = {ux(rng), ux(rng)};
    const Vec s = mixture_score(mix, t, x);
    Vec fd(2);
    for (std::size_t r = 0; r < 2; ++r) {
      const double h = 1e-5 * std::max(1.0, std::abs(x[r]));
      Vec xp = x, xm = x;
      xp[r] += h;
      xm[r] -= h;
      fd[r] = (mixture_log_density(mix, t, xp) - mixture_log_density(mix, t, xm)) / (2 * h);
    }
    worst = std::max(worst, std::sqrt(squared_distance(s, fd)) / std::max(norm(s), 1e-3));
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(MixtureScore, FarTailsStayFinite) {
  const auto mix = two_component();
  const Vec s = mixture_score(mix, 0.01, Vec{80.0, -60.0});
  EXPECT_TRUE(std::isfinite(s[0]) && std::isfinite(s[1]));
  EXPECT_LT(s[0], 0.0);
  EXPECT_GT(s[1], 0.0);
}

TEST(BackwardDrift, StandardNormalIdentities) {
  const auto mix = GaussianMixture::standard_normal(2);
  const Vec x = {1.3, -0.4};
  const Vec sde = backward_sde_drift(mix, 0.8, x);
  const Vec ode = backward_ode_rhs(mix, 0.8, x);
  for (std::size_t r = 0; r < 2; ++r) {
    EXPECT_NEAR(sde[r], -0.5 * x[r], 1e-14);
    EXPECT_NEAR(ode[r], 0.0, 1e-14);
  }
}

TEST(BackwardDrift, OdeIsSdeMinusHalfScore) {
  const auto mix = two_component();
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> ut(0.01, 5.0), ux(-3.0, 3.0);
  for (int n = 0; n < 200; ++n) {
    const double t = ut(rng);
    const Vec x = {ux(rng), ux(rng)};
    const Vec s = mixture_score(mix, t, x);
    const Vec sde = backward_sde_drift(mix, t, x);
    const Vec ode = backward_ode_rhs(mix, t, x);
    for (std::size_t r = 0; r < 2; ++r) EXPECT_NEAR(ode[r], sde[r] - 0.5 * s[r], 1e-12 * (1.0 + std::abs(sde[r])));
  }
}

TEST(BackwardDrift, DriftFieldMatchesDirectFormulas) {
  const auto mix = two_component();
  const auto fs = mixture_drift_field(mix, BackwardKind::sde);
  const auto fo = mixture_drift_field(mix, BackwardKind::ode);
  const Vec x = {0.2, -0.9};
  EXPECT_EQ(fs(1.1, x), backward_sde_drift(mix, 1.1, x));
  const Vec a = fo(1.1, x), b = backward_ode_rhs(mix, 1.1, x);
  for (std::size_t r = 0; r < 2; ++r) EXPECT_NEAR(a[r], b[r], 1e-14);
}

TEST(BackwardDrift, OdeTrajectoryOfStandardNormalIsConstant) {
  DiffusionProblemOptions o;
  o.kind = BackwardKind::ode;
  const auto pb = make_diffusion_problem(GaussianMixture::standard_normal(2), o);
  const NoiseDriver driver{5, 2};
  const auto tr = em_solve_field(pb, *pb.ladder.truth(), -1, 0.0, 200, pb.initial_state(driver, 3),
                                 pb.noise(driver, 3, 200), false);
  const Vec y0 = pb.initial_state(driver, 3);
  EXPECT_LT(squared_distance(tr.final_state(), y0), 1e-24);
}

TEST(BackwardDrift, SdeMarginalOfStandardNormalStaysStandard) {
  const auto pb = make_diffusion_problem(GaussianMixture::standard_normal(2));
  const NoiseDriver driver{9, 2};
  const int N = 4000, n = 200;
  double s = 0.0, s2 = 0.0;
  for (int b = 0; b < N; ++b) {
    const auto tr = em_solve_field(pb, *pb.ladder.truth(), -1, 0.0, n, pb.initial_state(driver, b),
                                   pb.noise(driver, b, n), false);
    for (double v : tr.final_state()) {
      s += v;
      s2 += v * v;
    }
  }
  const double m = s / (2.0 * N), var = s2 / (2.0 * N) - m * m;
  EXPECT_NEAR(m, 0.0, 4.0 / std::sqrt(2.0 * N));
  // EM of dx = -x/2 dt + dW keeps the variance at 1 up to O(eta).
  EXPECT_NEAR(var, 1.0, 4.0 * std::sqrt(2.0 / (2.0 * N)) + 0.01);
}

TEST(DiscreteSchedule, Products) {
  const auto s = DiscreteSchedule::uniform(5, 0.1);
  EXPECT_NEAR(s.abar(2), 0.81, 1e-15);
  EXPECT_EQ(s.abar(0), 1.0);
  EXPECT_EQ(s.sigma(0), 0.0);
  for (int m = 1; m <= 5; ++m) {
    EXPECT_LT(s.abar(m), s.abar(m - 1));
    EXPECT_GT(s.sigma(m), s.sigma(m - 1));
    EXPECT_NEAR(s.abar(m), s.alpha(m) * s.abar(m - 1), 1e-15);
  }
  EXPECT_NEAR(s.accumulated_time(3), 0.3, 1e-15);
  EXPECT_THROW(s.beta(0), std::out_of_range);
  EXPECT_THROW(s.abar(6), std::out_of_range);
  EXPECT_THROW(DiscreteSchedule(Vec{0.1, 1.0}), std::invalid_argument);
}

TEST(DiscreteSteps, ZeroEpsilonAndNoise) {
  const DiscreteSchedule s(Vec{0.02, 0.05, 0.1});
  const EpsFn zero_eps = [](const Vec& y, int) { return Vec(y.size(), 0.0); };
  const Vec y = {0.7, -1.1}, z0 = {0.0, 0.0};
  for (int m = 1; m <= 3; ++m) {
    const Vec p = ddpm_backward_step(y, m, s, zero_eps, z0);
    const Vec d = ddim_backward_step(y, m, s, zero_eps);
    for (std::size_t r = 0; r < 2; ++r) {
      EXPECT_NEAR(p[r], y[r] / std::sqrt(s.alpha(m)), 1e-15);
      EXPECT_NEAR(d[r], std::sqrt(s.abar(m - 1) / s.abar(m)) * y[r], 1e-14);
    }
  }
  EXPECT_THROW(ddpm_backward_step(y, 0, s, zero_eps, z0), std::out_of_range);
  EXPECT_THROW(ddim_backward_step(y, 4, s, zero_eps), std::out_of_range);
}

TEST(DiscreteSteps, EpsilonIsScaledScore) {
  const auto mix = two_component();
  const auto s = DiscreteSchedule::uniform(10, 0.05);
  const auto eps = mixture_eps(mix, s);
  const Vec y = {0.3, 0.1};
  const Vec e = eps(y, 4);
  const Vec sc = mixture_score(mix, -std::log(s.abar(4)), y);
  for (std::size_t r = 0; r < 2; ++r) EXPECT_NEAR(e[r], -s.sigma(4) * sc[r], 1e-12);
}

TEST(DiscreteSteps, ForwardMarginalMoments) {
  const auto s = DiscreteSchedule::uniform(8, 0.07);
  const Vec y0 = {1.5, -0.5};
  std::mt19937_64 rng(8);
  std::normal_distribution<double> normal;
  const int N = 20000;
  Vec sum(2, 0.0), sum2(2, 0.0);
  for (int n = 0; n < N; ++n) {
    Vec y = y0;
    for (int m = 1; m <= 8; ++m) y = ddpm_forward_step(y, m, s, Vec{normal(rng), normal(rng)});
    for (std::size_t r = 0; r < 2; ++r) {
      sum[r] += y[r];
      sum2[r] += y[r] * y[r];
    }
  }
  const double var = 1.0 - s.abar(8);
  for (std::size_t r = 0; r < 2; ++r) {
    const double mean = sum[r] / N;
    EXPECT_NEAR(mean, std::sqrt(s.abar(8)) * y0[r], 4.0 * std::sqrt(var / N));
    EXPECT_NEAR(sum2[r] / N - mean * mean, var, 4.0 * var * std::sqrt(2.0 / N));
  }
}

TEST(GapCheck, DdimClosedFormWithZeroEpsilon) {
  // With eps = 0 the Euler step of 1/2 x + 1/2 s is y (1 + beta / 2).
  const EpsFn zero_eps = [](const Vec& y, int) { return Vec(y.size(), 0.0); };
  for (double beta : {0.1, 0.02, 0.004}) {
    const auto s = DiscreteSchedule::uniform(3, beta);
    const Vec y = {0.9, -2.0};
    const Vec d = ddim_backward_step(y, 3, s, zero_eps);
    for (std::size_t r = 0; r < 2; ++r) {
      const double gap = std::abs(d[r] - y[r] * (1.0 + beta / 2.0));
      EXPECT_NEAR(gap, std::abs(y[r] * (1.0 / std::sqrt(1.0 - beta) - 1.0 - beta / 2.0)), 1e-15);
    }
  }
}

TEST(GapCheck, SecondOrderPerStep) {
  const auto mix = two_component();
  const auto rep = discretization_gap_check(mix, {0.02, 0.01, 0.005}, {0.5, 1.0, 2.0}, 200, 4);
  ASSERT_EQ(rep.ddim_ratio.size(), 2u);
  for (double r : rep.ddpm_drift_ratio) EXPECT_TRUE(r >= 3.0 && r <= 5.0) << r;
  for (double r : rep.ddim_ratio) EXPECT_TRUE(r >= 3.0 && r <= 5.0) << r;
}

TEST(GapCheck, GapVanishesWithBeta) {
  const auto mix = two_component();
  const auto rep = discretization_gap_check(mix, {0.04, 0.004, 0.0004}, {1.0}, 50, 2);
  for (std::size_t i = 1; i < rep.rows.size(); ++i) {
    EXPECT_LT(rep.rows[i].ddpm_drift_gap, rep.rows[i - 1].ddpm_drift_gap);
    EXPECT_LT(rep.rows[i].ddim_gap, rep.rows[i - 1].ddim_gap);
    EXPECT_LT(rep.rows[i].ddpm_full_gap, rep.rows[i - 1].ddpm_full_gap);
  }
  EXPECT_LT(rep.rows.back().ddim_gap, 1e-5);
}

TEST(MixtureFile, ParseAndValidate) {
  const auto mix = parse_mixture("# w mu var\n0.25 1 2 0.5\n0.75 -1 0 1.5  # trailing\n");
  EXPECT_EQ(mix.size(), 2u);
  EXPECT_EQ(mix.dim(), 2u);
  EXPECT_EQ(mix.means[1], (Vec{-1.0, 0.0}));
  EXPECT_EQ(mix.variances[0], 0.5);
  EXPECT_THROW(parse_mixture("0.5 1 2 0.5\n0.4 0 0 1\n"), std::invalid_argument);
  EXPECT_THROW(parse_mixture("1.0 1 2 -0.5\n"), std::invalid_argument);
  EXPECT_THROW(parse_mixture("0.5 1 2 0.5\n0.5 0 1\n"), std::invalid_argument);
}

TEST(MixtureFile, ShippedMixturesLoad) {
  for (const char* name : {"mixture3.txt", "mixture3_broad.txt"}) {
    const auto mix = load_mixture(std::string(MLEM_CONFIG_DIR) + "/" + name);
    EXPECT_EQ(mix.size(), 3u);
    EXPECT_EQ(mix.dim(), 2u);
  }
}

TEST(DiffusionProblem, LadderInvariantsHold) {
  DiffusionProblemOptions o;
  o.k_max = 4;
  const auto mix = two_component();
  const auto pb = make_diffusion_problem(mix, o);
  EXPECT_EQ(pb.direction, Direction::backward);
  EXPECT_DOUBLE_EQ(pb.time_at(0, 10), 3.0);
  EXPECT_NEAR(pb.time_at(10, 10), 0.01, 1e-12);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> ut(0.01, 3.0), ux(-3.0, 3.0);
  for (int k = 0; k <= 4; ++k) {
    double worst = 0.0;
    for (int n = 0; n < 300; ++n) {
      const double t = ut(rng);
      const Vec x = {ux(rng), ux(rng)};
      worst = std::max(worst, std::sqrt(squared_distance(pb.ladder.level(k)(t, x), backward_sde_drift(mix, t, x))));
    }
    EXPECT_LE(worst, std::ldexp(1.0, -k) * (1.0 + 1e-12));
  }
  DiffusionProblemOptions degenerate;
  degenerate.T = 0.01;
  degenerate.t_min = 0.01;
  EXPECT_THROW(make_diffusion_problem(mix, degenerate), std::invalid_argument);
}
