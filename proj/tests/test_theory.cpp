#include <gtest/gtest.h>

#include <boost/multiprecision/cpp_dec_float.hpp>
#include <cmath>

#include "mlem/mlem_solver.hpp"
#include "mlem/random.hpp"
#include "mlem/theory.hpp"

using namespace mlem;
using HP = boost::multiprecision::cpp_dec_float_50;

namespace {
// Independent 50-digit evaluation of the three-case scaling function.
double e_gamma_hp(double gamma_d, double r_d) {
  const HP gamma(gamma_d), r(r_d), two(2);
  const HP h = boost::multiprecision::pow(two, gamma / 2 - 1);
  if (gamma_d == 2.0) return static_cast<double>(r * r * (3 + boost::multiprecision::log(r) / boost::multiprecision::log(two)));
  if (gamma_d < 2.0) return static_cast<double>(r * r / ((1 - h) * (1 - h)));
  return static_cast<double>(boost::multiprecision::pow(two, 3 * (gamma - 2)) / ((h - 1) * (h - 1)) *
                             boost::multiprecision::pow(r, gamma));
}
}  // namespace

TEST(EGamma, FrozenValues) {
  EXPECT_DOUBLE_EQ(e_gamma(2.0, 1.0), 3.0);
  EXPECT_NEAR(e_gamma(3.0, 2.0), 373.0193359837562, 1e-9);  // 64 / (3 - 2 sqrt 2)
  EXPECT_NEAR(e_gamma(1.0, 1.0), 11.65685424949238, 1e-11);  // 1 / (1 - 2^{-1/2})^2
}

TEST(EGamma, MatchesHighPrecisionAtRandomPoints) {
  SplitMix rng(2024);
  for (int i = 0; i < 100; ++i) {
    double gamma = 0.2 + 4.8 * rng.uniform();
    if (i % 10 == 0) gamma = 2.0;
    const double r = std::exp(6.0 * rng.uniform() - 1.0);
    const double ref = e_gamma_hp(gamma, r);
    EXPECT_LE(std::abs(e_gamma(gamma, r) - ref), 1e-12 * std::abs(ref)) << "gamma=" << gamma << " r=" << r;
  }
}

TEST(EGamma, RejectsNonPositive) {
  EXPECT_THROW(e_gamma(0.0, 1.0), std::invalid_argument);
  EXPECT_THROW(e_gamma(1.0, -1.0), std::invalid_argument);
}

TEST(GeometricSum, BoundExamples) {
  EXPECT_DOUBLE_EQ(geometric_sum_bound(2.0, 0, 4), 5.0);
  EXPECT_DOUBLE_EQ(geometric_sum(2.0, 0, 4), 5.0);
  EXPECT_DOUBLE_EQ(geometric_sum(4.0, 0, 3), 15.0);
  EXPECT_DOUBLE_EQ(geometric_sum_bound(4.0, 0, 3), 16.0);
}

TEST(GeometricSum, SubcriticalBoundIgnoresKmax) {
  const double b = geometric_sum_bound(1.0, 0, 1);
  for (int km = 0; km < 60; ++km) {
    EXPECT_DOUBLE_EQ(geometric_sum_bound(1.0, 0, km), b);
    EXPECT_GE(b, geometric_sum(1.0, 0, km));
  }
}

TEST(GeometricSum, BoundDominatesDirectSumOnGrid) {
  for (double gamma = 0.25; gamma <= 6.0; gamma += 0.25)
    for (int k_min = -3; k_min <= 4; ++k_min)
      for (int k_max = k_min; k_max <= k_min + 15; ++k_max) {
        double direct = 0.0;
        for (int k = k_min; k <= k_max; ++k) direct += std::pow(2.0, (gamma / 2.0 - 1.0) * k);
        EXPECT_GE(geometric_sum_bound(gamma, k_min, k_max) * (1 + 1e-14), direct)
            << gamma << " " << k_min << " " << k_max;
      }
}

TEST(RecursionBound, DeterministicMethodHasNoError) {
  const std::vector<LevelProbability> lp = {{0, 1.0}, {1, 1.0}, {2, 1.0}};
  const auto rb = error_recursion_bounds(2.0, 0.01, 50, std::nullopt, lp, VarianceFactor::bernoulli_exact);
  for (std::size_t i = 0; i < rb.b.size(); ++i) {
    EXPECT_EQ(rb.b[i], 0.0);
    EXPECT_EQ(rb.v2[i], 0.0);
  }
}

TEST(RecursionBound, OneStepVariance) {
  const std::vector<LevelProbability> lp = {{0, 0.5}, {1, 0.25}, {3, 0.1}};
  const double eta = 0.02;
  const auto rb = error_recursion_bounds(1.5, eta, 1, 3, lp);
  const double expect = 9 * eta * eta * (1.0 / 0.5 + 0.25 / 0.25 + std::pow(2.0, -6) / 0.1);
  EXPECT_NEAR(rb.v2[1], expect, 1e-15);
  EXPECT_NEAR(rb.b[1], eta * 0.125, 1e-15);
}

TEST(RecursionBound, MonotoneGrowth) {
  const std::vector<LevelProbability> lp = {{0, 0.5}, {1, 0.25}};
  const auto rb = error_recursion_bounds(1.0, 0.01, 100, 1, lp);
  for (std::size_t i = 1; i < rb.v2.size(); ++i) {
    EXPECT_GT(rb.v2[i], rb.v2[i - 1]);
    EXPECT_GT(rb.b[i], rb.b[i - 1]);
  }
}

TEST(CostBound, DecreasingInEpsilon) {
  double prev = std::numeric_limits<double>::infinity();
  for (double eps = 0.001; eps < 1.0; eps *= 1.5) {
    const double b = predicted_cost_bound(eps, 1.0, 1.0, 0.01, 1.0, 3.0);
    EXPECT_LT(b, prev);
    prev = b;
  }
}

TEST(CostBound, ScalingInEpsilon) {
  for (double gamma : {2.5, 3.0, 4.0}) {
    const auto a = cost_bounds(0.02, 1.3, 1.0, 0.01, 0.7, gamma);
    const auto b = cost_bounds(0.01, 1.3, 1.0, 0.01, 0.7, gamma);
    EXPECT_NEAR(b.proof / a.proof, std::pow(2.0, gamma), 1e-9 * std::pow(2.0, gamma));
    EXPECT_NEAR(b.statement / a.statement, std::pow(2.0, gamma), 1e-9 * std::pow(2.0, gamma));
  }
  for (double gamma : {0.5, 1.0, 1.5}) {
    const auto a = cost_bounds(0.02, 1.3, 1.0, 0.01, 0.7, gamma);
    const auto b = cost_bounds(0.01, 1.3, 1.0, 0.01, 0.7, gamma);
    EXPECT_NEAR(b.proof / a.proof, 4.0, 1e-12);
    EXPECT_NEAR(b.statement / a.statement, 4.0, 1e-12);
  }
}

TEST(CostBound, FormsAgreeAtUnitPrefactor) {
  const auto b = cost_bounds(0.05, 1.0, 1.0, 0.01, 1.0, 3.0);
  EXPECT_NEAR(b.proof, b.statement, 1e-9 * b.proof);
  const auto d = cost_bounds(0.05, 1.0, 1.0, 0.01, 2.0, 3.0);
  EXPECT_NE(d.proof, d.statement);
}

TEST(TheoremParameters, FrozenExamples) {
  EXPECT_EQ(k_min_from_c(0.25), 2);
  EXPECT_EQ(k_min_from_c(1.0), 0);
  // -floor(log2(2 e^{1.01} 0.01)), evaluated at 50 digits
  const HP arg = HP(2) * boost::multiprecision::exp(HP("1.01")) * HP("0.01");
  const int ref = -static_cast<int>(boost::multiprecision::floor(boost::multiprecision::log(arg) /
                                                                 boost::multiprecision::log(HP(2)))
                                        .convert_to<int>());
  EXPECT_EQ(ref, 5);
  EXPECT_EQ(k_max_statement(0.01, 1.0, 1.0, 0.01), ref);
  EXPECT_DOUBLE_EQ(LevelSchedule::theorem(4.0, 2.0).prob(1, 0.0), 1.0);
}

TEST(TheoremParameters, ConstantAndSchedule) {
  const auto tp = theorem_parameters(0.05, 1.5, 1.0, 0.01, 1.0, 3.0, KmaxRule::proof);
  EXPECT_EQ(tp.k_min, 0);
  EXPECT_EQ(tp.k_max, tp.k_max_proof);
  EXPECT_GE(tp.k_max_proof, tp.k_max_statement);
  const double S = geometric_sum(3.0, tp.k_min, tp.k_max);
  const double C = 18 * 0.01 * (1.5 + 1.0 / 3.0) * std::exp(2 * 1.5 * 1.01) * S / 0.0025;
  EXPECT_NEAR(tp.C, C, 1e-9 * C);
  for (const auto& lp : tp.p) EXPECT_DOUBLE_EQ(lp.p, std::min(C * std::pow(2.0, -2.5 * lp.k), 1.0));
  EXPECT_EQ(tp.levels().size(), static_cast<std::size_t>(tp.k_max - tp.k_min + 1));
  EXPECT_DOUBLE_EQ(tp.predicted_cost_bound, tp.bounds.proof);
}

TEST(TheoremParameters, TooLooseToleranceThrows) {
  EXPECT_THROW(theorem_parameters(1e6, 1.0, 1.0, 0.01, 1.0, 3.0), std::domain_error);
}
