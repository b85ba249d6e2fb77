#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "mlem/random.hpp"
#include "mlem/sde_core.hpp"

namespace mlem {

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p) - std::log1p(-p); }

/// Coefficients of the learned schedule p_k(t) = sigmoid(alpha_k log(t + delta) + beta_k).
struct AdaptiveParams {
  std::vector<int> levels;  // ascending ladder levels, one (alpha, beta) pair each
  Vec alpha;
  Vec beta;
  double delta = 0.1;

  AdaptiveParams() = default;
  AdaptiveParams(std::vector<int> lv, Vec a, Vec b, double d = 0.1)
      : levels(std::move(lv)), alpha(std::move(a)), beta(std::move(b)), delta(d) {
    validate();
  }

  static AdaptiveParams constant(std::vector<int> lv, double beta0, double delta = 0.1) {
    const std::size_t n = lv.size();
    return AdaptiveParams(std::move(lv), Vec(n, 0.0), Vec(n, beta0), delta);
  }

  void validate() const {
    if (!(delta > 0.0)) throw std::invalid_argument("AdaptiveParams: delta must be positive");
    if (alpha.size() != levels.size() || beta.size() != levels.size())
      throw std::invalid_argument("AdaptiveParams: alpha/beta size must match the level count");
    if (!std::is_sorted(levels.begin(), levels.end()) ||
        std::adjacent_find(levels.begin(), levels.end()) != levels.end())
      throw std::invalid_argument("AdaptiveParams: levels must be strictly increasing");
  }

  std::size_t size() const { return levels.size(); }

  int index_of(int k) const {
    auto it = std::lower_bound(levels.begin(), levels.end(), k);
    if (it == levels.end() || *it != k)
      throw std::out_of_range("AdaptiveParams: level " + std::to_string(k) + " not parameterised");
    return static_cast<int>(it - levels.begin());
  }

  double logit_at(int j, double t) const { return alpha[j] * std::log(t + delta) + beta[j]; }
};

inline double prob_at(const AdaptiveParams& params, int k, double t) {
  if (t < 0.0) throw std::invalid_argument("prob_at: negative time");
  return sigmoid(params.logit_at(params.index_of(k), t));
}

enum class ScheduleKind { theorem, inverse_cost, power_law, learned, constant };

inline std::string to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::theorem: return "theorem";
    case ScheduleKind::inverse_cost: return "inverse_cost";
    case ScheduleKind::power_law: return "power_law";
    case ScheduleKind::learned: return "learned";
    case ScheduleKind::constant: return "constant";
  }
  return "unknown";
}

/// Rule (k, t) -> p_k(t) in [0, 1].
///  - theorem:      min(C 2^{-(1 + gamma/2) k}, 1)
///  - power_law:    min(C 2^{-beta k}, 1)
///  - inverse_cost: min(C T_k^{-exponent}, 1), T_k = c^gamma 2^{gamma k}
///  - learned:      sigmoid(alpha_k log(t + delta) + beta_k)
///  - constant:     p
class LevelSchedule {
 public:
  static LevelSchedule theorem(double C, double gamma) {
    LevelSchedule s(ScheduleKind::theorem, C);
    s.rate_ = 1.0 + gamma / 2.0;
    s.gamma_ = gamma;
    return s;
  }
  static LevelSchedule power_law(double C, double beta) {
    LevelSchedule s(ScheduleKind::power_law, C);
    s.rate_ = beta;
    return s;
  }
  static LevelSchedule inverse_cost(double C, double cost_prefactor, double gamma, double exponent = 1.0) {
    LevelSchedule s(ScheduleKind::inverse_cost, C);
    s.gamma_ = gamma;
    s.exponent_ = exponent;
    s.cost_prefactor_ = cost_prefactor;
    s.rate_ = gamma * exponent;
    return s;
  }
  static LevelSchedule inverse_cost(double C, const DriftLadder& ladder, double exponent = 1.0) {
    return inverse_cost(C, std::pow(ladder.c(), ladder.gamma()), ladder.gamma(), exponent);
  }
  static LevelSchedule learned(AdaptiveParams params) {
    params.validate();
    LevelSchedule s(ScheduleKind::learned, 1.0);
    s.params_ = std::move(params);
    return s;
  }
  static LevelSchedule constant(double p) {
    if (p < 0.0 || p > 1.0) throw std::invalid_argument("LevelSchedule: constant probability outside [0, 1]");
    return LevelSchedule(ScheduleKind::constant, p);
  }

  ScheduleKind kind() const { return kind_; }
  std::string name() const { return to_string(kind_); }
  bool time_dependent() const { return kind_ == ScheduleKind::learned; }

  /// The tunable constant C (or p for constant schedules).
  double constant_c() const { return C_; }

  /// Same rule with a different constant; learned schedules shift every beta_k
  /// by log(C) instead.
  LevelSchedule with_constant(double C) const {
    LevelSchedule s = *this;
    if (kind_ == ScheduleKind::learned) {
      for (double& b : s.params_.beta) b += std::log(C);
    } else {
      s.C_ = C;
    }
    return s;
  }

  const AdaptiveParams& params() const {
    if (kind_ != ScheduleKind::learned) throw std::logic_error("LevelSchedule: not a learned schedule");
    return params_;
  }

  double prob(int k, double t) const {
    switch (kind_) {
      case ScheduleKind::learned: return k < params_.levels.front() ? 1.0 : prob_at(params_, k, t);
      case ScheduleKind::constant: return C_;
      case ScheduleKind::inverse_cost:
        return std::min(C_ * std::pow(cost_prefactor_, -exponent_) * std::exp2(-rate_ * k), 1.0);
      default: return std::min(C_ * std::exp2(-rate_ * k), 1.0);
    }
  }

 private:
  LevelSchedule(ScheduleKind kind, double C) : kind_(kind), C_(C) {
    if (C < 0.0) throw std::invalid_argument("LevelSchedule: negative constant");
  }

  ScheduleKind kind_;
  double C_ = 1.0;
  double rate_ = 0.0;
  double gamma_ = 0.0;
  double exponent_ = 1.0;
  double cost_prefactor_ = 1.0;
  AdaptiveParams params_;
};

/// Materialised Bernoulli draws B^k(step) for one ML-EM run. Draw (i, k) is
/// `U(plan_seed, i, k) < p_k(t_i)`, so plans with the same seed are coupled
/// monotonically across schedules.
struct BernoulliPlan {
  std::uint64_t plan_seed = 0;
  int n_steps = 0;
  std::vector<int> levels;
  std::vector<std::uint8_t> draws;  // n_steps x levels.size()
  Vec probs;                        // n_steps x levels.size()

  std::size_t width() const { return levels.size(); }
  bool draw(int step, std::size_t j) const { return draws[static_cast<std::size_t>(step) * width() + j] != 0; }
  double prob(int step, std::size_t j) const { return probs[static_cast<std::size_t>(step) * width() + j]; }
  std::span<const std::uint8_t> draws_at(int step) const {
    return std::span<const std::uint8_t>(draws).subspan(static_cast<std::size_t>(step) * width(), width());
  }
  std::span<const double> probs_at(int step) const {
    return std::span<const double>(probs).subspan(static_cast<std::size_t>(step) * width(), width());
  }
};

inline double plan_uniform(std::uint64_t plan_seed, int step, int level) {
  return keyed_uniform(plan_seed, Domain::bernoulli, static_cast<std::uint64_t>(step),
                       static_cast<std::uint64_t>(static_cast<std::int64_t>(level) + (1LL << 32)));
}

template <class TimeFn>
BernoulliPlan make_plan(const LevelSchedule& schedule, const std::vector<int>& levels, int n_steps, TimeFn time_at,
                        std::uint64_t plan_seed) {
  if (n_steps < 1) throw std::invalid_argument("make_plan: n_steps must be >= 1");
  BernoulliPlan plan;
  plan.plan_seed = plan_seed;
  plan.n_steps = n_steps;
  plan.levels = levels;
  const std::size_t w = levels.size();
  plan.draws.resize(static_cast<std::size_t>(n_steps) * w);
  plan.probs.resize(static_cast<std::size_t>(n_steps) * w);
  for (int i = 0; i < n_steps; ++i) {
    const double t = time_at(i);
    for (std::size_t j = 0; j < w; ++j) {
      const double p = schedule.prob(levels[j], t);
      const std::size_t idx = static_cast<std::size_t>(i) * w + j;
      plan.probs[idx] = p;
      plan.draws[idx] = plan_uniform(plan_seed, i, levels[j]) < p ? 1 : 0;
    }
  }
  return plan;
}

inline BernoulliPlan make_plan(const LevelSchedule& schedule, const std::vector<int>& levels,
                               const SdeProblem& problem, int n_steps, std::uint64_t plan_seed) {
  return make_plan(schedule, levels, n_steps, [&](int i) { return problem.time_at(i, n_steps); }, plan_seed);
}

/// Seed of the j-th derived plan (trial or batch member) under a base seed.
inline std::uint64_t derived_plan_seed(std::uint64_t base, std::uint64_t j) {
  return hash_key(base, static_cast<std::uint64_t>(Domain::generic), j);
}

}  // namespace mlem
