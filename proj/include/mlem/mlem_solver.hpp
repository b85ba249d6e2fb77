#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mlem/em_solver.hpp"
#include "mlem/schedule.hpp"
#include "mlem/sde_core.hpp"
#include "mlem/theory.hpp"

namespace mlem {

/// drawn: only f^k with B^k = 1 is charged. full: every evaluation is charged,
/// including the companion f^{k-1} of an active difference.
enum class CostAccounting { drawn, full };

inline std::vector<int> full_levels(const DriftLadder& ladder) {
  std::vector<int> lv;
  for (int k = ladder.k_min(); k <= ladder.k_max(); ++k) lv.push_back(k);
  return lv;
}

inline void validate_levels(const DriftLadder& ladder, const std::vector<int>& levels) {
  if (levels.empty()) throw std::invalid_argument("mlem: empty level set");
  for (std::size_t j = 0; j < levels.size(); ++j) {
    if (levels[j] < ladder.k_min() || levels[j] > ladder.k_max())
      throw std::out_of_range("mlem: level " + std::to_string(levels[j]) + " outside the ladder");
    if (j > 0 && levels[j] <= levels[j - 1]) throw std::invalid_argument("mlem: levels must be strictly increasing");
  }
}

/// ML-EM step over an ascending subset of ladder levels l_0 < ... < l_{m-1}:
///   y + eta sum_j (B_j / p_j)(f^{l_j} - f^{l_{j-1}})(y) + sqrt(eta) sigma z,
/// with f^{l_{-1}} = 0. The drift is assembled as sum_j w_j f^{l_j} with
/// w_j = B_j/p_j - B_{j+1}/p_{j+1}, so each field is evaluated at most once.
class MlemStepper {
 public:
  MlemStepper(const DriftLadder& ladder, std::vector<int> levels) : ladder_(&ladder), levels_(std::move(levels)) {
    validate_levels(ladder, levels_);
    const std::size_t d = ladder.dim();
    fields_.resize(levels_.size(), Vec(d));
    weights_.resize(levels_.size());
    needed_.resize(levels_.size());
    drift_.resize(d);
  }

  const std::vector<int>& levels() const { return levels_; }

  /// Writes the next state into `out`. Each ladder evaluation is appended to
  /// `ledger` (when given) with `step` as its index.
  void step(int step, double t, std::span<const double> y, double eta, double noise_scale,
            std::span<const std::uint8_t> draws, std::span<const double> probs, std::span<const double> z,
            std::span<double> out, CostLedger* ledger) {
    const std::size_t m = levels_.size();
    if (draws.size() != m || probs.size() != m) throw std::invalid_argument("mlem_step: plan width mismatch");
    double upper = 0.0;  // B_{j+1} / p_{j+1}
    for (std::size_t jj = m; jj-- > 0;) {
      double own = 0.0;
      if (draws[jj]) {
        if (!(probs[jj] > 0.0)) throw std::invalid_argument("mlem_step: B = 1 drawn with p = 0");
        own = 1.0 / probs[jj];
      }
      weights_[jj] = own - upper;
      const bool needed = draws[jj] || upper != 0.0;
      if (needed) {
        ladder_->level(levels_[jj]).eval(t, y, fields_[jj]);
        if (ledger) ledger->record(step, levels_[jj], ladder_->cost_units(levels_[jj]), !draws[jj]);
      }
      needed_[jj] = needed ? 1 : 0;
      upper = own;
    }
    std::fill(drift_.begin(), drift_.end(), 0.0);
    bool first = true;
    for (std::size_t j = 0; j < m; ++j) {
      if (!needed_[j] || weights_[j] == 0.0) continue;
      const Vec& f = fields_[j];
      const double w = weights_[j];
      if (first && w == 1.0) {
        std::copy(f.begin(), f.end(), drift_.begin());
      } else {
        for (std::size_t i = 0; i < drift_.size(); ++i) drift_[i] += w * f[i];
      }
      first = false;
    }
    detail::apply_step(y, eta, drift_, noise_scale, z, out);
  }

 private:
  const DriftLadder* ladder_;
  std::vector<int> levels_;
  std::vector<Vec> fields_;
  Vec weights_;
  Vec drift_;
  std::vector<std::uint8_t> needed_;
};

struct MlemStepResult {
  Vec y;
  std::vector<int> levels_evaluated;
};

/// Single ML-EM step over the full ladder with explicit draws (one per level k_min..k_max).
inline MlemStepResult mlem_step(const Vec& y, double t, double eta, const DriftLadder& ladder,
                                const LevelSchedule& schedule, const std::vector<std::uint8_t>& bernoullis,
                                const NoiseSchedule& sigma, const Vec& z) {
  if (!(eta > 0.0)) throw std::invalid_argument("mlem_step: eta must be positive");
  if (y.size() != ladder.dim() || z.size() != y.size()) throw std::invalid_argument("mlem_step: dimension mismatch");
  const std::vector<int> levels = full_levels(ladder);
  if (bernoullis.size() != levels.size())
    throw std::invalid_argument("mlem_step: one Bernoulli per ladder level required");
  Vec probs(levels.size());
  for (std::size_t j = 0; j < levels.size(); ++j) probs[j] = schedule.prob(levels[j], t);
  MlemStepper stepper(ladder, levels);
  CostLedger ledger;
  MlemStepResult r;
  r.y.resize(y.size());
  stepper.step(0, t, y, eta, std::sqrt(eta) * sigma(t), bernoullis, probs, z, r.y, &ledger);
  for (const auto& rec : ledger.records()) r.levels_evaluated.push_back(rec.level);
  return r;
}

/// Integrates with a materialised plan on the given noise source.
template <NoiseSource Noise>
Trajectory mlem_solve_plan(const SdeProblem& problem, const BernoulliPlan& plan, const Vec& y0, const Noise& noise,
                           bool keep_path = true, bool keep_records = true) {
  const int n_steps = plan.n_steps;
  if (n_steps < 1) throw std::invalid_argument("mlem_solve: n_steps must be >= 1");
  if (y0.size() != problem.dim()) throw std::invalid_argument("mlem_solve: initial state has wrong dimension");
  MlemStepper stepper(problem.ladder, plan.levels);
  const double eta = problem.eta(n_steps);
  const double sq_eta = std::sqrt(eta);
  const std::size_t d = y0.size();

  Trajectory traj;
  traj.ledger = CostLedger(keep_records);
  if (keep_path) {
    traj.times.reserve(static_cast<std::size_t>(n_steps) + 1);
    traj.states.reserve(static_cast<std::size_t>(n_steps) + 1);
    traj.times.push_back(problem.time_at(0, n_steps));
    traj.states.push_back(y0);
  }
  Vec y = y0, next(d), z(d);
  for (int i = 0; i < n_steps; ++i) {
    const double t = problem.time_at(i, n_steps);
    noise(i, z);
    stepper.step(i, t, y, eta, sq_eta * problem.sigma(t), plan.draws_at(i), plan.probs_at(i), z, next,
                 &traj.ledger);
    std::swap(y, next);
    if (keep_path) {
      traj.times.push_back(problem.time_at(i + 1, n_steps));
      traj.states.push_back(y);
    }
  }
  if (!keep_path) {
    traj.times = {problem.time_at(n_steps, n_steps)};
    traj.states = {y};
  }
  return traj;
}

struct MlemOptions {
  std::vector<int> levels;  // empty: the whole ladder
  bool keep_path = true;
  bool keep_records = true;
};

inline std::vector<int> resolve_levels(const DriftLadder& ladder, const MlemOptions& opts) {
  std::vector<int> lv = opts.levels.empty() ? full_levels(ladder) : opts.levels;
  validate_levels(ladder, lv);
  return lv;
}

/// ML-EM on noise stream `noise_stream` with Bernoulli plan `plan_seed`.
inline Trajectory mlem_solve(const SdeProblem& problem, const LevelSchedule& schedule, int n_steps,
                             const NoiseDriver& driver, std::uint64_t noise_stream, std::uint64_t plan_seed,
                             const MlemOptions& opts = {}) {
  if (n_steps < 1) throw std::invalid_argument("mlem_solve: n_steps must be >= 1");
  const auto plan = make_plan(schedule, resolve_levels(problem.ladder, opts), problem, n_steps, plan_seed);
  return mlem_solve_plan(problem, plan, problem.initial_state(driver, noise_stream),
                         problem.noise(driver, noise_stream, n_steps), opts.keep_path, opts.keep_records);
}

/// Batch of ML-EM runs, one per noise stream. With `shared_across_batch` one
/// plan drives every member; otherwise member b uses derived_plan_seed(plan_seed, b).
inline std::vector<Trajectory> mlem_solve_batch(const SdeProblem& problem, const LevelSchedule& schedule,
                                                int n_steps, const NoiseDriver& driver,
                                                const std::vector<std::uint64_t>& noise_streams,
                                                std::uint64_t plan_seed, bool shared_across_batch,
                                                const MlemOptions& opts = {}) {
  if (n_steps < 1) throw std::invalid_argument("mlem_solve: n_steps must be >= 1");
  const auto levels = resolve_levels(problem.ladder, opts);
  std::optional<BernoulliPlan> shared;
  if (shared_across_batch) shared = make_plan(schedule, levels, problem, n_steps, plan_seed);
  std::vector<Trajectory> out;
  out.reserve(noise_streams.size());
  for (std::size_t b = 0; b < noise_streams.size(); ++b) {
    const auto s = noise_streams[b];
    if (shared) {
      out.push_back(mlem_solve_plan(problem, *shared, problem.initial_state(driver, s),
                                    problem.noise(driver, s, n_steps), opts.keep_path, opts.keep_records));
    } else {
      const auto plan = make_plan(schedule, levels, problem, n_steps, derived_plan_seed(plan_seed, b));
      out.push_back(mlem_solve_plan(problem, plan, problem.initial_state(driver, s),
                                    problem.noise(driver, s, n_steps), opts.keep_path, opts.keep_records));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Expected cost
// ---------------------------------------------------------------------------

/// Expected ledger total of one run at step i with probabilities `probs` over `levels`.
inline double expected_step_cost(const DriftLadder& ladder, const std::vector<int>& levels,
                                 std::span<const double> probs, CostAccounting mode) {
  double c = 0.0;
  for (std::size_t j = 0; j < levels.size(); ++j) {
    const double cost = ladder.cost_units(levels[j]);
    if (mode == CostAccounting::drawn) {
      c += probs[j] * cost;
    } else {
      const double up = j + 1 < levels.size() ? probs[j + 1] : 0.0;
      c += cost * (1.0 - (1.0 - probs[j]) * (1.0 - up));
    }
  }
  return c;
}

template <class TimeFn>
double expected_cost(const LevelSchedule& schedule, const DriftLadder& ladder, const std::vector<int>& levels,
                     int n_steps, TimeFn time_at, CostAccounting mode = CostAccounting::drawn) {
  if (n_steps < 1) throw std::invalid_argument("expected_cost: n_steps must be >= 1");
  validate_levels(ladder, levels);
  Vec probs(levels.size());
  double total = 0.0;
  for (int i = 0; i < n_steps; ++i) {
    const double t = time_at(i);
    for (std::size_t j = 0; j < levels.size(); ++j) probs[j] = schedule.prob(levels[j], t);
    total += expected_step_cost(ladder, levels, probs, mode);
    if (!schedule.time_dependent()) return total * n_steps;
  }
  return total;
}

/// Expected cost of a time-independent schedule over the whole ladder.
inline double expected_cost(const LevelSchedule& schedule, const DriftLadder& ladder, int n_steps,
                            CostAccounting mode = CostAccounting::drawn) {
  if (schedule.time_dependent()) throw std::invalid_argument("expected_cost: time-dependent schedule needs a problem");
  return expected_cost(schedule, ladder, full_levels(ladder), n_steps, [](int) { return 0.0; }, mode);
}

inline double expected_cost(const LevelSchedule& schedule, const SdeProblem& problem, int n_steps,
                            const std::vector<int>& levels, CostAccounting mode = CostAccounting::drawn) {
  return expected_cost(schedule, problem.ladder, levels, n_steps,
                       [&](int i) { return problem.time_at(i, n_steps); }, mode);
}

/// Finds C such that `schedule.with_constant(C)` has the requested expected
/// cost, by bisection in log C. Expected cost is nondecreasing in C.
template <class CostFn>
double match_constant(CostFn cost_of_c, double target, double lo = 1e-12, double hi = 1e12, int iters = 200) {
  if (!(target > 0.0)) throw std::invalid_argument("match_constant: target must be positive");
  if (cost_of_c(hi) < target) return hi;
  double a = std::log(lo), b = std::log(hi);
  for (int it = 0; it < iters && b - a > 1e-13; ++it) {
    const double mid = 0.5 * (a + b);
    if (cost_of_c(std::exp(mid)) < target) a = mid;
    else b = mid;
  }
  return std::exp(0.5 * (a + b));
}

// ---------------------------------------------------------------------------
// Theorem parameters
// ---------------------------------------------------------------------------

enum class KmaxRule { statement, proof };

inline int k_min_from_c(double c) {
  if (!(c > 0.0)) throw std::invalid_argument("k_min_from_c: c must be positive");
  return -static_cast<int>(std::floor(std::log2(c)));
}

/// Time-local convention -ceil(log2 ||f_t||_inf).
inline int k_min_from_sup(double sup_norm) {
  if (!(sup_norm > 0.0)) throw std::invalid_argument("k_min_from_sup: sup norm must be positive");
  return -static_cast<int>(std::ceil(std::log2(sup_norm)));
}

inline int k_max_statement(double epsilon, double L, double T, double eta) {
  return -static_cast<int>(std::floor(std::log2(2.0 / L * std::exp(L * (T + eta)) * epsilon)));
}

/// Value that makes the accumulated bias 2^{-k_max} (e^{L(T+eta)}) / L at most epsilon / 2.
inline int k_max_proof(double epsilon, double L, double T, double eta) {
  return -static_cast<int>(std::floor(std::log2(L / 2.0 * std::exp(-L * (T + eta)) * epsilon)));
}

struct TheoremParameters {
  double epsilon = 0, L = 0, T = 0, eta = 0, c = 0, gamma = 0;
  int k_min = 0;
  int k_max = 0;
  int k_max_statement = 0;
  int k_max_proof = 0;
  KmaxRule rule = KmaxRule::statement;
  double C = 0.0;
  double geometric_sum = 0.0;  // S = sum_k 2^{(gamma/2 - 1) k}
  std::vector<LevelProbability> p;
  double predicted_cost_bound = 0.0;
  CostBounds bounds;

  LevelSchedule schedule() const { return LevelSchedule::theorem(C, gamma); }
  std::vector<int> levels() const {
    std::vector<int> lv;
    for (int k = k_min; k <= k_max; ++k) lv.push_back(k);
    return lv;
  }
};

inline TheoremParameters theorem_parameters(double epsilon, double L, double T, double eta, double c, double gamma,
                                            KmaxRule rule = KmaxRule::statement) {
  if (!(epsilon > 0.0) || !(L > 0.0) || !(T > 0.0) || !(eta > 0.0) || !(c > 0.0) || !(gamma > 0.0))
    throw std::invalid_argument("theorem_parameters: all inputs must be positive");
  TheoremParameters tp;
  tp.epsilon = epsilon;
  tp.L = L;
  tp.T = T;
  tp.eta = eta;
  tp.c = c;
  tp.gamma = gamma;
  tp.rule = rule;
  tp.k_min = k_min_from_c(c);
  tp.k_max_statement = mlem::k_max_statement(epsilon, L, T, eta);
  tp.k_max_proof = mlem::k_max_proof(epsilon, L, T, eta);
  tp.k_max = rule == KmaxRule::statement ? tp.k_max_statement : tp.k_max_proof;
  if (tp.k_max < tp.k_min)
    throw std::domain_error("theorem_parameters: k_max < k_min, epsilon is too large for this c");
  tp.geometric_sum = mlem::geometric_sum(gamma, tp.k_min, tp.k_max);
  tp.C = 18.0 * eta * (L * T * T + 1.0 / (2.0 * L)) * std::exp(2.0 * L * (T + eta)) * tp.geometric_sum /
         (epsilon * epsilon);
  const auto sched = tp.schedule();
  for (int k = tp.k_min; k <= tp.k_max; ++k) tp.p.push_back({k, sched.prob(k, 0.0)});
  tp.bounds = cost_bounds(epsilon, L, T, eta, c, gamma);
  tp.predicted_cost_bound = tp.bounds.proof;
  return tp;
}

// ---------------------------------------------------------------------------
// Best of N
// ---------------------------------------------------------------------------

struct BestOfN {
  Trajectory best;
  std::size_t best_index = 0;
  std::uint64_t best_plan_seed = 0;  // persist to replay the winning plan
  Vec mse;
  std::vector<std::uint64_t> plan_seeds;
};

/// Runs `n_trials` plans on fixed noise and keeps the one closest to `reference`
/// at the final state.
inline BestOfN best_of_n(const SdeProblem& problem, const LevelSchedule& schedule, int n_steps,
                         const NoiseDriver& driver, std::uint64_t noise_stream, int n_trials,
                         const Trajectory& reference, std::uint64_t base_plan_seed = 0,
                         const MlemOptions& opts = {}) {
  if (n_trials < 1) throw std::invalid_argument("best_of_n: n_trials must be >= 1");
  if (reference.states.empty() || reference.final_state().size() != problem.dim())
    throw std::invalid_argument("best_of_n: reference has wrong shape");
  const double t_end = problem.time_at(n_steps, n_steps);
  if (std::abs(reference.times.back() - t_end) > 1e-9 * std::max(1.0, std::abs(t_end)))
    throw std::invalid_argument("best_of_n: reference ends at a different time");
  BestOfN out;
  double best = std::numeric_limits<double>::infinity();
  for (int trial = 0; trial < n_trials; ++trial) {
    const std::uint64_t seed = derived_plan_seed(base_plan_seed, static_cast<std::uint64_t>(trial));
    Trajectory tr = mlem_solve(problem, schedule, n_steps, driver, noise_stream, seed, opts);
    const double e = squared_distance(tr.final_state(), reference.final_state());
    out.mse.push_back(e);
    out.plan_seeds.push_back(seed);
    if (e < best) {
      best = e;
      out.best = std::move(tr);
      out.best_index = static_cast<std::size_t>(trial);
      out.best_plan_seed = seed;
    }
  }
  return out;
}

}  // namespace mlem
