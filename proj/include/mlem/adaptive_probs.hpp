#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mlem/config.hpp"
#include "mlem/em_solver.hpp"
#include "mlem/mlem_solver.hpp"
#include "mlem/schedule.hpp"
#include "mlem/sde_core.hpp"

namespace mlem {

/// Gradient of the regularised loss with respect to (alpha, beta), split into
/// its score-function, pathwise and regulariser parts.
struct GradEstimate {
  Vec d_alpha, d_beta;
  Vec score_alpha, score_beta;
  Vec path_alpha, path_beta;
  Vec reg_alpha, reg_beta;
  double loss = 0.0;         // mean squared final-state error
  double regularizer = 0.0;  // lambda sum_i sum_k p_k(t_i) T_k
  std::vector<Vec> samples;  // per-member flattened gradient [alpha..., beta...]

  explicit GradEstimate(std::size_t m = 0)
      : d_alpha(m), d_beta(m), score_alpha(m), score_beta(m), path_alpha(m), path_beta(m), reg_alpha(m),
        reg_beta(m) {}

  double objective() const { return loss + regularizer; }

  Vec flat() const {
    Vec g(d_alpha);
    g.insert(g.end(), d_beta.begin(), d_beta.end());
    return g;
  }

  void sum_components() {
    for (std::size_t j = 0; j < d_alpha.size(); ++j) {
      d_alpha[j] = score_alpha[j] + path_alpha[j] + reg_alpha[j];
      d_beta[j] = score_beta[j] + path_beta[j] + reg_beta[j];
    }
  }
};

/// Levels a learned schedule evaluates: fixed base levels below the first
/// parameterised level (always drawn, p = 1) followed by the parameterised ones.
inline std::vector<int> evaluated_levels(const AdaptiveParams& params, const std::vector<int>& base = {}) {
  std::vector<int> lv = base;
  for (int k : base)
    if (k >= params.levels.front())
      throw std::invalid_argument("adaptive: base level " + std::to_string(k) + " is not below the learned levels");
  if (!std::is_sorted(lv.begin(), lv.end()) || std::adjacent_find(lv.begin(), lv.end()) != lv.end())
    throw std::invalid_argument("adaptive: base levels must be strictly increasing");
  lv.insert(lv.end(), params.levels.begin(), params.levels.end());
  return lv;
}

namespace detail {
/// Number of fixed base columns in front of the parameterised ones.
inline std::size_t check_plan(const BernoulliPlan& plan, const AdaptiveParams& params) {
  const std::size_t m = params.size();
  if (plan.levels.size() < m ||
      !std::equal(params.levels.begin(), params.levels.end(), plan.levels.end() - static_cast<std::ptrdiff_t>(m)))
    throw std::invalid_argument("adaptive: plan levels do not end with the parameter levels");
  const std::size_t off = plan.levels.size() - m;
  for (int i = 0; i < plan.n_steps; ++i)
    for (std::size_t j = 0; j < off; ++j)
      if (plan.prob(i, j) != 1.0) throw std::invalid_argument("adaptive: base level drawn with p < 1");
  return off;
}
}  // namespace detail

/// Sigmoid-absorbed score-function term:
///   d_alpha_k = loss sum_i (B^k_i - p^k_i) log(t_i + delta),  d_beta_k = loss sum_i (B^k_i - p^k_i).
template <class TimeFn>
GradEstimate score_function_grad(double loss, const BernoulliPlan& plan, const AdaptiveParams& params,
                                 TimeFn time_at) {
  const std::size_t off = detail::check_plan(plan, params);
  const std::size_t m = params.size();
  GradEstimate g(m);
  g.loss = loss;
  if (loss == 0.0) return g;
  for (int i = 0; i < plan.n_steps; ++i) {
    const double lg = std::log(time_at(i) + params.delta);
    for (std::size_t j = 0; j < m; ++j) {
      const double r = (plan.draw(i, off + j) ? 1.0 : 0.0) - plan.prob(i, off + j);
      g.score_alpha[j] += loss * r * lg;
      g.score_beta[j] += loss * r;
    }
  }
  g.sum_components();
  return g;
}

inline GradEstimate score_function_grad(double loss, const BernoulliPlan& plan, const AdaptiveParams& params,
                                        const SdeProblem& problem) {
  return score_function_grad(loss, plan, params, [&](int i) { return problem.time_at(i, plan.n_steps); });
}

struct TangentRollout {
  Vec final_state;
  double loss = 0.0;             // ||reference - y_T||^2
  double directional = 0.0;      // d loss along the parameter direction, B held fixed
  CostLedger ledger{false};
};

/// ML-EM rollout under a frozen plan, carrying a forward-mode tangent of the
/// 1/p_k factors along the parameter direction `v` = [v_alpha..., v_beta...].
/// Memory is O(dim + levels) regardless of the step count.
template <NoiseSource Noise>
TangentRollout rollout_tangent(const SdeProblem& problem, const AdaptiveParams& params, const BernoulliPlan& plan,
                               const Vec& y0, const Noise& noise, const Vec& reference, std::span<const double> v) {
  const std::size_t off = detail::check_plan(plan, params);
  const std::size_t m = params.size();
  const std::size_t w = plan.width();
  if (v.size() != 2 * m) throw std::invalid_argument("rollout_tangent: direction must have 2 entries per level");
  if (reference.size() != y0.size()) throw std::invalid_argument("rollout_tangent: reference has wrong dimension");
  const int n = plan.n_steps;
  const double eta = problem.eta(n);
  const double sq_eta = std::sqrt(eta);
  const std::size_t d = y0.size();

  Vec y = y0, ydot(d, 0.0), z(d);
  Vec drift(d), ddrift(d);
  std::vector<Vec> f(w, Vec(d)), jf(w, Vec(d));
  Vec own(w), own_dot(w);
  TangentRollout out;
  for (int i = 0; i < n; ++i) {
    const double t = problem.time_at(i, n);
    const double lg = std::log(t + params.delta);
    for (std::size_t j = 0; j < w; ++j) {
      own[j] = 0.0;
      own_dot[j] = 0.0;
      if (!plan.draw(i, j)) continue;
      const double p = plan.prob(i, j);
      if (!(p > 0.0)) throw std::invalid_argument("rollout_tangent: B = 1 drawn with p = 0");
      own[j] = 1.0 / p;
      if (j < off) continue;
      const double pdot = p * (1.0 - p) * (v[j - off] * lg + v[m + j - off]);
      own_dot[j] = -pdot / (p * p);
    }
    std::fill(drift.begin(), drift.end(), 0.0);
    std::fill(ddrift.begin(), ddrift.end(), 0.0);
    for (std::size_t j = 0; j < w; ++j) {
      const double up = j + 1 < w ? own[j + 1] : 0.0;
      const double up_dot = j + 1 < w ? own_dot[j + 1] : 0.0;
      if (!plan.draw(i, j) && up == 0.0) continue;
      const int k = plan.levels[j];
      problem.ladder.level(k).jvp(t, y, ydot, f[j], jf[j]);
      out.ledger.record(i, k, problem.ladder.cost_units(k), !plan.draw(i, j));
      const double w = own[j] - up;
      const double wdot = own_dot[j] - up_dot;
      for (std::size_t r = 0; r < d; ++r) {
        drift[r] += w * f[j][r];
        ddrift[r] += wdot * f[j][r] + w * jf[j][r];
      }
    }
    noise(i, z);
    const double s = sq_eta * problem.sigma(t);
    for (std::size_t r = 0; r < d; ++r) {
      y[r] = y[r] + eta * drift[r] + s * z[r];
      ydot[r] += eta * ddrift[r];
    }
  }
  out.final_state = y;
  for (std::size_t r = 0; r < d; ++r) {
    const double e = y[r] - reference[r];
    out.loss += e * e;
    out.directional += 2.0 * e * ydot[r];
  }
  return out;
}

/// Context of one ML-EM rollout used by the gradient estimators.
struct RolloutContext {
  const SdeProblem* problem = nullptr;
  int n_steps = 1;
  NoiseDriver driver;
  std::uint64_t noise_stream = 0;
  std::uint64_t plan_seed = 0;
  Vec reference;  // final state the rollout is compared against
  std::vector<int> base_levels;  // always evaluated, below the learned levels
};

inline BernoulliPlan plan_for(const RolloutContext& ctx, const AdaptiveParams& params) {
  return make_plan(LevelSchedule::learned(params), evaluated_levels(params, ctx.base_levels), *ctx.problem,
                   ctx.n_steps, ctx.plan_seed);
}

/// Directional derivative of the frozen-plan loss ||x_T - y_T||^2 along `v`.
inline double forward_directional_grad(const AdaptiveParams& params, std::span<const double> v,
                                       const RolloutContext& ctx) {
  const auto plan = plan_for(ctx, params);
  const SdeProblem& pb = *ctx.problem;
  return rollout_tangent(pb, params, plan, pb.initial_state(ctx.driver, ctx.noise_stream),
                         pb.noise(ctx.driver, ctx.noise_stream, ctx.n_steps), ctx.reference, v)
      .directional;
}

/// Frozen-plan loss at `params` with the Bernoulli draws of `plan` (not redrawn).
template <NoiseSource Noise>
double frozen_plan_loss(const SdeProblem& problem, const AdaptiveParams& params, BernoulliPlan plan, const Vec& y0,
                        const Noise& noise, const Vec& reference) {
  detail::check_plan(plan, params);
  const auto sched = LevelSchedule::learned(params);
  for (int i = 0; i < plan.n_steps; ++i)
    for (std::size_t j = 0; j < plan.width(); ++j)
      plan.probs[static_cast<std::size_t>(i) * plan.width() + j] =
          sched.prob(plan.levels[j], problem.time_at(i, plan.n_steps));
  const auto tr = mlem_solve_plan(problem, plan, y0, noise, false, false);
  return squared_distance(tr.final_state(), reference);
}

/// Value and exact gradient of lambda sum_i sum_k p_k(t_i) T_k over the decision steps i = 0..n-1.
struct RegularizerValue {
  double value = 0.0;
  Vec d_alpha, d_beta;
};

inline RegularizerValue regularizer(const AdaptiveParams& params, const Vec& cost_table, double lambda,
                                    const SdeProblem& problem, int n_steps) {
  const std::size_t m = params.size();
  if (cost_table.size() != m) throw std::invalid_argument("regularizer: one cost per level required");
  RegularizerValue r{0.0, Vec(m, 0.0), Vec(m, 0.0)};
  if (lambda == 0.0) return r;
  for (int i = 0; i < n_steps; ++i) {
    const double t = problem.time_at(i, n_steps);
    const double lg = std::log(t + params.delta);
    for (std::size_t j = 0; j < m; ++j) {
      const double p = sigmoid(params.logit_at(static_cast<int>(j), t));
      const double dp = p * (1.0 - p);
      r.value += lambda * p * cost_table[j];
      r.d_alpha[j] += lambda * cost_table[j] * dp * lg;
      r.d_beta[j] += lambda * cost_table[j] * dp;
    }
  }
  return r;
}

/// Everything the training loop needs besides the parameters.
struct TrainingSetup {
  const SdeProblem* problem = nullptr;
  int n_steps = 1;
  NoiseDriver driver;
  Vec cost_table;  // T_k per parameterised level
  double lambda = 0.1;
  int batch_size = 300;
  double loss_weight = 1.0;  // scales the data term (0 leaves only the regulariser)
  std::function<Vec(std::uint64_t)> reference;  // final reference state for a noise stream
  std::vector<int> base_levels;                  // always evaluated, below the learned levels
};

/// Reference final states from top-level EM on the same noise.
inline std::function<Vec(std::uint64_t)> em_reference(const SdeProblem& problem, int level, int n_steps,
                                                      NoiseDriver driver) {
  return [&problem, level, n_steps, driver](std::uint64_t stream) {
    return em_solve(problem, level, n_steps, problem.initial_state(driver, stream),
                    problem.noise(driver, stream, n_steps), false)
        .final_state();
  };
}

struct MemberSeeds {
  std::uint64_t noise_stream;
  std::uint64_t plan_seed;
  std::uint64_t direction_stream;
};

inline MemberSeeds member_seeds(std::uint64_t seed, std::uint64_t member) {
  const auto g = static_cast<std::uint64_t>(Domain::generic);
  return {hash_key(seed, g, 1, member), hash_key(seed, g, 2, member), hash_key(seed, g, 3, member)};
}

/// Batch estimate of the gradient of E||x_T - y_T||^2 + lambda sum_i p_k(t_i) T_k.
/// Each member has its own noise stream and plan; the pathwise part uses one
/// Gaussian direction per member, (grad . v) v.
inline GradEstimate estimate_gradient(const TrainingSetup& setup, const AdaptiveParams& params, std::uint64_t seed) {
  if (!setup.problem) throw std::invalid_argument("estimate_gradient: no problem");
  if (setup.batch_size < 1) throw std::invalid_argument("estimate_gradient: batch_size must be >= 1");
  if (setup.lambda < 0.0) throw std::invalid_argument("estimate_gradient: lambda must be >= 0");
  params.validate();
  const SdeProblem& pb = *setup.problem;
  const std::size_t m = params.size();
  const auto sched = LevelSchedule::learned(params);
  const auto levels = evaluated_levels(params, setup.base_levels);
  const auto reg = regularizer(params, setup.cost_table, setup.lambda, pb, setup.n_steps);

  GradEstimate g(m);
  g.regularizer = reg.value;
  g.reg_alpha = reg.d_alpha;
  g.reg_beta = reg.d_beta;
  const double inv_b = 1.0 / setup.batch_size;
  Vec v(2 * m);
  for (int b = 0; b < setup.batch_size; ++b) {
    Vec sample(2 * m, 0.0);
    if (setup.loss_weight != 0.0) {
      if (!setup.reference) throw std::invalid_argument("estimate_gradient: no reference");
      const auto s = member_seeds(seed, static_cast<std::uint64_t>(b));
      const auto plan = make_plan(sched, levels, pb, setup.n_steps, s.plan_seed);
      const Vec ref = setup.reference(s.noise_stream);
      keyed_normals(seed, Domain::direction, s.direction_stream, 0, v);
      const auto roll = rollout_tangent(pb, params, plan, pb.initial_state(setup.driver, s.noise_stream),
                                        pb.noise(setup.driver, s.noise_stream, setup.n_steps), ref, v);
      const double w = setup.loss_weight;
      const auto sc = score_function_grad(w * roll.loss, plan, params, pb);
      g.loss += roll.loss * inv_b;
      for (std::size_t j = 0; j < m; ++j) {
        const double pa = w * roll.directional * v[j];
        const double pbeta = w * roll.directional * v[m + j];
        g.score_alpha[j] += sc.score_alpha[j] * inv_b;
        g.score_beta[j] += sc.score_beta[j] * inv_b;
        g.path_alpha[j] += pa * inv_b;
        g.path_beta[j] += pbeta * inv_b;
        sample[j] = sc.score_alpha[j] + pa;
        sample[m + j] = sc.score_beta[j] + pbeta;
      }
    }
    for (std::size_t j = 0; j < m; ++j) {
      sample[j] += reg.d_alpha[j];
      sample[m + j] += reg.d_beta[j];
    }
    g.samples.push_back(std::move(sample));
  }
  g.sum_components();
  return g;
}

struct TrainResult {
  AdaptiveParams params;
  Vec loss_trace;  // estimated regularised loss at each step, before the update
};

/// Plain SGD on (alpha, beta). Throws std::runtime_error when the estimated
/// loss exceeds 1e3 times its initial value.
inline TrainResult sgd_train(const TrainingSetup& setup, AdaptiveParams params, int steps, double learning_rate,
                             std::uint64_t seed, const std::function<void(int, const GradEstimate&)>& on_step = {}) {
  if (steps < 1) throw std::invalid_argument("sgd_train: steps must be >= 1");
  TrainResult res;
  const std::size_t m = params.size();
  double initial = 0.0;
  for (int it = 0; it < steps; ++it) {
    const auto g = estimate_gradient(setup, params, hash_key(seed, static_cast<std::uint64_t>(Domain::generic), 0x5d,
                                                             static_cast<std::uint64_t>(it)));
    const double obj = g.objective();
    if (it == 0) initial = obj;
    if (!std::isfinite(obj) || (initial > 0.0 && obj > 1e3 * initial)) {
      std::ostringstream msg;
      msg << "sgd_train: diverged at step " << it << " (loss " << obj << ", initial " << initial
          << "); lower the learning rate";
      throw std::runtime_error(msg.str());
    }
    res.loss_trace.push_back(obj);
    if (on_step) on_step(it, g);
    for (std::size_t j = 0; j < m; ++j) {
      params.alpha[j] -= learning_rate * g.d_alpha[j];
      params.beta[j] -= learning_rate * g.d_beta[j];
    }
  }
  res.params = std::move(params);
  return res;
}

inline std::vector<AdaptiveParams> beta_shift_sweep(const AdaptiveParams& params, const std::vector<double>& deltas) {
  std::vector<AdaptiveParams> out;
  out.reserve(deltas.size());
  for (double dlt : deltas) {
    AdaptiveParams p = params;
    for (double& b : p.beta) b += dlt;
    out.push_back(std::move(p));
  }
  return out;
}

/// Thirteen shifts -3.0, -2.5, ..., 3.0.
inline std::vector<double> default_beta_shifts() {
  std::vector<double> d;
  for (int i = -6; i <= 6; ++i) d.push_back(0.5 * i);
  return d;
}

// ---------------------------------------------------------------------------
// Schedule files
// ---------------------------------------------------------------------------

inline std::string join_doubles(const Vec& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + format_double(v[i]);
  return s;
}

inline std::string schedule_to_string(const AdaptiveParams& params) {
  std::string s = "# p_k(t) = sigmoid(alpha_k log(t + delta) + beta_k)\n";
  s += "delta = " + format_double(params.delta) + "\n";
  s += "levels = ";
  for (std::size_t i = 0; i < params.levels.size(); ++i) s += (i ? ", " : "") + std::to_string(params.levels[i]);
  s += "\nalpha = " + join_doubles(params.alpha) + "\n";
  s += "beta = " + join_doubles(params.beta) + "\n";
  return s;
}

inline AdaptiveParams schedule_from_config(const Config& cfg, const std::string& prefix = "") {
  AdaptiveParams p(cfg.get_ints(prefix + "levels", {}), cfg.get_doubles(prefix + "alpha", {}),
                   cfg.get_doubles(prefix + "beta", {}), cfg.get_double(prefix + "delta", 0.1));
  if (p.levels.empty()) throw std::invalid_argument("schedule file: no levels");
  return p;
}

inline void write_schedule(const AdaptiveParams& params, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_schedule: cannot open " + path);
  f << schedule_to_string(params);
  if (!f) throw std::runtime_error("write_schedule: write failed for " + path);
}

inline AdaptiveParams read_schedule(const std::string& path) {
  const Config cfg = Config::load(path);
  auto p = schedule_from_config(cfg);
  cfg.finish();
  return p;
}

}  // namespace mlem
