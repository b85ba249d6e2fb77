#pragma once

// Small problems with independently computable answers, shared by the unit
// tests and the acceptance binary.

#include <cmath>
#include <vector>

#include "mlem/adaptive_probs.hpp"
#include "mlem/schedule.hpp"
#include "mlem/sde_core.hpp"

namespace mlem::toys {

/// Two-level, deterministic (sigma = 0) problem on [0, 1] in two dimensions
/// with smooth nonlinear levels.
inline SdeProblem two_level_problem() {
  auto f0 = [](double t, auto x, auto out) {
    using std::sin, std::cos;
    out[0] = -1.0 * x[0] + 0.5 * sin(x[1] + t);
    out[1] = -0.5 * x[1] + 0.3 * cos(x[0]);
  };
  auto f1 = [](double t, auto x, auto out) {
    using std::sin, std::cos;
    out[0] = -1.0 * x[0] + 0.5 * sin(x[1] + t) + 0.2 * cos(2.0 * x[0]);
    out[1] = -0.5 * x[1] + 0.3 * cos(x[0]) - 0.15 * sin(x[0] * x[1]);
  };
  auto truth = [](double t, auto x, auto out) {
    using std::sin, std::cos;
    out[0] = -1.0 * x[0] + 0.5 * sin(x[1] + t) + 0.25 * cos(2.0 * x[0]);
    out[1] = -0.5 * x[1] + 0.3 * cos(x[0]) - 0.2 * sin(x[0] * x[1]);
  };
  SdeProblem pb;
  pb.ladder = DriftLadder(0, 1, 1.0, 3.0,
                          {DriftField::zero(2), make_drift_field(2, f0, 2.0, 3.0), make_drift_field(2, f1, 2.5, 3.5)},
                          make_drift_field(2, truth, 2.5, 3.5));
  pb.sigma = NoiseSchedule::none();
  pb.horizon = 1.0;
  pb.x0 = {0.8, -0.6};
  return pb;
}

inline AdaptiveParams two_level_params() { return AdaptiveParams({0, 1}, {0.3, -0.2}, {0.5, -0.4}, 0.1); }

/// Exact L_lambda = E_B ||ref - y_T||^2 + lambda sum_i sum_k p_k(t_i) T_k by
/// enumerating every Bernoulli outcome; the ML-EM update is written out here
/// directly rather than through the library stepper.
inline double enumerated_objective(const SdeProblem& pb, const AdaptiveParams& params, int n_steps,
                                   const Vec& ref, const Vec& cost_table, double lambda) {
  const std::size_t m = params.levels.size();
  const std::size_t bits = m * static_cast<std::size_t>(n_steps);
  const double eta = pb.eta(n_steps);
  double expected = 0.0;
  for (std::size_t mask = 0; mask < (std::size_t{1} << bits); ++mask) {
    double weight = 1.0;
    Vec y = pb.x0;
    for (int i = 0; i < n_steps; ++i) {
      const double t = pb.time_at(i, n_steps);
      Vec drift(y.size(), 0.0), lower(y.size(), 0.0);
      for (std::size_t j = 0; j < m; ++j) {
        const double p = sigmoid(params.alpha[j] * std::log(t + params.delta) + params.beta[j]);
        const bool b = (mask >> (i * m + j)) & 1u;
        weight *= b ? p : 1.0 - p;
        const Vec f = pb.ladder.level(params.levels[j])(t, y);
        if (b)
          for (std::size_t r = 0; r < y.size(); ++r) drift[r] += (f[r] - lower[r]) / p;
        lower = f;
      }
      for (std::size_t r = 0; r < y.size(); ++r) y[r] += eta * drift[r];
    }
    expected += weight * squared_distance(y, ref);
  }
  double reg = 0.0;
  for (int i = 0; i < n_steps; ++i) {
    const double t = pb.time_at(i, n_steps);
    for (std::size_t j = 0; j < m; ++j)
      reg += sigmoid(params.alpha[j] * std::log(t + params.delta) + params.beta[j]) * cost_table[j];
  }
  return expected + lambda * reg;
}

/// Central finite differences of the enumerated objective in [alpha..., beta...] order.
inline Vec enumerated_gradient(const SdeProblem& pb, const AdaptiveParams& params, int n_steps, const Vec& ref,
                               const Vec& cost_table, double lambda, double h = 1e-5) {
  const std::size_t m = params.levels.size();
  Vec g(2 * m);
  for (std::size_t c = 0; c < 2 * m; ++c) {
    AdaptiveParams hi = params, lo = params;
    double& vh = c < m ? hi.alpha[c] : hi.beta[c - m];
    double& vl = c < m ? lo.alpha[c] : lo.beta[c - m];
    vh += h;
    vl -= h;
    g[c] = (enumerated_objective(pb, hi, n_steps, ref, cost_table, lambda) -
            enumerated_objective(pb, lo, n_steps, ref, cost_table, lambda)) /
           (2 * h);
  }
  return g;
}

}  // namespace mlem::toys
