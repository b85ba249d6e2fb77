#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

namespace mlem {

namespace detail {
inline bool is_critical_gamma(double gamma) { return gamma == 2.0; }
}  // namespace detail

/// Three-case compute-scaling function of the ML-EM cost bound.
inline double e_gamma(double gamma, double r) {
  if (!(gamma > 0.0) || !(r > 0.0)) throw std::invalid_argument("e_gamma: gamma and r must be positive");
  const double h = std::exp2(gamma / 2.0 - 1.0);
  if (detail::is_critical_gamma(gamma)) return r * r * (3.0 + std::log2(r));
  if (gamma < 2.0) return r * r / ((1.0 - h) * (1.0 - h));
  return std::exp2(3.0 * (gamma - 2.0)) / ((h - 1.0) * (h - 1.0)) * std::pow(r, gamma);
}

/// Exact value of sum_{k=k_min}^{k_max} 2^{(gamma/2 - 1) k}.
inline double geometric_sum(double gamma, int k_min, int k_max) {
  double s = 0.0;
  for (int k = k_min; k <= k_max; ++k) s += std::exp2((gamma / 2.0 - 1.0) * k);
  return s;
}

/// Case-wise closed-form upper bound on `geometric_sum`.
inline double geometric_sum_bound(double gamma, int k_min, int k_max) {
  if (k_min > k_max) throw std::invalid_argument("geometric_sum_bound: k_min > k_max");
  const double e = gamma / 2.0 - 1.0;
  const double h = std::exp2(e);
  if (detail::is_critical_gamma(gamma)) return static_cast<double>(k_max + 1 - k_min);
  if (gamma < 2.0) return std::exp2(e * k_min) / (1.0 - h);
  return h / (h - 1.0) * std::exp2(e * k_max);
}

/// How the conditional variance of one level's Bernoulli term is bounded.
enum class VarianceFactor {
  inverse_p,           // ||Delta||^2 / p, as in the published recursion
  bernoulli_exact,     // ||Delta||^2 (1 - p) / p, the exact Bernoulli variance
};

struct LevelProbability {
  int k = 0;
  double p = 1.0;
};

/// Iterated bias / variance bounds b_t and v_t^2 (index i = after i steps).
struct RecursionBound {
  std::vector<double> b;
  std::vector<double> v2;
  double L = 0.0;
  double eta = 0.0;
  std::optional<int> k_max;
};

/// Iterates
///   b_{t+eta}   <= (1 + eta L) b_t + eta L v_t + eta 2^{-k_max}
///   v_{t+eta}^2 <= 9 eta^2 sum_k 2^{-2k} / p_k + (1 + eta L)^2 v_t^2
/// from b_0 = v_0 = 0. An empty `k_max` drops the bias source term.
inline RecursionBound error_recursion_bounds(double L, double eta, int n_steps, std::optional<int> k_max,
                                             std::span<const LevelProbability> levels,
                                             VarianceFactor factor = VarianceFactor::inverse_p) {
  if (n_steps < 0) throw std::invalid_argument("error_recursion_bounds: negative step count");
  double source = 0.0;
  for (const auto& lp : levels) {
    if (!(lp.p > 0.0)) throw std::invalid_argument("error_recursion_bounds: probabilities must be positive");
    const double w = factor == VarianceFactor::inverse_p ? 1.0 / lp.p : (1.0 - lp.p) / lp.p;
    source += std::exp2(-2.0 * lp.k) * w;
  }
  source *= 9.0 * eta * eta;
  const double bias_src = k_max ? eta * std::exp2(-static_cast<double>(*k_max)) : 0.0;
  const double g = 1.0 + eta * L;

  RecursionBound rb;
  rb.L = L;
  rb.eta = eta;
  rb.k_max = k_max;
  rb.b.assign(static_cast<std::size_t>(n_steps) + 1, 0.0);
  rb.v2.assign(static_cast<std::size_t>(n_steps) + 1, 0.0);
  for (int i = 0; i < n_steps; ++i) {
    const double b = rb.b[i];
    const double v = std::sqrt(rb.v2[i]);
    rb.b[i + 1] = g * b + eta * L * v + bias_src;
    rb.v2[i + 1] = source + g * g * rb.v2[i];
  }
  return rb;
}

/// Expected-cost bound at tolerance epsilon, in two forms that differ in how
/// the prefactor c enters: `proof` carries c^{1/gamma} inside the power, while
/// `statement` uses E_gamma(c e^{L(T+eta)} / (L epsilon)).
struct CostBounds {
  double proof = 0.0;
  double statement = 0.0;
};

inline CostBounds cost_bounds(double epsilon, double L, double T, double eta, double c, double gamma) {
  if (!(epsilon > 0.0) || !(L > 0.0) || !(T > 0.0) || !(eta > 0.0) || !(c > 0.0) || !(gamma > 0.0))
    throw std::invalid_argument("predicted_cost_bound: all inputs must be positive");
  const double lt = L * T;
  const double pre = 18.0 * (lt * lt * lt + lt / 2.0);
  const double growth = std::exp(L * (T + eta)) / (L * epsilon);
  CostBounds out;
  out.statement = pre * e_gamma(gamma, c * growth);

  const double rho = std::pow(c, 1.0 / gamma) * growth;
  const double h = std::exp2(gamma / 2.0 - 1.0);
  double g;
  if (detail::is_critical_gamma(gamma)) {
    g = rho * rho * std::log2(8.0 * rho);
  } else if (gamma < 2.0) {
    g = rho * rho / ((1.0 - h) * (1.0 - h));
  } else {
    g = std::exp2(3.0 * (gamma - 2.0)) / ((h - 1.0) * (h - 1.0)) * std::pow(rho, gamma);
  }
  out.proof = pre * g;
  return out;
}

/// Canonical cost bound (the `proof` form of `cost_bounds`).
inline double predicted_cost_bound(double epsilon, double L, double T, double eta, double c, double gamma) {
  return cost_bounds(epsilon, L, T, eta, c, gamma).proof;
}

}  // namespace mlem
