#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>

#include "mlem/sde_core.hpp"

namespace mlem {

namespace detail {

/// out = y + eta * drift + noise_scale * z. Shared by every stepper so that
/// identical drifts give bit-identical states.
inline void apply_step(std::span<const double> y, double eta, std::span<const double> drift,
                       double noise_scale, std::span<const double> z, std::span<double> out) {
  for (std::size_t i = 0; i < y.size(); ++i) out[i] = y[i] + eta * drift[i] + noise_scale * z[i];
}

}  // namespace detail

/// One Euler-Maruyama step `y + eta f_t(y) + sqrt(eta) sigma_t z`.
inline Vec em_step(const Vec& y, double t, double eta, const DriftField& drift, const NoiseSchedule& sigma,
                   const Vec& z) {
  if (!(eta > 0.0)) throw std::invalid_argument("em_step: eta must be positive");
  if (y.size() != drift.dim() || z.size() != y.size())
    throw std::invalid_argument("em_step: dimension mismatch");
  Vec f(y.size()), out(y.size());
  drift.eval(t, y, f);
  detail::apply_step(y, eta, f, std::sqrt(eta) * sigma(t), z, out);
  return out;
}

/// Integrates the problem with a fixed drift field. Every step records one
/// evaluation of `cost_per_eval` under `level_tag` (no records when the tag is
/// `kUnaccountedLevel`).
inline constexpr int kUnaccountedLevel = std::numeric_limits<int>::min();

template <NoiseSource Noise>
Trajectory em_solve_field(const SdeProblem& problem, const DriftField& drift, int level_tag, double cost_per_eval,
                          int n_steps, const Vec& y0, const Noise& noise, bool keep_path = true) {
  if (n_steps < 1) throw std::invalid_argument("em_solve: n_steps must be >= 1");
  if (y0.size() != drift.dim()) throw std::invalid_argument("em_solve: initial state has wrong dimension");
  const double eta = problem.eta(n_steps);
  const double sq_eta = std::sqrt(eta);
  const std::size_t d = y0.size();

  Trajectory traj;
  if (keep_path) {
    traj.times.reserve(static_cast<std::size_t>(n_steps) + 1);
    traj.states.reserve(static_cast<std::size_t>(n_steps) + 1);
    traj.times.push_back(problem.time_at(0, n_steps));
    traj.states.push_back(y0);
  }
  Vec y = y0, next(d), f(d), z(d);
  for (int i = 0; i < n_steps; ++i) {
    const double t = problem.time_at(i, n_steps);
    drift.eval(t, y, f);
    if (level_tag != kUnaccountedLevel) traj.ledger.record(i, level_tag, cost_per_eval);
    noise(i, z);
    detail::apply_step(y, eta, f, sq_eta * problem.sigma(t), z, next);
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

template <NoiseSource Noise>
Trajectory em_solve(const SdeProblem& problem, int level, int n_steps, const Vec& y0, const Noise& noise,
                    bool keep_path = true) {
  if (!problem.ladder.contains(level))
    throw std::out_of_range("em_solve: level " + std::to_string(level) + " out of ladder range");
  return em_solve_field(problem, problem.ladder.level(level), level, problem.ladder.cost_units(level), n_steps, y0,
                        noise, keep_path);
}

/// EM at ladder level `level` on the noise stream `stream`.
inline Trajectory em_solve(const SdeProblem& problem, int level, int n_steps, const NoiseDriver& driver,
                           std::uint64_t stream) {
  if (!problem.ladder.contains(level))
    throw std::out_of_range("em_solve: level " + std::to_string(level) + " out of ladder range");
  return em_solve(problem, level, n_steps, problem.initial_state(driver, stream),
                  problem.noise(driver, stream, n_steps));
}

/// EM with the ladder's ground-truth drift: the discretisation `x^(eta)` that
/// solver errors are measured against.
inline Trajectory em_solve_truth(const SdeProblem& problem, int n_steps, const NoiseDriver& driver,
                                 std::uint64_t stream) {
  const DriftField* truth = problem.ladder.truth();
  if (!truth) throw std::invalid_argument("em_solve_truth: ladder has no ground-truth drift");
  return em_solve_field(problem, *truth, kUnaccountedLevel, 0.0, n_steps, problem.initial_state(driver, stream),
                        problem.noise(driver, stream, n_steps));
}

}  // namespace mlem
