#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mlem/config.hpp"
#include "mlem/dual.hpp"
#include "mlem/sde_core.hpp"

namespace mlem {

/// Mixture of isotropic Gaussians sum_i w_i N(mu_i, v_i I).
struct GaussianMixture {
  Vec weights;
  std::vector<Vec> means;
  Vec variances;

  GaussianMixture() = default;
  GaussianMixture(Vec w, std::vector<Vec> mu, Vec var)
      : weights(std::move(w)), means(std::move(mu)), variances(std::move(var)) {
    validate();
  }

  static GaussianMixture standard_normal(std::size_t dim) { return GaussianMixture({1.0}, {Vec(dim, 0.0)}, {1.0}); }

  std::size_t dim() const { return means.front().size(); }
  std::size_t size() const { return weights.size(); }

  void validate() const {
    if (weights.empty()) throw std::invalid_argument("GaussianMixture: no components");
    if (means.size() != weights.size() || variances.size() != weights.size())
      throw std::invalid_argument("GaussianMixture: component arrays differ in length");
    double s = 0.0;
    for (double w : weights) {
      if (!(w > 0.0)) throw std::invalid_argument("GaussianMixture: weights must be positive");
      s += w;
    }
    if (std::abs(s - 1.0) > 1e-12) throw std::invalid_argument("GaussianMixture: weights must sum to 1");
    for (double v : variances)
      if (!(v > 0.0)) throw std::invalid_argument("GaussianMixture: variances must be positive");
    for (const auto& m : means)
      if (m.size() != means.front().size() || m.empty())
        throw std::invalid_argument("GaussianMixture: means must share a positive dimension");
  }
};

/// Parses lines `weight mean_1 ... mean_d variance`; `#` starts a comment.
inline GaussianMixture parse_mixture(const std::string& text) {
  Vec w, var;
  std::vector<Vec> mu;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    std::istringstream ls(line);
    std::vector<double> vals;
    std::string tok;
    while (ls >> tok) {
      try {
        vals.push_back(parse_double(tok));
      } catch (const std::invalid_argument&) {
        throw std::invalid_argument("mixture line " + std::to_string(lineno) + ": bad number '" + tok + "'");
      }
    }
    if (vals.empty()) continue;
    if (vals.size() < 3)
      throw std::invalid_argument("mixture line " + std::to_string(lineno) + ": need weight, mean..., variance");
    w.push_back(vals.front());
    var.push_back(vals.back());
    mu.emplace_back(vals.begin() + 1, vals.end() - 1);
  }
  return GaussianMixture(std::move(w), std::move(mu), std::move(var));
}

inline GaussianMixture load_mixture(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_mixture: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_mixture(ss.str());
}

/// Score of the mixture diffused to signal level abar: component i becomes
/// N(sqrt(abar) mu_i, (abar v_i + 1 - abar) I). Log-space weights avoid underflow.
template <class S>
void score_abar(const GaussianMixture& mix, double abar, std::span<const S> x, std::span<S> out) {
  using std::exp;
  using std::log;
  const std::size_t d = mix.dim();
  const std::size_t n = mix.size();
  const double sa = std::sqrt(abar);
  constexpr std::size_t kMax = 32;
  std::vector<S> heap;
  S stack_lw[kMax];
  S* lw = stack_lw;
  if (n > kMax) {
    heap.resize(n);
    lw = heap.data();
  }
  S best(-std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < n; ++i) {
    const double s2 = abar * mix.variances[i] + 1.0 - abar;
    S q(0.0);
    for (std::size_t r = 0; r < d; ++r) {
      const S e = x[r] - sa * mix.means[i][r];
      q += e * e;
    }
    lw[i] = std::log(mix.weights[i]) - 0.5 * static_cast<double>(d) * std::log(s2) - q / (2.0 * s2);
    if (i == 0 || lw[i] > best) best = lw[i];
  }
  S total(0.0);
  for (std::size_t i = 0; i < n; ++i) {
    lw[i] = exp(lw[i] - best);
    total += lw[i];
  }
  for (std::size_t r = 0; r < d; ++r) out[r] = S(0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double s2 = abar * mix.variances[i] + 1.0 - abar;
    const S pi = lw[i] / total;
    for (std::size_t r = 0; r < d; ++r) out[r] -= pi * (x[r] - sa * mix.means[i][r]) / s2;
  }
}

inline double log_density_abar(const GaussianMixture& mix, double abar, std::span<const double> x) {
  const std::size_t d = mix.dim();
  const double sa = std::sqrt(abar);
  double best = -std::numeric_limits<double>::infinity();
  Vec lw(mix.size());
  for (std::size_t i = 0; i < mix.size(); ++i) {
    const double s2 = abar * mix.variances[i] + 1.0 - abar;
    double q = 0.0;
    for (std::size_t r = 0; r < d; ++r) {
      const double e = x[r] - sa * mix.means[i][r];
      q += e * e;
    }
    lw[i] = std::log(mix.weights[i]) - 0.5 * d * std::log(2.0 * std::numbers::pi * s2) - q / (2.0 * s2);
    best = std::max(best, lw[i]);
  }
  double s = 0.0;
  for (double l : lw) s += std::exp(l - best);
  return best + std::log(s);
}

/// log rho_t(x) for the diffused mixture at time t (abar = e^{-t}).
inline double mixture_log_density(const GaussianMixture& mix, double t, std::span<const double> x) {
  if (t < 0.0) throw std::invalid_argument("mixture_log_density: negative time");
  return log_density_abar(mix, std::exp(-t), x);
}

inline Vec mixture_score(const GaussianMixture& mix, double t, std::span<const double> x) {
  if (t < 0.0) throw std::invalid_argument("mixture_score: negative time");
  if (x.size() != mix.dim()) throw std::invalid_argument("mixture_score: dimension mismatch");
  Vec out(x.size());
  score_abar<double>(mix, std::exp(-t), x, out);
  return out;
}

/// Drift of the backward SDE in reversed time: 1/2 x + s_t(x).
inline Vec backward_sde_drift(const GaussianMixture& mix, double t, std::span<const double> x) {
  Vec s = mixture_score(mix, t, x);
  for (std::size_t r = 0; r < s.size(); ++r) s[r] += 0.5 * x[r];
  return s;
}

/// Right-hand side of the probability-flow ODE in reversed time: 1/2 x + 1/2 s_t(x).
inline Vec backward_ode_rhs(const GaussianMixture& mix, double t, std::span<const double> x) {
  Vec s = mixture_score(mix, t, x);
  for (std::size_t r = 0; r < s.size(); ++r) s[r] = 0.5 * x[r] + 0.5 * s[r];
  return s;
}

enum class BackwardKind { sde, ode };

/// Upper bound on the Lipschitz constant of the score over all t >= 0:
/// 1/s_min + D^2 / s_min^2 with D the largest distance between means.
inline double score_lipschitz_bound(const GaussianMixture& mix) {
  double vmin = 1.0;
  for (double v : mix.variances) vmin = std::min(vmin, v);
  double dmax = 0.0;
  for (std::size_t i = 0; i < mix.size(); ++i)
    for (std::size_t j = i + 1; j < mix.size(); ++j)
      dmax = std::max(dmax, std::sqrt(squared_distance(mix.means[i], mix.means[j])));
  return 1.0 / vmin + dmax * dmax / (vmin * vmin);
}

/// Exact backward drift as a DriftField (1/2 x + s, or 1/2 x + 1/2 s).
inline DriftField mixture_drift_field(const GaussianMixture& mix, BackwardKind kind) {
  const double sw = kind == BackwardKind::sde ? 1.0 : 0.5;
  auto f = [mix, sw](double t, auto x, auto out) {
    score_abar(mix, std::exp(-t), x, out);
    for (std::size_t r = 0; r < x.size(); ++r) out[r] = 0.5 * x[r] + sw * out[r];
  };
  return make_drift_field(mix.dim(), f, 0.5 + sw * score_lipschitz_bound(mix),
                          std::numeric_limits<double>::infinity());
}

struct DiffusionProblemOptions {
  BackwardKind kind = BackwardKind::sde;
  double T = 3.0;
  double t_min = 1e-2;
  double c = 1.0;
  double gamma = 3.0;
  int k_min = 0;
  int k_max = 5;
  std::uint64_t perturb_seed = 1;
  SyntheticLadderOptions ladder;
  int noise_base_steps = 0;
};

/// Backward sampling problem from x_T ~ N(0, I) at t = T down to t_min, with a
/// synthetic ladder planted around the exact drift.
inline SdeProblem make_diffusion_problem(const GaussianMixture& mix, const DiffusionProblemOptions& o = {}) {
  if (!(o.T > o.t_min) || !(o.t_min > 0.0)) throw std::invalid_argument("make_diffusion_problem: need T > t_min > 0");
  SdeProblem p;
  const DriftField truth = mixture_drift_field(mix, o.kind);
  p.ladder = make_synthetic_ladder(truth, o.c, o.gamma, o.k_min, o.k_max, o.perturb_seed, o.ladder);
  p.sigma = o.kind == BackwardKind::sde ? NoiseSchedule::constant(1.0) : NoiseSchedule::none();
  p.t_start = o.T;
  p.horizon = o.T - o.t_min;
  p.direction = Direction::backward;
  p.random_initial = true;
  p.noise_base_steps = o.noise_base_steps;
  return p;
}

// ---------------------------------------------------------------------------
// Discrete DDPM / DDIM processes
// ---------------------------------------------------------------------------

/// beta_1..beta_M with alpha_m = 1 - beta_m, abar_m = prod alpha, sigma_m = sqrt(1 - abar_m).
/// Index 0 is the clean end (abar_0 = 1, sigma_0 = 0).
class DiscreteSchedule {
 public:
  explicit DiscreteSchedule(Vec betas) : betas_(std::move(betas)) {
    if (betas_.empty()) throw std::invalid_argument("DiscreteSchedule: no betas");
    abar_.assign(betas_.size() + 1, 1.0);
    for (std::size_t m = 1; m <= betas_.size(); ++m) {
      const double b = betas_[m - 1];
      if (!(b > 0.0 && b < 1.0)) throw std::invalid_argument("DiscreteSchedule: betas must lie in (0, 1)");
      abar_[m] = abar_[m - 1] * (1.0 - b);
    }
  }

  static DiscreteSchedule uniform(int M, double beta) { return DiscreteSchedule(Vec(static_cast<std::size_t>(M), beta)); }

  int M() const { return static_cast<int>(betas_.size()); }
  double beta(int m) const { return betas_.at(check(m, 1) - 1); }
  double alpha(int m) const { return 1.0 - beta(m); }
  double abar(int m) const { return abar_.at(check(m, 0)); }
  double sigma(int m) const { return std::sqrt(1.0 - abar(m)); }
  /// beta_1 + ... + beta_m, the continuous time attached to index m.
  double accumulated_time(int m) const {
    double s = 0.0;
    for (int i = 1; i <= check(m, 0); ++i) s += betas_[i - 1];
    return s;
  }

 private:
  int check(int m, int lo) const {
    if (m < lo || m > M()) throw std::out_of_range("DiscreteSchedule: index " + std::to_string(m) + " out of range");
    return m;
  }
  Vec betas_;
  Vec abar_;
};

using EpsFn = std::function<Vec(const Vec& y, int m)>;

/// eps_m(y) = -sigma_m score at signal level abar_m.
inline EpsFn mixture_eps(const GaussianMixture& mix, const DiscreteSchedule& sched) {
  return [mix, sched](const Vec& y, int m) {
    Vec s(y.size());
    score_abar<double>(mix, sched.abar(m), y, s);
    const double sg = sched.sigma(m);
    for (double& v : s) v *= -sg;
    return s;
  };
}

inline Vec ddpm_backward_step(const Vec& y, int m, const DiscreteSchedule& sched, const EpsFn& eps, const Vec& z) {
  if (m < 1 || m > sched.M()) throw std::out_of_range("ddpm_backward_step: m out of range");
  const double a = sched.alpha(m), b = sched.beta(m), sa = std::sqrt(a);
  const double coef = b / (sa * sched.sigma(m));
  const double noise = std::sqrt(b) * sched.sigma(m - 1) / sched.sigma(m);
  const Vec e = eps(y, m);
  Vec out(y.size());
  for (std::size_t r = 0; r < y.size(); ++r) out[r] = y[r] / sa - coef * e[r] + noise * z[r];
  return out;
}

inline Vec ddim_backward_step(const Vec& y, int m, const DiscreteSchedule& sched, const EpsFn& eps) {
  if (m < 1 || m > sched.M()) throw std::out_of_range("ddim_backward_step: m out of range");
  const double a = sched.alpha(m), ab_prev = sched.abar(m - 1);
  const double coef = std::sqrt(1.0 - ab_prev) - std::sqrt(std::max(0.0, 1.0 / a - ab_prev));
  const Vec e = eps(y, m);
  Vec out(y.size());
  for (std::size_t r = 0; r < y.size(); ++r) out[r] = y[r] / std::sqrt(a) + coef * e[r];
  return out;
}

/// y_m = sqrt(alpha_m) y_{m-1} + sqrt(beta_m) z.
inline Vec ddpm_forward_step(const Vec& y, int m, const DiscreteSchedule& sched, const Vec& z) {
  if (m < 1 || m > sched.M()) throw std::out_of_range("ddpm_forward_step: m out of range");
  const double sa = std::sqrt(sched.alpha(m)), sb = std::sqrt(sched.beta(m));
  Vec out(y.size());
  for (std::size_t r = 0; r < y.size(); ++r) out[r] = sa * y[r] + sb * z[r];
  return out;
}

enum class TimeMap { accumulated_beta, exact_abar };

struct GapRow {
  double beta = 0.0;
  double ddpm_drift_gap = 0.0;  // mean ||DDPM - EM|| with z = 0
  double ddpm_full_gap = 0.0;   // mean ||DDPM - EM|| with shared z
  double ddim_gap = 0.0;        // mean ||DDIM - Euler||
};

struct GapReport {
  std::vector<GapRow> rows;
  Vec ddpm_drift_ratio;  // gap(beta) / gap(beta / 2) for consecutive rows
  Vec ddpm_full_ratio;
  Vec ddim_ratio;
};

/// Per-step gap between the discrete updates and EM / Euler steps of size beta
/// for the continuous backward dynamics, averaged over random states at the
/// continuous times `times` (index m = round(t / beta)).
inline GapReport discretization_gap_check(const GaussianMixture& mix, const Vec& betas, const Vec& times,
                                          int n_points, std::uint64_t seed, TimeMap map = TimeMap::accumulated_beta) {
  if (n_points < 1) throw std::invalid_argument("discretization_gap_check: n_points must be >= 1");
  const std::size_t d = mix.dim();
  GapReport rep;
  for (double beta : betas) {
    GapRow row;
    row.beta = beta;
    int count = 0;
    for (double tc : times) {
      const int m = std::max(1, static_cast<int>(std::llround(tc / beta)));
      const auto sched = DiscreteSchedule::uniform(m, beta);
      const auto eps = mixture_eps(mix, sched);
      const double t = map == TimeMap::accumulated_beta ? sched.accumulated_time(m) : -std::log(sched.abar(m));
      SplitMix rng(hash_key(seed, static_cast<std::uint64_t>(std::llround(tc * 1e6))));
      for (int s = 0; s < n_points; ++s) {
        Vec y(d), z(d), zero(d, 0.0);
        for (auto& v : y) v = rng.normal();
        for (auto& v : z) v = rng.normal();
        const Vec sde = backward_sde_drift(mix, t, y);
        const Vec ode = backward_ode_rhs(mix, t, y);
        const Vec p0 = ddpm_backward_step(y, m, sched, eps, zero);
        const Vec pz = ddpm_backward_step(y, m, sched, eps, z);
        const Vec di = ddim_backward_step(y, m, sched, eps);
        double g0 = 0.0, gz = 0.0, gi = 0.0;
        for (std::size_t r = 0; r < d; ++r) {
          const double em0 = y[r] + beta * sde[r];
          const double emz = em0 + std::sqrt(beta) * z[r];
          const double eu = y[r] + beta * ode[r];
          g0 += (p0[r] - em0) * (p0[r] - em0);
          gz += (pz[r] - emz) * (pz[r] - emz);
          gi += (di[r] - eu) * (di[r] - eu);
        }
        row.ddpm_drift_gap += std::sqrt(g0);
        row.ddpm_full_gap += std::sqrt(gz);
        row.ddim_gap += std::sqrt(gi);
        ++count;
      }
    }
    row.ddpm_drift_gap /= count;
    row.ddpm_full_gap /= count;
    row.ddim_gap /= count;
    rep.rows.push_back(row);
  }
  for (std::size_t i = 1; i < rep.rows.size(); ++i) {
    rep.ddpm_drift_ratio.push_back(rep.rows[i - 1].ddpm_drift_gap / rep.rows[i].ddpm_drift_gap);
    rep.ddpm_full_ratio.push_back(rep.rows[i - 1].ddpm_full_gap / rep.rows[i].ddpm_full_gap);
    rep.ddim_ratio.push_back(rep.rows[i - 1].ddim_gap / rep.rows[i].ddim_gap);
  }
  return rep;
}

}  // namespace mlem
