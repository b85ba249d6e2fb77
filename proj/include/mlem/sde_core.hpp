#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mlem/dual.hpp"
#include "mlem/random.hpp"

namespace mlem {

using Vec = std::vector<double>;

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline double norm2(std::span<const double> a) {
  double s = 0.0;
  for (double v : a) s += v * v;
  return std::sqrt(s);
}

/// Region over which sampled sup-norm and Lipschitz checks are performed.
struct SampleDomain {
  double t_lo = 0.0;
  double t_hi = 1.0;
  double radius = 2.0;  // states drawn uniformly from [-radius, radius]^d
};

/// Stack storage for small state vectors, heap beyond `kInline` entries.
class ScratchVec {
 public:
  static constexpr std::size_t kInline = 16;
  explicit ScratchVec(std::size_t n) : n_(n) {
    if (n > kInline) heap_.resize(n);
  }
  std::span<double> span() { return n_ > kInline ? std::span<double>(heap_) : std::span<double>(inline_.data(), n_); }
  double& operator[](std::size_t i) { return span()[i]; }

 private:
  std::size_t n_;
  std::array<double, kInline> inline_{};
  Vec heap_;
};

// ---------------------------------------------------------------------------
// Drift fields
// ---------------------------------------------------------------------------

/// A time-dependent vector field `f_t(x)` with a Jacobian-vector product and
/// declared Lipschitz / sup bounds. Immutable and cheap to copy.
class DriftField {
 public:
  using EvalFn = std::function<void(double, std::span<const double>, std::span<double>)>;
  using JvpFn = std::function<void(double, std::span<const double>, std::span<const double>,
                                   std::span<double>, std::span<double>)>;

  DriftField() = default;
  DriftField(std::size_t dim, EvalFn eval, JvpFn jvp, double lipschitz_bound, double sup_bound)
      : dim_(dim),
        eval_(std::move(eval)),
        jvp_(std::move(jvp)),
        lipschitz_(lipschitz_bound),
        sup_(sup_bound) {
    if (lipschitz_ < 0.0 || sup_ < 0.0) throw std::invalid_argument("DriftField: negative bound");
  }

  static DriftField zero(std::size_t dim) {
    DriftField f;
    f.dim_ = dim;
    f.zero_ = true;
    return f;
  }

  std::size_t dim() const { return dim_; }
  bool is_zero() const { return zero_; }
  double lipschitz_bound() const { return lipschitz_; }
  double sup_bound() const { return sup_; }

  void eval(double t, std::span<const double> x, std::span<double> out) const {
    if (zero_) {
      std::fill(out.begin(), out.end(), 0.0);
      return;
    }
    eval_(t, x, out);
  }

  Vec operator()(double t, std::span<const double> x) const {
    Vec out(dim_);
    eval(t, x, out);
    return out;
  }

  /// out = f_t(x), dout = Df_t(x) dx.
  void jvp(double t, std::span<const double> x, std::span<const double> dx, std::span<double> out,
           std::span<double> dout) const {
    if (zero_) {
      std::fill(out.begin(), out.end(), 0.0);
      std::fill(dout.begin(), dout.end(), 0.0);
      return;
    }
    jvp_(t, x, dx, out, dout);
  }

 private:
  std::size_t dim_ = 0;
  bool zero_ = false;
  EvalFn eval_;
  JvpFn jvp_;
  double lipschitz_ = 0.0;
  double sup_ = 0.0;
};

/// Builds a DriftField from a generic callable `f(t, span<const S> x, span<S> out)`
/// that is instantiated for both `double` and `Dual<double>`.
template <class F>
DriftField make_drift_field(std::size_t dim, F f, double lipschitz_bound, double sup_bound) {
  auto eval = [f](double t, std::span<const double> x, std::span<double> out) { f(t, x, out); };
  auto jvp = [f, dim](double t, std::span<const double> x, std::span<const double> dx,
                      std::span<double> out, std::span<double> dout) {
    thread_local std::vector<Dual<double>> xin, yout;
    xin.resize(dim);
    yout.resize(dim);
    for (std::size_t i = 0; i < dim; ++i) xin[i] = Dual<double>(x[i], dx[i]);
    f(t, std::span<const Dual<double>>(xin), std::span<Dual<double>>(yout));
    for (std::size_t i = 0; i < dim; ++i) {
      out[i] = yout[i].val;
      dout[i] = yout[i].d;
    }
  };
  return DriftField(dim, std::move(eval), std::move(jvp), lipschitz_bound, sup_bound);
}

/// `a + scale * b`, with bounds combined by the triangle inequality.
inline DriftField add_scaled(const DriftField& a, const DriftField& b, double scale) {
  if (a.dim() != b.dim()) throw std::invalid_argument("add_scaled: dimension mismatch");
  const std::size_t dim = a.dim();
  auto eval = [a, b, scale, dim](double t, std::span<const double> x, std::span<double> out) {
    ScratchVec tmp(dim);
    a.eval(t, x, out);
    b.eval(t, x, tmp.span());
    for (std::size_t i = 0; i < dim; ++i) out[i] += scale * tmp[i];
  };
  auto jvp = [a, b, scale, dim](double t, std::span<const double> x, std::span<const double> dx,
                                std::span<double> out, std::span<double> dout) {
    ScratchVec tmp(dim), dtmp(dim);
    a.jvp(t, x, dx, out, dout);
    b.jvp(t, x, dx, tmp.span(), dtmp.span());
    for (std::size_t i = 0; i < dim; ++i) {
      out[i] += scale * tmp[i];
      dout[i] += scale * dtmp[i];
    }
  };
  const double s = std::abs(scale);
  return DriftField(dim, std::move(eval), std::move(jvp),
                    a.lipschitz_bound() + s * b.lipschitz_bound(), a.sup_bound() + s * b.sup_bound());
}

/// Linear mean-reverting drift `-rate * x` (Ornstein-Uhlenbeck). The sup bound
/// refers to states with coordinates in [-radius, radius].
inline DriftField ou_drift(std::size_t dim, double rate, double radius = 2.0) {
  auto f = [rate](double, auto x, auto out) {
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = -rate * x[i];
  };
  return make_drift_field(dim, f, std::abs(rate),
                          std::abs(rate) * radius * std::sqrt(static_cast<double>(dim)));
}

/// Smooth vector perturbation `u(t, x)` with `||u||_2 <= 1` everywhere:
/// coordinate i is `sum_j a_ij sin(w_ij . x + nu_ij t + phi_ij)` with
/// `sum_j a_ij = 1/sqrt(d)`. With one term per coordinate the bound is attained.
class SinusoidPerturbation {
 public:
  SinusoidPerturbation(std::size_t dim, std::uint64_t seed, double frequency, int terms)
      : dim_(dim), terms_(terms) {
    if (terms < 1) throw std::invalid_argument("SinusoidPerturbation: terms must be >= 1");
    SplitMix rng(seed);
    const double row_mass = 1.0 / std::sqrt(static_cast<double>(dim));
    amp_.resize(dim * terms);
    omega_.resize(dim * terms * dim);
    nu_.resize(dim * terms);
    phase_.resize(dim * terms);
    double lip_sq = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      double mass = 0.0;
      for (int j = 0; j < terms; ++j) {
        const std::size_t ij = i * terms + j;
        amp_[ij] = 0.5 + 0.5 * rng.uniform();
        mass += amp_[ij];
      }
      double row_lip = 0.0;
      for (int j = 0; j < terms; ++j) {
        const std::size_t ij = i * terms + j;
        amp_[ij] *= row_mass / mass;
        double n2 = 0.0;
        for (std::size_t m = 0; m < dim; ++m) {
          omega_[ij * dim + m] = rng.normal();
          n2 += omega_[ij * dim + m] * omega_[ij * dim + m];
        }
        const double target = frequency * (0.5 + 0.5 * rng.uniform());
        const double scale = n2 > 0.0 ? target / std::sqrt(n2) : 0.0;
        for (std::size_t m = 0; m < dim; ++m) omega_[ij * dim + m] *= scale;
        nu_[ij] = frequency * (2.0 * rng.uniform() - 1.0);
        phase_[ij] = 2.0 * std::numbers::pi * rng.uniform();
        row_lip += amp_[ij] * target;
      }
      lip_sq += row_lip * row_lip;
    }
    lipschitz_ = std::sqrt(lip_sq);
  }

  double lipschitz_bound() const { return lipschitz_; }

  template <class S>
  void operator()(double t, std::span<const S> x, std::span<S> out) const {
    using std::sin;
    for (std::size_t i = 0; i < dim_; ++i) {
      S acc(0.0);
      for (int j = 0; j < terms_; ++j) {
        const std::size_t ij = i * terms_ + j;
        S arg(nu_[ij] * t + phase_[ij]);
        for (std::size_t m = 0; m < dim_; ++m) arg += omega_[ij * dim_ + m] * x[m];
        acc += amp_[ij] * sin(arg);
      }
      out[i] = acc;
    }
  }

 private:
  std::size_t dim_;
  int terms_;
  Vec amp_, omega_, nu_, phase_;
  double lipschitz_ = 0.0;
};

// ---------------------------------------------------------------------------
// Estimator ladder
// ---------------------------------------------------------------------------

/// Family of drift estimators `f^k`, k = k_min-1 .. k_max, with sup-error
/// `2^-k` and modeled cost `c^gamma 2^(gamma k)`. Level k_min-1 is the zero
/// field and costs nothing.
class DriftLadder {
 public:
  DriftLadder() = default;
  DriftLadder(int k_min, int k_max, double c, double gamma, std::vector<DriftField> levels,
              std::optional<DriftField> truth = std::nullopt)
      : k_min_(k_min), k_max_(k_max), c_(c), gamma_(gamma), levels_(std::move(levels)),
        truth_(std::move(truth)) {
    if (!(gamma > 0.0)) throw std::invalid_argument("DriftLadder: gamma must be positive");
    if (!(c > 0.0)) throw std::invalid_argument("DriftLadder: c must be positive");
    if (k_min > k_max) throw std::invalid_argument("DriftLadder: empty level range");
    if (levels_.size() != static_cast<std::size_t>(k_max - k_min + 2))
      throw std::invalid_argument("DriftLadder: expected k_max - k_min + 2 fields");
    for (const auto& f : levels_)
      if (f.dim() != levels_.front().dim()) throw std::invalid_argument("DriftLadder: mixed dimensions");
  }

  int k_min() const { return k_min_; }
  int k_max() const { return k_max_; }
  double c() const { return c_; }
  double gamma() const { return gamma_; }
  std::size_t dim() const { return levels_.front().dim(); }
  int num_levels() const { return k_max_ - k_min_ + 1; }
  bool contains(int k) const { return k >= k_min_ - 1 && k <= k_max_; }

  const DriftField& level(int k) const {
    if (!contains(k)) throw std::out_of_range("DriftLadder: level " + std::to_string(k) + " out of range");
    return levels_[static_cast<std::size_t>(k - (k_min_ - 1))];
  }

  double error_bound(int k) const { return std::ldexp(1.0, -k); }

  double cost_units(int k) const {
    if (!contains(k)) throw std::out_of_range("DriftLadder: level " + std::to_string(k) + " out of range");
    if (level(k).is_zero()) return 0.0;
    return std::pow(c_, gamma_) * std::exp2(gamma_ * k);
  }

  const DriftField* truth() const { return truth_ ? &*truth_ : nullptr; }

  /// Largest declared Lipschitz bound over all levels and the truth.
  double lipschitz_bound() const {
    double l = truth_ ? truth_->lipschitz_bound() : 0.0;
    for (const auto& f : levels_) l = std::max(l, f.lipschitz_bound());
    return l;
  }

 private:
  int k_min_ = 0;
  int k_max_ = 0;
  double c_ = 1.0;
  double gamma_ = 1.0;
  std::vector<DriftField> levels_;
  std::optional<DriftField> truth_;
};

struct SyntheticLadderOptions {
  double frequency = 1.0;  // spatial/temporal frequency scale of the perturbations
  int terms = 1;           // sinusoids per coordinate
  bool shared_shape = false;  // one perturbation shape for every level
  double envelope_rate = 0.0;  // u_k is multiplied by exp(-envelope_rate * |t|)
};

/// `f^k = truth + 2^-k u_k` with seed-derived sinusoidal perturbations `u_k`.
inline DriftLadder make_synthetic_ladder(const DriftField& truth, double c, double gamma, int k_min,
                                         int k_max, std::uint64_t perturb_seed,
                                         const SyntheticLadderOptions& opts = {}) {
  if (!(gamma > 0.0)) throw std::invalid_argument("make_synthetic_ladder: gamma must be positive");
  if (!(c > 0.0)) throw std::invalid_argument("make_synthetic_ladder: c must be positive");
  if (k_min > k_max) throw std::invalid_argument("make_synthetic_ladder: empty level range");
  if (!(opts.envelope_rate >= 0.0)) throw std::invalid_argument("make_synthetic_ladder: envelope_rate must be >= 0");
  const std::size_t dim = truth.dim();
  std::vector<DriftField> levels;
  levels.reserve(static_cast<std::size_t>(k_max - k_min + 2));
  levels.push_back(DriftField::zero(dim));
  for (int k = k_min; k <= k_max; ++k) {
    const std::uint64_t key = opts.shared_shape ? 0 : static_cast<std::uint64_t>(k - k_min + 1);
    SinusoidPerturbation u(dim, hash_key(perturb_seed, static_cast<std::uint64_t>(Domain::perturbation), key),
                           opts.frequency, opts.terms);
    const double lip = u.lipschitz_bound();
    DriftField pert = opts.envelope_rate == 0.0
                          ? make_drift_field(dim, std::move(u), lip, 1.0)
                          : make_drift_field(
                                dim,
                                [u = std::move(u), r = opts.envelope_rate](double t, auto x, auto out) {
                                  u(t, x, out);
                                  const double e = std::exp(-r * std::abs(t));
                                  for (auto& o : out) o *= e;
                                },
                                lip, 1.0);
    levels.push_back(add_scaled(truth, pert, std::ldexp(1.0, -k)));
  }
  return DriftLadder(k_min, k_max, c, gamma, std::move(levels), truth);
}

// ---------------------------------------------------------------------------
// Noise
// ---------------------------------------------------------------------------

/// Isotropic noise scale `sigma(t)`; identically zero encodes an ODE.
struct NoiseSchedule {
  std::function<double(double)> fn;
  bool zero = false;

  static NoiseSchedule constant(double s) {
    if (s < 0.0) throw std::invalid_argument("NoiseSchedule: negative sigma");
    NoiseSchedule n;
    n.fn = [s](double) { return s; };
    n.zero = (s == 0.0);
    return n;
  }
  static NoiseSchedule none() { return constant(0.0); }

  double operator()(double t) const { return zero ? 0.0 : fn(t); }
};

/// Deterministic source of standard-normal increments keyed by (stream, step).
struct NoiseDriver {
  std::uint64_t master_seed = 0;
  std::size_t dim = 1;

  void increment(std::uint64_t stream, std::uint64_t step, std::span<double> out) const {
    keyed_normals(master_seed, Domain::brownian, stream, step, out);
  }
  void normal(Domain domain, std::uint64_t stream, std::uint64_t index, std::span<double> out) const {
    keyed_normals(master_seed, domain, stream, index, out);
  }
};

inline Vec noise_increment(const NoiseDriver& driver, std::uint64_t stream, std::int64_t step_index) {
  if (step_index < 0) throw std::invalid_argument("noise_increment: negative step index");
  Vec z(driver.dim);
  driver.increment(stream, static_cast<std::uint64_t>(step_index), z);
  return z;
}

/// Increments on a grid `stride` times coarser than the driver's base grid:
/// each coarse normal is the normalised sum of `stride` base normals, so every
/// grid sees the same underlying Brownian path.
class BrownianView {
 public:
  BrownianView(const NoiseDriver& driver, std::uint64_t stream, int stride = 1)
      : driver_(&driver), stream_(stream), stride_(stride) {
    if (stride < 1) throw std::invalid_argument("BrownianView: stride must be >= 1");
  }

  void operator()(int step, std::span<double> out) const {
    if (stride_ == 1) {
      driver_->increment(stream_, static_cast<std::uint64_t>(step), out);
      return;
    }
    thread_local Vec tmp;
    tmp.resize(out.size());
    std::fill(out.begin(), out.end(), 0.0);
    for (int j = 0; j < stride_; ++j) {
      driver_->increment(stream_, static_cast<std::uint64_t>(step) * stride_ + j, tmp);
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += tmp[i];
    }
    const double s = 1.0 / std::sqrt(static_cast<double>(stride_));
    for (double& v : out) v *= s;
  }

 private:
  const NoiseDriver* driver_;
  std::uint64_t stream_;
  int stride_;
};

/// Materialised base-grid normals for one stream; views at coarser strides
/// reproduce exactly what BrownianView would return.
class CachedBrownian {
 public:
  CachedBrownian(const NoiseDriver& driver, std::uint64_t stream, int base_steps)
      : dim_(driver.dim), base_steps_(base_steps), z_(static_cast<std::size_t>(base_steps) * driver.dim) {
    for (int i = 0; i < base_steps; ++i)
      driver.increment(stream, static_cast<std::uint64_t>(i),
                       std::span<double>(z_).subspan(static_cast<std::size_t>(i) * dim_, dim_));
  }

  int base_steps() const { return base_steps_; }

  std::span<const double> base(int i) const {
    return std::span<const double>(z_).subspan(static_cast<std::size_t>(i) * dim_, dim_);
  }

  class View {
   public:
    View(const CachedBrownian& src, int stride) : src_(&src), stride_(stride) {}
    void operator()(int step, std::span<double> out) const {
      std::fill(out.begin(), out.end(), 0.0);
      for (int j = 0; j < stride_; ++j) {
        auto z = src_->base(step * stride_ + j);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += z[i];
      }
      if (stride_ > 1) {
        const double s = 1.0 / std::sqrt(static_cast<double>(stride_));
        for (double& v : out) v *= s;
      }
    }

   private:
    const CachedBrownian* src_;
    int stride_;
  };

  View view(int n_steps) const {
    if (n_steps < 1 || base_steps_ % n_steps != 0)
      throw std::invalid_argument("CachedBrownian: step count must divide the base grid");
    return View(*this, base_steps_ / n_steps);
  }

 private:
  std::size_t dim_;
  int base_steps_;
  Vec z_;
};

template <class N>
concept NoiseSource = requires(const N& n, int step, std::span<double> out) { n(step, out); };

// ---------------------------------------------------------------------------
// Trajectories and cost accounting
// ---------------------------------------------------------------------------

struct CostRecord {
  int step = 0;
  int level = 0;
  double cost = 0.0;
  bool companion = false;  // evaluated only as the lower half of a difference f^k - f^{k-1}
};

/// Accounting of ladder evaluations. `total()` counts every evaluation;
/// `drawn_total()` omits companion evaluations.
class CostLedger {
 public:
  explicit CostLedger(bool keep_records = true) : keep_(keep_records) {}

  void record(int step, int level, double cost, bool companion = false) {
    total_ += cost;
    if (!companion) drawn_total_ += cost;
    ++evaluations_;
    if (keep_) records_.push_back({step, level, cost, companion});
  }

  void merge(const CostLedger& other) {
    total_ += other.total_;
    drawn_total_ += other.drawn_total_;
    evaluations_ += other.evaluations_;
    if (keep_) records_.insert(records_.end(), other.records_.begin(), other.records_.end());
  }

  double total() const { return total_; }
  double drawn_total() const { return drawn_total_; }
  std::size_t evaluations() const { return evaluations_; }
  const std::vector<CostRecord>& records() const { return records_; }

  std::size_t count(int level) const {
    return static_cast<std::size_t>(std::count_if(records_.begin(), records_.end(),
                                                  [level](const CostRecord& r) { return r.level == level; }));
  }

 private:
  bool keep_;
  double total_ = 0.0;
  double drawn_total_ = 0.0;
  std::size_t evaluations_ = 0;
  std::vector<CostRecord> records_;
};

struct Trajectory {
  Vec times;
  std::vector<Vec> states;
  CostLedger ledger;

  const Vec& final_state() const { return states.back(); }
};

// ---------------------------------------------------------------------------
// Problems
// ---------------------------------------------------------------------------

enum class Direction { forward, backward };

/// An SDE `dx = f_t(x) dt + sigma_t dW` whose drift is available through a ladder.
/// Ladder fields are drifts in the direction of integration: a backward
/// problem starts at `t_start` and its step i is taken at time `t_start - i*eta`.
struct SdeProblem {
  DriftLadder ladder;
  NoiseSchedule sigma = NoiseSchedule::none();
  double t_start = 0.0;
  double horizon = 1.0;
  Direction direction = Direction::forward;
  Vec x0;                       // fixed initial state (ignored when random_initial)
  bool random_initial = false;  // x0 ~ N(0, I) drawn from the noise stream
  int noise_base_steps = 0;     // finest noise grid; 0 means each run uses its own grid

  std::size_t dim() const { return ladder.dim(); }

  double eta(int n_steps) const { return horizon / n_steps; }

  double time_at(int step, int n_steps) const {
    const double dt = eta(n_steps) * step;
    return direction == Direction::forward ? t_start + dt : t_start - dt;
  }

  int stride(int n_steps) const {
    if (n_steps < 1) throw std::invalid_argument("SdeProblem: n_steps must be >= 1");
    if (noise_base_steps == 0) return 1;
    if (noise_base_steps % n_steps != 0)
      throw std::invalid_argument("SdeProblem: n_steps=" + std::to_string(n_steps) +
                                  " does not divide the noise grid " + std::to_string(noise_base_steps));
    return noise_base_steps / n_steps;
  }

  Vec initial_state(const NoiseDriver& driver, std::uint64_t stream) const {
    if (!random_initial) {
      if (x0.size() != dim()) throw std::invalid_argument("SdeProblem: x0 has wrong dimension");
      return x0;
    }
    Vec x(dim());
    driver.normal(Domain::initial_state, stream, 0, x);
    return x;
  }

  BrownianView noise(const NoiseDriver& driver, std::uint64_t stream, int n_steps) const {
    return BrownianView(driver, stream, stride(n_steps));
  }
};

// ---------------------------------------------------------------------------
// Reference solution and ladder diagnostics
// ---------------------------------------------------------------------------

/// Exact-in-distribution solution of `dx = -a x dt + sigma dW` at time t on the
/// grid of step `eta`, conditioned on the driver's Brownian increments. Each
/// step adds the conditional mean of the stochastic convolution given the
/// increment plus an independent residual drawn from a separate key domain.
inline Vec exact_ou_solution(const Vec& x0, double a, double sigma, double t, const NoiseDriver& driver,
                             std::uint64_t stream, double eta) {
  if (!(eta > 0.0)) throw std::invalid_argument("exact_ou_solution: eta must be positive");
  if (a < 0.0) throw std::invalid_argument("exact_ou_solution: rate must be nonnegative");
  const double steps_real = t / eta;
  const long long n = std::llround(steps_real);
  if (n < 0 || std::abs(steps_real - static_cast<double>(n)) > 1e-9 * std::max(1.0, steps_real))
    throw std::invalid_argument("exact_ou_solution: t is not on the eta grid");

  const double h = a * eta;
  const double decay = std::exp(-h);
  // Conditional-mean weight of dW and residual variance (per unit sigma^2).
  double w = 1.0, resid_var = 0.0;
  if (h > 0.0) {
    const double b = -std::expm1(-h) / h;
    const double aa = -std::expm1(-2.0 * h) / (2.0 * h);
    w = b;
    resid_var = std::max(0.0, eta * (aa - b * b));
  }
  const double resid_sd = std::sqrt(resid_var);
  const double sq_eta = std::sqrt(eta);

  Vec x = x0;
  Vec z(x0.size()), r(x0.size());
  for (long long i = 0; i < n; ++i) {
    const double dx_noise = sigma;
    if (sigma != 0.0) {
      driver.increment(stream, static_cast<std::uint64_t>(i), z);
      driver.normal(Domain::ou_residual, stream, static_cast<std::uint64_t>(i), r);
    }
    for (std::size_t j = 0; j < x.size(); ++j) {
      x[j] *= decay;
      if (sigma != 0.0) x[j] += dx_noise * (w * sq_eta * z[j] + resid_sd * r[j]);
    }
  }
  return x;
}

struct LevelErrorRow {
  int k = 0;
  double measured_error = 0.0;  // max over samples of ||f^k - truth||_2
  double cost_units = 0.0;
};

/// Dense random sampling of the per-level sup error against `truth`.
inline std::vector<LevelErrorRow> ladder_error_report(const DriftLadder& ladder, const DriftField& truth,
                                                      int n_samples, const SampleDomain& domain = {},
                                                      std::uint64_t seed = 0x5eed) {
  if (n_samples < 1) throw std::invalid_argument("ladder_error_report: n_samples must be >= 1");
  const std::size_t d = ladder.dim();
  std::vector<LevelErrorRow> rows;
  for (int k = ladder.k_min(); k <= ladder.k_max(); ++k) rows.push_back({k, 0.0, ladder.cost_units(k)});
  SplitMix rng(seed);
  Vec x(d), ft(d), fk(d);
  for (int s = 0; s < n_samples; ++s) {
    const double t = domain.t_lo + (domain.t_hi - domain.t_lo) * rng.uniform();
    for (double& v : x) v = domain.radius * (2.0 * rng.uniform() - 1.0);
    truth.eval(t, x, ft);
    for (auto& row : rows) {
      ladder.level(row.k).eval(t, x, fk);
      row.measured_error = std::max(row.measured_error, std::sqrt(squared_distance(fk, ft)));
    }
  }
  return rows;
}

/// Largest observed ratio ||f(x) - f(x')|| / ||x - x'|| over random nearby pairs.
inline double sampled_lipschitz(const DriftField& f, int n_pairs, const SampleDomain& domain = {},
                                std::uint64_t seed = 0x11b, double spread = 0.25) {
  const std::size_t d = f.dim();
  SplitMix rng(seed);
  Vec x(d), y(d), fx(d), fy(d);
  double best = 0.0;
  for (int s = 0; s < n_pairs; ++s) {
    const double t = domain.t_lo + (domain.t_hi - domain.t_lo) * rng.uniform();
    for (std::size_t i = 0; i < d; ++i) {
      x[i] = domain.radius * (2.0 * rng.uniform() - 1.0);
      y[i] = x[i] + spread * rng.normal();
    }
    const double dx = std::sqrt(squared_distance(x, y));
    if (dx == 0.0) continue;
    f.eval(t, x, fx);
    f.eval(t, y, fy);
    best = std::max(best, std::sqrt(squared_distance(fx, fy)) / dx);
  }
  return best;
}

}  // namespace mlem
