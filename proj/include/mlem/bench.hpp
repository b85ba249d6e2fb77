#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mlem/adaptive_probs.hpp"
#include "mlem/config.hpp"
#include "mlem/diffusion_toy.hpp"
#include "mlem/em_solver.hpp"
#include "mlem/mlem_solver.hpp"
#include "mlem/schedule.hpp"
#include "mlem/sde_core.hpp"
#include "mlem/theory.hpp"

namespace mlem {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// ---------------------------------------------------------------------------
// Result rows
// ---------------------------------------------------------------------------

struct ResultRow {
  std::string method;
  std::string schedule;
  double eps_target = kNaN;
  double mse = kNaN;
  double expected_cost = kNaN;
  double ledger_cost = kNaN;
  double wall_ms = kNaN;
  int n_steps = 0;
  int trial = 0;
  std::optional<std::uint64_t> plan_seed;
};

inline constexpr const char* kResultHeader =
    "method,schedule,eps_target,mse,expected_cost,ledger_cost,wall_ms,n_steps,trial,plan_seed";

inline std::string to_csv_line(const ResultRow& r) {
  std::string s = r.method + "," + r.schedule + "," + format_double(r.eps_target) + "," + format_double(r.mse) +
                  "," + format_double(r.expected_cost) + "," + format_double(r.ledger_cost) + "," +
                  format_double(r.wall_ms) + "," + std::to_string(r.n_steps) + "," + std::to_string(r.trial) + ",";
  s += r.plan_seed ? std::to_string(*r.plan_seed) : "nan";
  return s;
}

inline void write_results(const std::vector<ResultRow>& rows, std::ostream& out) {
  out << kResultHeader << "\n";
  for (const auto& r : rows) out << to_csv_line(r) << "\n";
}

inline void write_results(const std::vector<ResultRow>& rows, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_results: cannot open " + path);
  write_results(rows, f);
  f.flush();
  if (!f) throw std::runtime_error("write_results: write failed for " + path);
}

inline std::vector<ResultRow> read_results(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kResultHeader) throw std::invalid_argument("read_results: bad CSV header");
  std::vector<ResultRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 10) throw std::invalid_argument("read_results: line " + std::to_string(lineno) + " has wrong arity");
    ResultRow r;
    r.method = f[0];
    r.schedule = f[1];
    r.eps_target = parse_double(f[2]);
    r.mse = parse_double(f[3]);
    r.expected_cost = parse_double(f[4]);
    r.ledger_cost = parse_double(f[5]);
    r.wall_ms = parse_double(f[6]);
    r.n_steps = std::stoi(f[7]);
    r.trial = std::stoi(f[8]);
    if (f[9] != "nan") r.plan_seed = std::stoull(f[9]);
    rows.push_back(r);
  }
  return rows;
}

inline std::vector<ResultRow> read_results(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("read_results: cannot open " + path);
  return read_results(f);
}

// ---------------------------------------------------------------------------
// Scaling-exponent fit
// ---------------------------------------------------------------------------

struct GammaFit {
  double gamma_hat = kNaN;
  double slope = kNaN;
  double intercept = kNaN;
  double r2 = kNaN;
  std::size_t n = 0;
};

/// Least-squares line through (x, y).
inline GammaFit linear_fit(const Vec& x, const Vec& y) {
  const std::size_t n = x.size();
  if (n < 2 || y.size() != n) throw std::invalid_argument("linear_fit: need at least two paired points");
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0) throw std::invalid_argument("linear_fit: degenerate abscissae");
  GammaFit f;
  f.n = n;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.r2 = syy == 0.0 ? 1.0 : (sxy * sxy) / (sxx * syy);
  return f;
}

struct CostError {
  double cost = 0.0;
  double error = 0.0;
};

/// Slope of log(error - floor) against log(cost); gamma_hat = -1 / slope.
inline GammaFit fit_gamma(const std::vector<CostError>& pts, double error_floor) {
  if (pts.size() < 3) throw std::invalid_argument("fit_gamma: need at least 3 points");
  Vec x, y;
  for (const auto& p : pts) {
    const double adj = p.error - error_floor;
    if (!(adj > 0.0)) throw std::invalid_argument("fit_gamma: error at or below the floor");
    if (!(p.cost > 0.0)) throw std::invalid_argument("fit_gamma: nonpositive cost");
    x.push_back(std::log(p.cost));
    y.push_back(std::log(adj));
  }
  GammaFit f = linear_fit(x, y);
  f.gamma_hat = -1.0 / f.slope;
  return f;
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class ProblemType { ou, mixture_ddpm, mixture_ddim };

struct ProblemSpec {
  ProblemType type = ProblemType::ou;
  int dim = 2;
  double rate = 1.0;
  double sigma = 0.5;
  Vec x0 = {0.5, -0.3};
  double horizon = 1.0;
  std::string mixture;  // path of a mixture file
  double T = 3.0;
  double t_min = 1e-2;
};

struct LadderSpec {
  double c = 1.0;
  double gamma = 3.0;
  int k_min = 0;
  int k_max = 5;
  std::uint64_t seed = 11;
  double frequency = 1.0;
  int terms = 1;
  bool shared_shape = false;
  double envelope_rate = 0.0;
};

struct SolverSpec {
  std::vector<std::string> methods = {"em", "mlem"};
  std::string schedule = "theorem";
  Vec constants = {1.0};
  Vec shifts = {};        // learned schedules: beta shifts instead of constants
  double exponent = 2.5;  // power_law rate or inverse_cost exponent
  std::string schedule_file;
  std::vector<int> levels;      // ML-EM levels (empty = {1, 3, 5} when available, else whole ladder)
  std::vector<int> n_steps = {100};
  std::vector<int> em_levels;  // empty = whole ladder
  int trials = 15;
  int batch = 1;
  bool shared_bernoulli = true;
  std::string reference = "top";  // top | exact
  int reference_steps = 1000;
  CostAccounting accounting = CostAccounting::drawn;
};

struct TheoremSpec {
  Vec eps = {0.1, 0.05, 0.02, 0.01};
  int n_steps = 100;
  int runs = 200;
  KmaxRule rule = KmaxRule::proof;
};

struct ScalingSpec {
  Vec eps = {0.1, 0.05, 0.02, 0.01};
  int base_steps = 2880;
  int paths = 200;
  std::vector<int> n_candidates = {6, 8, 10, 12, 15, 18, 20, 24, 30, 36, 40, 45, 48, 60, 72, 80, 90, 96, 120, 144, 160, 180, 240, 288, 360, 480, 576, 720};
  int kmax_lo = 1;
  int kmax_hi = 11;
  double beta = 2.5;
  int bisection_iters = 14;
  std::vector<std::uint64_t> ladder_seeds;  // empty = ladder.seed only; costs are averaged over seeds
};

struct TrainSpec {
  double lambda = 0.1;
  int steps = 50;
  int batch = 300;
  double learning_rate = 1.0;
  std::uint64_t seed = 5;
  double init_constant = 1.0;  // initial p_k = C 2^{-(1 + gamma/2) k} (clipped)
  double delta = 0.1;
  std::string output;  // schedule file written after training
};

struct AdaptiveSpec {
  Vec cost_fractions = {0.02, 0.04, 0.08, 0.16, 0.32};  // of n_steps * cost(top level)
  int eval_batch = 400;
  std::uint64_t eval_seed = 77;
};

struct DdpmCheckSpec {
  Vec betas = {0.02, 0.01, 0.005};
  Vec times = {0.5, 1.0, 2.0};
  int points = 200;
  std::uint64_t seed = 3;
  TimeMap map = TimeMap::accumulated_beta;
};

struct ExperimentConfig {
  std::string kind = "sweep";  // sweep | theorem | scaling | adaptive | train | ddpm-check
  std::string output;
  std::uint64_t seed = 1;       // master noise seed
  std::uint64_t plan_seed = 7;  // base Bernoulli plan seed
  std::string base_dir = ".";   // relative paths resolve against the config file's directory
  ProblemSpec problem;
  LadderSpec ladder;
  SolverSpec solver;
  TheoremSpec theorem;
  ScalingSpec scaling;
  TrainSpec train;
  AdaptiveSpec adaptive;
  DdpmCheckSpec ddpm;

  std::string resolve(const std::string& p) const {
    if (p.empty() || std::filesystem::path(p).is_absolute()) return p;
    return (std::filesystem::path(base_dir) / p).string();
  }
};

namespace detail {
inline std::vector<std::string> get_strings(const Config& c, const std::string& key, std::vector<std::string> def) {
  if (!c.has(key)) return def;
  return split_list(c.get_string(key, ""));
}
template <class E>
E pick(const std::string& key, const std::string& v, std::initializer_list<std::pair<const char*, E>> opts) {
  for (const auto& [name, e] : opts)
    if (v == name) return e;
  std::string msg = "config: key '" + key + "' has invalid value '" + v + "' (expected";
  for (const auto& [name, e] : opts) msg += std::string(" ") + name;
  throw std::invalid_argument(msg + ")");
}
}  // namespace detail

/// Reads every known key, validates ranges and rejects unknown keys.
inline ExperimentConfig parse_experiment(const Config& c, const std::string& base_dir = ".") {
  ExperimentConfig e;
  e.base_dir = base_dir;
  e.kind = c.get_string("experiment.kind", e.kind);
  e.output = c.get_string("experiment.output", e.output);
  e.seed = c.get_u64("experiment.seed", e.seed);
  e.plan_seed = c.get_u64("experiment.plan_seed", e.plan_seed);
  detail::pick<int>("experiment.kind", e.kind,
                    {{"sweep", 0}, {"theorem", 0}, {"scaling", 0}, {"adaptive", 0}, {"train", 0}, {"ddpm-check", 0}});

  auto& p = e.problem;
  p.type = detail::pick<ProblemType>("problem.type", c.get_string("problem.type", "ou"),
                                     {{"ou", ProblemType::ou},
                                      {"mixture-ddpm", ProblemType::mixture_ddpm},
                                      {"mixture-ddim", ProblemType::mixture_ddim}});
  p.dim = static_cast<int>(c.get_int("problem.dim", p.dim));
  p.rate = c.get_double("problem.rate", p.rate);
  p.sigma = c.get_double("problem.sigma", p.sigma);
  p.x0 = c.get_doubles("problem.x0", p.x0);
  p.horizon = c.get_double("problem.horizon", p.horizon);
  p.mixture = c.get_string("problem.mixture", p.mixture);
  p.T = c.get_double("problem.T", p.T);
  p.t_min = c.get_double("problem.t_min", p.t_min);
  if (p.dim < 1) throw std::invalid_argument("config: problem.dim must be >= 1");
  if (p.type == ProblemType::ou) {
    if (p.x0.size() != static_cast<std::size_t>(p.dim))
      throw std::invalid_argument("config: problem.x0 must have problem.dim entries");
    if (!(p.horizon > 0.0)) throw std::invalid_argument("config: problem.horizon must be positive");
    if (p.sigma < 0.0 || p.rate < 0.0) throw std::invalid_argument("config: problem.rate/sigma must be >= 0");
  } else {
    if (p.mixture.empty()) throw std::invalid_argument("config: mixture problems need problem.mixture");
    if (!(p.T > p.t_min && p.t_min > 0.0)) throw std::invalid_argument("config: need problem.T > problem.t_min > 0");
  }

  auto& l = e.ladder;
  l.c = c.get_double("ladder.c", l.c);
  l.gamma = c.get_double("ladder.gamma", l.gamma);
  l.k_min = static_cast<int>(c.get_int("ladder.k_min", l.k_min));
  l.k_max = static_cast<int>(c.get_int("ladder.k_max", l.k_max));
  l.seed = c.get_u64("ladder.seed", l.seed);
  l.frequency = c.get_double("ladder.frequency", l.frequency);
  l.terms = static_cast<int>(c.get_int("ladder.terms", l.terms));
  l.shared_shape = c.get_bool("ladder.shared_shape", l.shared_shape);
  l.envelope_rate = c.get_double("ladder.envelope_rate", l.envelope_rate);
  if (!(l.c > 0.0) || !(l.gamma > 0.0)) throw std::invalid_argument("config: ladder.c and ladder.gamma must be positive");
  if (l.k_min > l.k_max) throw std::invalid_argument("config: ladder.k_min > ladder.k_max");

  auto& s = e.solver;
  s.methods = detail::get_strings(c, "solver.methods", s.methods);
  for (const auto& m : s.methods) detail::pick<int>("solver.methods", m, {{"em", 0}, {"mlem", 0}});
  s.schedule = c.get_string("solver.schedule", s.schedule);
  detail::pick<int>("solver.schedule", s.schedule,
                    {{"theorem", 0}, {"power_law", 0}, {"inverse_cost", 0}, {"learned", 0}, {"constant", 0}});
  s.constants = c.get_doubles("solver.constants", s.constants);
  s.shifts = c.get_doubles("solver.shifts", s.shifts);
  s.exponent = c.get_double("solver.exponent", s.exponent);
  s.schedule_file = c.get_string("solver.schedule_file", s.schedule_file);
  s.levels = c.get_ints("solver.levels", s.levels);
  s.n_steps = c.get_ints("solver.n_steps", s.n_steps);
  s.em_levels = c.get_ints("solver.em_levels", s.em_levels);
  s.trials = static_cast<int>(c.get_int("solver.trials", s.trials));
  s.batch = static_cast<int>(c.get_int("solver.batch", s.batch));
  s.shared_bernoulli = c.get_bool("solver.shared_bernoulli", s.shared_bernoulli);
  s.reference = c.get_string("solver.reference", s.reference);
  detail::pick<int>("solver.reference", s.reference, {{"top", 0}, {"exact", 0}});
  s.reference_steps = static_cast<int>(c.get_int("solver.reference_steps", s.reference_steps));
  s.accounting = detail::pick<CostAccounting>("solver.accounting", c.get_string("solver.accounting", "drawn"),
                                              {{"drawn", CostAccounting::drawn}, {"full", CostAccounting::full}});
  if (s.trials < 1 || s.batch < 1) throw std::invalid_argument("config: solver.trials and solver.batch must be >= 1");
  if (s.n_steps.empty()) throw std::invalid_argument("config: solver.n_steps is empty");
  for (int n : s.n_steps)
    if (n < 1 || s.reference_steps % n != 0)
      throw std::invalid_argument("config: every solver.n_steps must divide solver.reference_steps");
  if (s.reference == "exact" && p.type != ProblemType::ou)
    throw std::invalid_argument("config: solver.reference = exact needs problem.type = ou");
  if (s.schedule == "learned" && s.schedule_file.empty() && e.kind == "sweep")
    throw std::invalid_argument("config: learned schedules need solver.schedule_file");

  auto& th = e.theorem;
  th.eps = c.get_doubles("theorem.eps", th.eps);
  th.n_steps = static_cast<int>(c.get_int("theorem.n_steps", th.n_steps));
  th.runs = static_cast<int>(c.get_int("theorem.runs", th.runs));
  th.rule = detail::pick<KmaxRule>("theorem.kmax_rule", c.get_string("theorem.kmax_rule", "proof"),
                                   {{"proof", KmaxRule::proof}, {"statement", KmaxRule::statement}});
  if (th.runs < 1 || th.n_steps < 1) throw std::invalid_argument("config: theorem.runs and theorem.n_steps must be >= 1");

  auto& sc = e.scaling;
  sc.eps = c.get_doubles("scaling.eps", sc.eps);
  sc.base_steps = static_cast<int>(c.get_int("scaling.base_steps", sc.base_steps));
  sc.paths = static_cast<int>(c.get_int("scaling.paths", sc.paths));
  sc.n_candidates = c.get_ints("scaling.n_candidates", sc.n_candidates);
  sc.kmax_lo = static_cast<int>(c.get_int("scaling.kmax_lo", sc.kmax_lo));
  sc.kmax_hi = static_cast<int>(c.get_int("scaling.kmax_hi", sc.kmax_hi));
  sc.beta = c.get_double("scaling.beta", sc.beta);
  sc.bisection_iters = static_cast<int>(c.get_int("scaling.bisection_iters", sc.bisection_iters));
  for (int v : c.get_ints("scaling.ladder_seeds", {})) {
    if (v < 0) throw std::invalid_argument("config: scaling.ladder_seeds must be >= 0");
    sc.ladder_seeds.push_back(static_cast<std::uint64_t>(v));
  }
  for (int n : sc.n_candidates)
    if (n < 1 || sc.base_steps % n != 0)
      throw std::invalid_argument("config: scaling.n_candidates must divide scaling.base_steps");

  auto& tr = e.train;
  tr.lambda = c.get_double("train.lambda", tr.lambda);
  tr.steps = static_cast<int>(c.get_int("train.steps", tr.steps));
  tr.batch = static_cast<int>(c.get_int("train.batch", tr.batch));
  tr.learning_rate = c.get_double("train.learning_rate", tr.learning_rate);
  tr.seed = c.get_u64("train.seed", tr.seed);
  tr.init_constant = c.get_double("train.init_constant", tr.init_constant);
  tr.delta = c.get_double("train.delta", tr.delta);
  tr.output = c.get_string("train.output", tr.output);
  if (tr.lambda < 0.0 || tr.steps < 1 || tr.batch < 1 || !(tr.delta > 0.0))
    throw std::invalid_argument("config: invalid [train] values");

  auto& ad = e.adaptive;
  ad.cost_fractions = c.get_doubles("adaptive.cost_fractions", ad.cost_fractions);
  ad.eval_batch = static_cast<int>(c.get_int("adaptive.eval_batch", ad.eval_batch));
  ad.eval_seed = c.get_u64("adaptive.eval_seed", ad.eval_seed);

  auto& dd = e.ddpm;
  dd.betas = c.get_doubles("ddpm.betas", dd.betas);
  dd.times = c.get_doubles("ddpm.times", dd.times);
  dd.points = static_cast<int>(c.get_int("ddpm.points", dd.points));
  dd.seed = c.get_u64("ddpm.seed", dd.seed);
  dd.map = detail::pick<TimeMap>("ddpm.time_map", c.get_string("ddpm.time_map", "accumulated_beta"),
                                 {{"accumulated_beta", TimeMap::accumulated_beta}, {"exact_abar", TimeMap::exact_abar}});

  c.finish();
  return e;
}

inline ExperimentConfig load_experiment(const std::string& path) {
  const Config c = Config::load(path);
  const auto dir = std::filesystem::path(path).parent_path();
  return parse_experiment(c, dir.empty() ? "." : dir.string());
}

// ---------------------------------------------------------------------------
// Problems
// ---------------------------------------------------------------------------

inline GaussianMixture experiment_mixture(const ExperimentConfig& e) {
  return load_mixture(e.resolve(e.problem.mixture));
}

inline SdeProblem build_problem(const ExperimentConfig& e, int noise_base_steps = 0) {
  const auto& p = e.problem;
  const auto& l = e.ladder;
  SyntheticLadderOptions lo;
  lo.frequency = l.frequency;
  lo.terms = l.terms;
  lo.shared_shape = l.shared_shape;
  lo.envelope_rate = l.envelope_rate;
  if (p.type == ProblemType::ou) {
    SdeProblem pb;
    pb.ladder = make_synthetic_ladder(ou_drift(static_cast<std::size_t>(p.dim), p.rate), l.c, l.gamma, l.k_min,
                                      l.k_max, l.seed, lo);
    pb.sigma = NoiseSchedule::constant(p.sigma);
    pb.horizon = p.horizon;
    pb.x0 = p.x0;
    pb.noise_base_steps = noise_base_steps;
    return pb;
  }
  DiffusionProblemOptions o;
  o.kind = p.type == ProblemType::mixture_ddpm ? BackwardKind::sde : BackwardKind::ode;
  o.T = p.T;
  o.t_min = p.t_min;
  o.c = l.c;
  o.gamma = l.gamma;
  o.k_min = l.k_min;
  o.k_max = l.k_max;
  o.perturb_seed = l.seed;
  o.ladder = lo;
  o.noise_base_steps = noise_base_steps;
  const auto mix = experiment_mixture(e);
  if (mix.dim() != static_cast<std::size_t>(p.dim))
    throw std::invalid_argument("config: mixture dimension differs from problem.dim");
  return make_diffusion_problem(mix, o);
}

/// Materialised Brownian increments of several paths on several grids.
class GridNoise {
 public:
  GridNoise(const NoiseDriver& driver, int base_steps, int paths, std::uint64_t first_stream = 0)
      : d_(driver.dim) {
    for (int p = 0; p < paths; ++p) cache_.emplace_back(driver, first_stream + p, base_steps);
  }

  int paths() const { return static_cast<int>(cache_.size()); }

  class Source {
   public:
    Source(const double* z, std::size_t d) : z_(z), d_(d) {}
    void operator()(int step, std::span<double> out) const {
      std::copy(z_ + static_cast<std::size_t>(step) * d_, z_ + static_cast<std::size_t>(step + 1) * d_, out.begin());
    }

   private:
    const double* z_;
    std::size_t d_;
  };

  Source source(int path, int n_steps) {
    auto& grid = grids_[n_steps];
    if (grid.empty()) {
      grid.resize(cache_.size());
      Vec tmp(d_);
      for (std::size_t p = 0; p < cache_.size(); ++p) {
        const auto view = cache_[p].view(n_steps);
        grid[p].resize(static_cast<std::size_t>(n_steps) * d_);
        for (int i = 0; i < n_steps; ++i) {
          view(i, tmp);
          std::copy(tmp.begin(), tmp.end(), grid[p].begin() + static_cast<std::ptrdiff_t>(i * d_));
        }
      }
    }
    return Source(grid[static_cast<std::size_t>(path)].data(), d_);
  }

 private:
  std::size_t d_;
  std::vector<CachedBrownian> cache_;
  std::map<int, std::vector<Vec>> grids_;
};

inline LevelSchedule schedule_from_spec(const ExperimentConfig& e, double constant) {
  const auto& s = e.solver;
  if (s.schedule == "theorem") return LevelSchedule::theorem(constant, e.ladder.gamma);
  if (s.schedule == "power_law") return LevelSchedule::power_law(constant, s.exponent);
  if (s.schedule == "inverse_cost")
    return LevelSchedule::inverse_cost(constant, std::pow(e.ladder.c, e.ladder.gamma), e.ladder.gamma, s.exponent);
  if (s.schedule == "constant") return LevelSchedule::constant(constant);
  auto params = read_schedule(e.resolve(s.schedule_file));
  AdaptiveParams shifted = params;
  for (double& b : shifted.beta) b += constant;
  return LevelSchedule::learned(shifted);
}

using Clock = std::chrono::steady_clock;
inline double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// Sweep: EM over levels x steps, ML-EM over constants (or beta shifts) x steps x trials
// ---------------------------------------------------------------------------

/// ML-EM sweeps default to the three-model subset {1, 3, 5} when the ladder
/// covers it, and to the whole ladder otherwise.
inline std::vector<int> default_sweep_levels(const DriftLadder& ladder) {
  if (ladder.k_min() <= 1 && ladder.k_max() >= 5) return {1, 3, 5};
  return full_levels(ladder);
}

inline std::vector<ResultRow> run_sweep(const ExperimentConfig& e) {
  const auto& s = e.solver;
  const SdeProblem pb = build_problem(e, s.reference_steps);
  const NoiseDriver driver{e.seed, pb.dim()};
  const int B = s.batch;

  std::vector<Vec> ref(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) {
    if (s.reference == "exact") {
      ref[b] = exact_ou_solution(pb.x0, e.problem.rate, e.problem.sigma, pb.horizon, driver, static_cast<std::uint64_t>(b),
                                 pb.horizon / s.reference_steps);
    } else {
      ref[b] = em_solve(pb, pb.ladder.k_max(), s.reference_steps, pb.initial_state(driver, b),
                        pb.noise(driver, b, s.reference_steps), false)
                   .final_state();
    }
  }

  std::vector<ResultRow> rows;
  const bool do_em = std::find(s.methods.begin(), s.methods.end(), "em") != s.methods.end();
  const bool do_ml = std::find(s.methods.begin(), s.methods.end(), "mlem") != s.methods.end();
  if (do_em) {
    const std::vector<int> lv = s.em_levels.empty() ? full_levels(pb.ladder) : s.em_levels;
    for (int k : lv) {
      for (int n : s.n_steps) {
        const auto t0 = Clock::now();
        double mse = 0.0, ledger = 0.0;
        for (int b = 0; b < B; ++b) {
          const auto tr = em_solve(pb, k, n, pb.initial_state(driver, b), pb.noise(driver, b, n), false);
          mse += squared_distance(tr.final_state(), ref[b]) / B;
          ledger += tr.ledger.total() / B;
        }
        ResultRow r;
        r.method = "em";
        r.schedule = "level=" + std::to_string(k);
        r.mse = mse;
        r.expected_cost = n * pb.ladder.cost_units(k);
        r.ledger_cost = ledger;
        r.wall_ms = ms_since(t0);
        r.n_steps = n;
        rows.push_back(r);
      }
    }
  }
  if (do_ml) {
    MlemOptions opts;
    opts.levels = s.levels.empty() ? default_sweep_levels(pb.ladder) : s.levels;
    opts.keep_path = false;
    opts.keep_records = false;
    const auto levels = resolve_levels(pb.ladder, opts);
    const bool learned = s.schedule == "learned";
    const Vec values = learned ? (s.shifts.empty() ? Vec{0.0} : s.shifts) : s.constants;
    for (double v : values) {
      const auto sched = schedule_from_spec(e, v);
      const std::string label = s.schedule + (learned ? ":shift=" : ":C=") + format_double(v);
      for (int n : s.n_steps) {
        const double expected = expected_cost(sched, pb, n, levels, s.accounting);
        for (int trial = 0; trial < s.trials; ++trial) {
          const auto t0 = Clock::now();
          const std::uint64_t seed = derived_plan_seed(e.plan_seed, static_cast<std::uint64_t>(trial));
          std::vector<std::uint64_t> streams(B);
          std::iota(streams.begin(), streams.end(), 0);
          const auto runs = mlem_solve_batch(pb, sched, n, driver, streams, seed, s.shared_bernoulli, opts);
          double mse = 0.0, ledger = 0.0;
          for (int b = 0; b < B; ++b) {
            mse += squared_distance(runs[b].final_state(), ref[b]) / B;
            ledger += (s.accounting == CostAccounting::drawn ? runs[b].ledger.drawn_total() : runs[b].ledger.total()) / B;
          }
          ResultRow r;
          r.method = "mlem";
          r.schedule = label;
          r.mse = mse;
          r.expected_cost = expected;
          r.ledger_cost = ledger;
          r.wall_ms = ms_since(t0);
          r.n_steps = n;
          r.trial = trial;
          r.plan_seed = seed;
          rows.push_back(r);
        }
      }
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Theorem study: theorem_parameters + mlem_solve against x^(eta) on the same noise
// ---------------------------------------------------------------------------

struct TheoremRow {
  TheoremParameters params;
  double mse = 0.0;
  double mse_se = 0.0;
  double mean_cost = 0.0;  // drawn accounting
  double expected = 0.0;
  bool error_ok = false;
  bool cost_ok = false;
};

inline std::vector<TheoremRow> theorem_study(const ExperimentConfig& e, std::vector<ResultRow>* rows = nullptr) {
  const auto& th = e.theorem;
  const SdeProblem pb = build_problem(e);
  const NoiseDriver driver{e.seed, pb.dim()};
  const double L = pb.ladder.lipschitz_bound();
  const double eta = pb.eta(th.n_steps);
  std::vector<TheoremRow> out;
  for (double eps : th.eps) {
    const auto t0 = Clock::now();
    TheoremRow tr;
    tr.params = theorem_parameters(eps, L, pb.horizon, eta, e.ladder.c, e.ladder.gamma, th.rule);
    if (tr.params.k_min < pb.ladder.k_min() || tr.params.k_max > pb.ladder.k_max())
      throw std::invalid_argument("theorem_study: ladder does not cover levels " + std::to_string(tr.params.k_min) +
                                  ".." + std::to_string(tr.params.k_max));
    MlemOptions opts;
    opts.levels = tr.params.levels();
    opts.keep_path = false;
    opts.keep_records = false;
    const auto sched = tr.params.schedule();
    tr.expected = expected_cost(sched, pb, th.n_steps, opts.levels, CostAccounting::drawn);
    Vec errs;
    for (int r = 0; r < th.runs; ++r) {
      const std::uint64_t stream = static_cast<std::uint64_t>(r);
      const auto y = mlem_solve(pb, sched, th.n_steps, driver, stream, derived_plan_seed(e.plan_seed, stream), opts);
      const auto x = em_solve_truth(pb, th.n_steps, driver, stream);
      errs.push_back(squared_distance(x.final_state(), y.final_state()));
      tr.mean_cost += y.ledger.drawn_total() / th.runs;
    }
    const double n = static_cast<double>(errs.size());
    tr.mse = std::accumulate(errs.begin(), errs.end(), 0.0) / n;
    double var = 0.0;
    for (double v : errs) var += (v - tr.mse) * (v - tr.mse);
    tr.mse_se = std::sqrt(var / (n - 1.0) / n);
    tr.error_ok = tr.mse <= eps * eps + 4.0 * tr.mse_se;
    tr.cost_ok = tr.mean_cost <= tr.params.predicted_cost_bound;
    if (rows) {
      ResultRow row;
      row.method = "mlem";
      row.schedule = "theorem:C=" + format_double(tr.params.C);
      row.eps_target = eps;
      row.mse = tr.mse;
      row.expected_cost = tr.expected;
      row.ledger_cost = tr.mean_cost;
      row.wall_ms = ms_since(t0);
      row.n_steps = th.n_steps;
      rows->push_back(row);
    }
    out.push_back(tr);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scaling study: cost to reach RMSE eps against the exact OU solution
// ---------------------------------------------------------------------------

struct ScalingPoint {
  std::uint64_t ladder_seed = 0;
  double eps = 0.0;
  double em_cost = kNaN;
  int em_level = -1;
  int em_steps = 0;
  double em_mse = kNaN;
  double mlem_cost = kNaN;
  double mlem_ledger = kNaN;
  int mlem_kmax = -1;
  int mlem_steps = 0;
  double mlem_C = kNaN;
  double mlem_mse = kNaN;
};

struct ScalingResult {
  std::vector<ScalingPoint> points;  // one per (ladder seed, eps)
  Vec eps;
  Vec em_mean_cost;
  Vec mlem_mean_cost;
  double em_slope = kNaN;
  double mlem_slope = kNaN;
};

namespace detail {
inline std::vector<ScalingPoint> scaling_one_ladder(const ExperimentConfig& e, std::vector<ResultRow>* rows,
                                                    std::ostream* log) {
  const auto& sc = e.scaling;
  if (e.problem.type != ProblemType::ou) throw std::invalid_argument("scaling_study: needs problem.type = ou");
  const SdeProblem pb = build_problem(e, sc.base_steps);
  const NoiseDriver driver{e.seed, pb.dim()};
  const int P = sc.paths;
  const int kmax_hi = std::min(sc.kmax_hi, pb.ladder.k_max());
  const int kmin = pb.ladder.k_min();
  GridNoise noise(driver, sc.base_steps, P);

  std::vector<Vec> ref(P);
  for (int p = 0; p < P; ++p)
    ref[p] = exact_ou_solution(pb.x0, e.problem.rate, e.problem.sigma, pb.horizon, driver, static_cast<std::uint64_t>(p),
                               pb.horizon / sc.base_steps);

  // EM table
  std::map<std::pair<int, int>, double> em_mse;
  for (int k = kmin; k <= kmax_hi; ++k) {
    for (int n : sc.n_candidates) {
      double m = 0.0;
      for (int p = 0; p < P; ++p) {
        const auto tr = em_solve(pb, k, n, pb.x0, noise.source(p, n), false);
        m += squared_distance(tr.final_state(), ref[p]) / P;
      }
      em_mse[{k, n}] = m;
    }
  }

  // Plans use U(i, k) < p, so MSE at constant C is evaluated on common numbers.
  auto mlem_mse = [&](int n, int kmax, double C, double* ledger) {
    std::vector<int> lv;
    for (int k = kmin; k <= kmax; ++k) lv.push_back(k);
    const auto sched = LevelSchedule::power_law(C, sc.beta);
    double m = 0.0, cost = 0.0;
    for (int p = 0; p < P; ++p) {
      const auto plan = make_plan(sched, lv, pb, n, derived_plan_seed(e.plan_seed, static_cast<std::uint64_t>(p)));
      const auto tr = mlem_solve_plan(pb, plan, pb.x0, noise.source(p, n), false, false);
      m += squared_distance(tr.final_state(), ref[p]) / P;
      cost += tr.ledger.drawn_total() / P;
    }
    if (ledger) *ledger = cost;
    return m;
  };
  auto ml_expected = [&](int n, int kmax, double C) {
    double c = 0.0;
    for (int k = kmin; k <= kmax; ++k) c += std::min(C * std::exp2(-sc.beta * k), 1.0) * pb.ladder.cost_units(k);
    return n * c;
  };

  std::vector<ScalingPoint> res;
  for (double eps : sc.eps) {
    const auto t0 = Clock::now();
    const double target = eps * eps;
    ScalingPoint pt;
    pt.ladder_seed = e.ladder.seed;
    pt.eps = eps;
    for (const auto& [key, m] : em_mse) {
      const double cost = key.second * pb.ladder.cost_units(key.first);
      if (m <= target && !(cost >= pt.em_cost)) {
        pt.em_cost = cost;
        pt.em_level = key.first;
        pt.em_steps = key.second;
        pt.em_mse = m;
      }
    }
    for (int kmax = std::max(sc.kmax_lo, kmin); kmax <= kmax_hi; ++kmax) {
      for (int n : sc.n_candidates) {
        const double hi_c = std::exp2(sc.beta * kmax);
        if (em_mse[{kmax, n}] > target) continue;  // all p = 1 reproduces EM at kmax
        if (ml_expected(n, kmax, hi_c * 1e-12) >= pt.mlem_cost) continue;
        double lo = std::log(hi_c) - 40.0, hi = std::log(hi_c);
        if (mlem_mse(n, kmax, std::exp(lo), nullptr) <= target) hi = lo;
        for (int it = 0; it < sc.bisection_iters && hi > lo; ++it) {
          const double mid = 0.5 * (lo + hi);
          if (ml_expected(n, kmax, std::exp(mid)) >= pt.mlem_cost) {
            lo = mid;  // cannot beat the incumbent below this point
            continue;
          }
          if (mlem_mse(n, kmax, std::exp(mid), nullptr) <= target) hi = mid;
          else lo = mid;
        }
        const double C = std::exp(hi);
        const double cost = ml_expected(n, kmax, C);
        if (cost < pt.mlem_cost || std::isnan(pt.mlem_cost)) {
          double ledger = 0.0;
          const double m = mlem_mse(n, kmax, C, &ledger);
          if (m <= target) {
            pt.mlem_cost = cost;
            pt.mlem_ledger = ledger;
            pt.mlem_kmax = kmax;
            pt.mlem_steps = n;
            pt.mlem_C = C;
            pt.mlem_mse = m;
          }
        }
      }
    }
    if (log)
      *log << "eps=" << eps << " em_cost=" << pt.em_cost << " (k=" << pt.em_level << ", n=" << pt.em_steps
           << ") mlem_cost=" << pt.mlem_cost << " (kmax=" << pt.mlem_kmax << ", n=" << pt.mlem_steps
           << ", C=" << pt.mlem_C << ")\n";
    if (rows) {
      ResultRow a;
      a.method = "em";
      a.schedule = "level=" + std::to_string(pt.em_level) + ":ladder=" + std::to_string(e.ladder.seed);
      a.eps_target = eps;
      a.mse = pt.em_mse;
      a.expected_cost = pt.em_cost;
      a.ledger_cost = pt.em_cost;
      a.n_steps = pt.em_steps;
      a.wall_ms = ms_since(t0);
      rows->push_back(a);
      ResultRow b;
      b.method = "mlem";
      b.schedule = "power_law:C=" + format_double(pt.mlem_C) + ":kmax=" + std::to_string(pt.mlem_kmax) +
                   ":ladder=" + std::to_string(e.ladder.seed);
      b.eps_target = eps;
      b.mse = pt.mlem_mse;
      b.expected_cost = pt.mlem_cost;
      b.ledger_cost = pt.mlem_ledger;
      b.n_steps = pt.mlem_steps;
      b.plan_seed = e.plan_seed;
      b.wall_ms = a.wall_ms;
      rows->push_back(b);
    }
    res.push_back(pt);
  }
  return res;
}
}  // namespace detail

/// Mean cost-to-eps over ladder seeds, and slopes of log mean cost against log(1/eps).
inline ScalingResult scaling_study(const ExperimentConfig& e, std::vector<ResultRow>* rows = nullptr,
                                   std::ostream* log = nullptr) {
  const auto& sc = e.scaling;
  const std::vector<std::uint64_t> seeds = sc.ladder_seeds.empty() ? std::vector{e.ladder.seed} : sc.ladder_seeds;
  ScalingResult res;
  res.eps = sc.eps;
  res.em_mean_cost.assign(sc.eps.size(), 0.0);
  res.mlem_mean_cost.assign(sc.eps.size(), 0.0);
  for (std::uint64_t seed : seeds) {
    ExperimentConfig one = e;
    one.ladder.seed = seed;
    if (log) *log << "ladder seed " << seed << "\n";
    const auto pts = detail::scaling_one_ladder(one, rows, log);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      res.em_mean_cost[i] += pts[i].em_cost / seeds.size();
      res.mlem_mean_cost[i] += pts[i].mlem_cost / seeds.size();
      res.points.push_back(pts[i]);
    }
  }
  Vec x, ye, ym;
  for (std::size_t i = 0; i < sc.eps.size(); ++i) {
    if (std::isnan(res.em_mean_cost[i]) || std::isnan(res.mlem_mean_cost[i])) return res;
    x.push_back(std::log(1.0 / sc.eps[i]));
    ye.push_back(std::log(res.em_mean_cost[i]));
    ym.push_back(std::log(res.mlem_mean_cost[i]));
  }
  if (x.size() >= 2) {
    res.em_slope = linear_fit(x, ye).slope;
    res.mlem_slope = linear_fit(x, ym).slope;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Adaptive study: trained sigmoid schedule vs fixed schedules at matched cost
// ---------------------------------------------------------------------------

/// Normalised cost table T_k = cost(k) / (n_steps * cost(top)), so that the
/// regulariser reads as lambda times the cost relative to top-level EM.
/// The lowest evaluated level is always drawn and carries no parameters.
inline Vec normalised_cost_table(const DriftLadder& ladder, const std::vector<int>& levels, int n_steps) {
  Vec t;
  const double top = ladder.cost_units(levels.back()) * n_steps;
  for (int k : levels) t.push_back(ladder.cost_units(k) / top);
  return t;
}

inline AdaptiveParams initial_params(const std::vector<int>& levels, double C, double gamma, double delta) {
  Vec beta;
  for (int k : levels) {
    const double p = std::clamp(C * std::exp2(-(1.0 + gamma / 2.0) * k), 1e-4, 1.0 - 1e-3);
    beta.push_back(logit(p));
  }
  return AdaptiveParams(levels, Vec(levels.size(), 0.0), beta, delta);
}

struct TrainOutcome {
  AdaptiveParams params;
  Vec loss_trace;
};

inline TrainOutcome train_schedule(const ExperimentConfig& e, std::ostream* log = nullptr) {
  const auto& s = e.solver;
  const auto& tr = e.train;
  const SdeProblem pb = build_problem(e, s.reference_steps);
  MlemOptions o;
  o.levels = s.levels;
  const auto levels = resolve_levels(pb.ladder, o);
  if (levels.size() < 2) throw std::invalid_argument("train: need a base level and at least one learned level");
  const std::vector<int> learned(levels.begin() + 1, levels.end());
  const int n = s.n_steps.front();
  TrainingSetup setup;
  setup.problem = &pb;
  setup.n_steps = n;
  setup.driver = NoiseDriver{e.seed, pb.dim()};
  setup.base_levels = {levels.front()};
  setup.cost_table = normalised_cost_table(pb.ladder, learned, n);
  setup.lambda = tr.lambda;
  setup.batch_size = tr.batch;
  setup.reference = em_reference(pb, pb.ladder.k_max(), s.reference_steps, setup.driver);
  auto params = initial_params(learned, tr.init_constant, e.ladder.gamma, tr.delta);
  auto on_step = [log](int it, const GradEstimate& g) {
    if (log) *log << "step " << it << " loss=" << g.loss << " reg=" << g.regularizer << "\n";
  };
  auto res = sgd_train(setup, params, tr.steps, tr.learning_rate, tr.seed, on_step);
  if (!tr.output.empty()) write_schedule(res.params, e.resolve(tr.output));
  return {res.params, res.loss_trace};
}

struct AdaptivePoint {
  double target_cost = 0.0;
  double mse_learned = kNaN, mse_inverse = kNaN, mse_theorem = kNaN;
  double cost_learned = kNaN, cost_inverse = kNaN, cost_theorem = kNaN;
  bool learned_wins = false;
};

struct AdaptiveResult {
  AdaptiveParams trained;
  Vec loss_trace;
  std::vector<AdaptivePoint> points;
  int wins = 0;
};

inline AdaptiveResult adaptive_study(const ExperimentConfig& e, std::vector<ResultRow>* rows = nullptr,
                                     std::ostream* log = nullptr) {
  const auto& s = e.solver;
  const auto& ad = e.adaptive;
  AdaptiveResult res;
  auto trained = train_schedule(e, log);
  res.trained = trained.params;
  res.loss_trace = trained.loss_trace;

  const SdeProblem pb = build_problem(e, s.reference_steps);
  const NoiseDriver driver{e.seed, pb.dim()};
  MlemOptions o;
  o.levels = s.levels;
  o.keep_path = false;
  o.keep_records = false;
  const auto levels = resolve_levels(pb.ladder, o);
  const int n = s.n_steps.front();
  const int B = ad.eval_batch;
  const std::uint64_t stream0 = hash_key(ad.eval_seed, static_cast<std::uint64_t>(Domain::generic), 0xe7a1);
  std::vector<Vec> ref(B);
  for (int b = 0; b < B; ++b)
    ref[b] = em_solve(pb, pb.ladder.k_max(), s.reference_steps, pb.initial_state(driver, stream0 + b),
                      pb.noise(driver, stream0 + b, s.reference_steps), false)
                 .final_state();

  const double gamma = e.ladder.gamma;
  const double cpre = std::pow(e.ladder.c, gamma);
  const auto inverse = LevelSchedule::inverse_cost(1.0, cpre, gamma, 1.0);
  const auto theorem_rate = LevelSchedule::inverse_cost(1.0, cpre, gamma, 1.0 / gamma + 0.5);
  const auto learned = LevelSchedule::learned(trained.params);

  auto evaluate = [&](const LevelSchedule& sched, double* ledger) {
    double m = 0.0, c = 0.0;
    for (int b = 0; b < B; ++b) {
      const auto plan = make_plan(sched, levels, pb, n, derived_plan_seed(ad.eval_seed, static_cast<std::uint64_t>(b)));
      const auto tr = mlem_solve_plan(pb, plan, pb.initial_state(driver, stream0 + b),
                                      pb.noise(driver, stream0 + b, n), false, false);
      m += squared_distance(tr.final_state(), ref[b]) / B;
      c += tr.ledger.drawn_total() / B;
    }
    *ledger = c;
    return m;
  };
  auto matched = [&](const LevelSchedule& base, double target) {
    const double C = match_constant(
        [&](double c) { return expected_cost(base.with_constant(c), pb, n, levels, CostAccounting::drawn); }, target,
        1e-9, 1e9);
    return base.with_constant(C);
  };

  const double full = n * pb.ladder.cost_units(levels.back());
  for (double frac : ad.cost_fractions) {
    const auto t0 = Clock::now();
    AdaptivePoint pt;
    pt.target_cost = frac * full;
    const auto sl = matched(learned, pt.target_cost);
    const auto si = matched(inverse, pt.target_cost);
    const auto st = matched(theorem_rate, pt.target_cost);
    pt.mse_learned = evaluate(sl, &pt.cost_learned);
    pt.mse_inverse = evaluate(si, &pt.cost_inverse);
    pt.mse_theorem = evaluate(st, &pt.cost_theorem);
    pt.learned_wins = pt.mse_learned < pt.mse_inverse && pt.mse_learned < pt.mse_theorem;
    if (pt.learned_wins) ++res.wins;
    if (log)
      *log << "cost=" << pt.target_cost << " learned=" << pt.mse_learned << " inverse_cost=" << pt.mse_inverse
           << " theorem_rate=" << pt.mse_theorem << "\n";
    if (rows) {
      const double ms = ms_since(t0);
      auto add = [&](const std::string& name, const LevelSchedule& sc, double mse, double ledger) {
        ResultRow r;
        r.method = "mlem";
        r.schedule = name;
        r.mse = mse;
        r.expected_cost = expected_cost(sc, pb, n, levels, CostAccounting::drawn);
        r.ledger_cost = ledger;
        r.wall_ms = ms;
        r.n_steps = n;
        r.plan_seed = ad.eval_seed;
        rows->push_back(r);
      };
      add("learned", sl, pt.mse_learned, pt.cost_learned);
      add("inverse_cost", si, pt.mse_inverse, pt.cost_inverse);
      add("inverse_cost_theorem_rate", st, pt.mse_theorem, pt.cost_theorem);
    }
    res.points.push_back(pt);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

inline std::vector<ResultRow> run_experiment(const ExperimentConfig& e, std::ostream* log = nullptr) {
  std::vector<ResultRow> rows;
  if (e.kind == "sweep") return run_sweep(e);
  if (e.kind == "theorem") {
    theorem_study(e, &rows);
  } else if (e.kind == "scaling") {
    scaling_study(e, &rows, log);
  } else if (e.kind == "adaptive") {
    adaptive_study(e, &rows, log);
  } else if (e.kind == "train") {
    train_schedule(e, log);
  } else {
    throw std::invalid_argument("run_experiment: kind '" + e.kind + "' produces no result rows");
  }
  return rows;
}

}  // namespace mlem
