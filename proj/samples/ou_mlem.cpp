// EM at each ladder level vs ML-EM with theorem-rate probabilities on a
// two-dimensional OU process; prints RMSE against the exact solution and cost.

#include <cmath>
#include <cstdio>

#include "mlem/mlem.hpp"

int main() {
  using namespace mlem;
  const int n = 200, paths = 100, base = 2000;

  SdeProblem pb;
  pb.ladder = make_synthetic_ladder(ou_drift(2, 1.0), 1.0, 3.0, 0, 6, 11);
  pb.sigma = NoiseSchedule::constant(0.5);
  pb.x0 = {0.5, -0.3};
  pb.noise_base_steps = base;
  const NoiseDriver driver{2024, 2};

  std::vector<Vec> exact;
  for (int p = 0; p < paths; ++p) exact.push_back(exact_ou_solution(pb.x0, 1.0, 0.5, 1.0, driver, p, 1.0 / base));

  std::printf("%-22s %12s %14s\n", "method", "rmse", "cost");
  for (int k = 0; k <= pb.ladder.k_max(); ++k) {
    double mse = 0.0;
    for (int p = 0; p < paths; ++p) mse += squared_distance(em_solve(pb, k, n, driver, p).final_state(), exact[p]);
    std::printf("em level %-13d %12.3e %14.4g\n", k, std::sqrt(mse / paths), n * pb.ladder.cost_units(k));
  }
  for (double C : {1.0, 8.0, 64.0}) {
    const auto sched = LevelSchedule::theorem(C, 3.0);
    MlemOptions opts;
    opts.keep_path = false;
    double mse = 0.0, cost = 0.0;
    for (int p = 0; p < paths; ++p) {
      const auto tr = mlem_solve(pb, sched, n, driver, p, derived_plan_seed(99, p), opts);
      mse += squared_distance(tr.final_state(), exact[p]);
      cost += tr.ledger.drawn_total();
    }
    std::printf("ml-em C=%-14g %12.3e %14.4g\n", C, std::sqrt(mse / paths), cost / paths);
  }
}
