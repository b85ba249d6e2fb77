// Backward diffusion sampling of a 2-d Gaussian mixture with ML-EM over the
// levels {1, 3, 5}; reports the component occupancy of the samples.

#include <cstdio>

#include "mlem/mlem.hpp"

int main() {
  using namespace mlem;
  const GaussianMixture mix({0.5, 0.3, 0.2}, {{-1.5, 0.0}, {1.0, 1.2}, {1.2, -1.0}}, {0.15, 0.10, 0.20});
  DiffusionProblemOptions o;
  o.k_max = 5;
  const SdeProblem pb = make_diffusion_problem(mix, o);
  const NoiseDriver driver{7, 2};
  MlemOptions opts;
  opts.levels = {1, 3, 5};
  opts.keep_path = false;
  const auto sched = LevelSchedule::theorem(4.0, 3.0);
  const int n = 500, samples = 2000;

  std::vector<int> hits(mix.size(), 0);
  double cost = 0.0;
  for (int s = 0; s < samples; ++s) {
    const auto tr = mlem_solve(pb, sched, n, driver, s, derived_plan_seed(3, s), opts);
    const Vec& y = tr.final_state();
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t c = 0; c < mix.size(); ++c) {
      const double d = squared_distance(y, mix.means[c]);
      if (d < best_d) best_d = d, best = c;
    }
    ++hits[best];
    cost += tr.ledger.drawn_total();
  }
  std::printf("component  weight  sampled\n");
  for (std::size_t c = 0; c < mix.size(); ++c)
    std::printf("%9zu  %6.2f  %7.3f\n", c, mix.weights[c], static_cast<double>(hits[c]) / samples);
  std::printf("mean cost %.4g (top-level EM %.4g)\n", cost / samples, n * pb.ladder.cost_units(5));
}
