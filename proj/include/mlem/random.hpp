#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>

namespace mlem {

// Counter-based random numbers: every draw is a pure function of its key, so
// solvers that visit steps in different orders still see identical noise.

inline constexpr std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Hash of an ordered key tuple. Each component is absorbed through a full
/// splitmix round so that neighbouring counters decorrelate.
inline constexpr std::uint64_t hash_key(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                                        std::uint64_t c = 0, std::uint64_t d = 0) {
  std::uint64_t h = splitmix64(seed ^ 0x6a09e667f3bcc909ULL);
  h = splitmix64(h ^ a);
  h = splitmix64(h ^ (b + 0x3c6ef372fe94f82bULL));
  h = splitmix64(h ^ (c + 0xa54ff53a5f1d36f1ULL));
  h = splitmix64(h ^ (d + 0x510e527fade682d1ULL));
  return h;
}

/// Uniform in the open interval (0, 1).
inline constexpr double to_unit_open(std::uint64_t bits) {
  return (static_cast<double>(bits >> 12) + 0.5) * 0x1.0p-52;
}

/// Key domains separate independent uses of one master seed.
enum class Domain : std::uint64_t {
  brownian = 1,
  initial_state = 2,
  ou_residual = 3,
  bernoulli = 4,
  direction = 5,
  perturbation = 6,
  generic = 7,
};

/// Fills `out` with independent standard normals keyed by (seed, domain, stream, index).
inline void keyed_normals(std::uint64_t seed, Domain domain, std::uint64_t stream,
                          std::uint64_t index, std::span<double> out) {
  const auto dom = static_cast<std::uint64_t>(domain);
  for (std::size_t j = 0; j < out.size(); j += 2) {
    const std::uint64_t pair = j / 2;
    const double u1 = to_unit_open(hash_key(seed, dom, stream, index, 2 * pair));
    const double u2 = to_unit_open(hash_key(seed, dom, stream, index, 2 * pair + 1));
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double th = 2.0 * std::numbers::pi * u2;
    out[j] = r * std::cos(th);
    if (j + 1 < out.size()) out[j + 1] = r * std::sin(th);
  }
}

inline double keyed_uniform(std::uint64_t seed, Domain domain, std::uint64_t stream,
                            std::uint64_t index, std::uint64_t lane = 0) {
  return to_unit_open(hash_key(seed, static_cast<std::uint64_t>(domain), stream, index, lane));
}

/// Small sequential generator for places where keyed access is not needed
/// (test fixtures, parameter initialisation). Satisfies UniformRandomBitGenerator.
class SplitMix {
 public:
  using result_type = std::uint64_t;
  explicit SplitMix(std::uint64_t seed) : state_(seed) {}
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }
  result_type operator()() {
    state_ += 0x9e3779b97f4a7c15ULL;
    return splitmix64(state_);
  }
  double uniform() { return to_unit_open((*this)()); }
  double normal() {
    const double r = std::sqrt(-2.0 * std::log(uniform()));
    return r * std::cos(2.0 * std::numbers::pi * uniform());
  }

 private:
  std::uint64_t state_;
};

}  // namespace mlem
