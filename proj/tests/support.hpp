#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "fisherfair/market_model.hpp"
#include "fisherfair/random.hpp"

namespace testing {

inline std::string data_path(const std::string& name) {
  return std::string(FISHERFAIR_TEST_DATA) + "/" + name;
}

inline fisherfair::MarketInstance example5() {
  return fisherfair::load_instance_file(data_path("example5.json"));
}
inline fisherfair::MarketInstance example6() {
  return fisherfair::load_instance_file(data_path("example6.json"));
}

inline fisherfair::MarketInstance random_instance(std::size_t n, std::size_t k, std::uint64_t seed,
                                                  fisherfair::Mode mode = fisherfair::Mode::Linear) {
  return fisherfair::load_instance(fisherfair::sample_instance(n, k, seed, mode));
}

// Trapezoid rule: exact for linear densities, written without the closed form.
inline double trapezoid(const fisherfair::LinearPiece& p, double lo, double hi) {
  return 0.5 * (hi - lo) * (p(lo) + p(hi));
}

// Right endpoint b with trapezoid(p, a, b) == u, by bisection.
inline double bisect_cut(const fisherfair::LinearPiece& p, double a, double u, double end) {
  double lo = a;
  double hi = end;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (trapezoid(p, a, mid) < u ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

// max_i beta_i v_i(theta), straight from the definition.
inline double brute_max(const fisherfair::MarketInstance& inst, const std::vector<double>& beta,
                        double theta) {
  double best = 0.0;
  for (std::size_t i = 0; i < inst.buyers(); ++i) {
    best = std::max(best, beta[i] * inst.value_at(i, theta));
  }
  return best;
}

inline std::vector<double> random_beta(const fisherfair::MarketInstance& inst, std::mt19937_64& rng) {
  std::vector<double> beta(inst.buyers());
  for (std::size_t i = 0; i < inst.buyers(); ++i) {
    const double lo = inst.budget(i);
    beta[i] = lo + (1.0 - lo) * fisherfair::unit_uniform(rng);
  }
  return beta;
}

}  // namespace testing
