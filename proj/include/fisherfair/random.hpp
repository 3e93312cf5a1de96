#pragma once

#include <cstdint>
#include <random>

namespace fisherfair {

/// Uniform draw in [0, 1) built from the top 53 bits, so traces are identical
/// across standard libraries for a given seed.
inline double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace fisherfair
