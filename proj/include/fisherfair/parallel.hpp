#pragma once

#include <cstdlib>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fisherfair {

/// Selects the serial reference kernel or its OpenMP counterpart.
enum class Execution { Serial, Parallel };

/// Thread cap from FISHER_FAIR_THREADS, falling back to the OpenMP default.
inline int thread_cap() {
  if (const char* env = std::getenv("FISHER_FAIR_THREADS")) {
    const int requested = std::atoi(env);
    if (requested > 0) return requested;
  }
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace fisherfair
