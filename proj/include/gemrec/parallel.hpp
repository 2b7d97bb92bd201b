#pragma once

// Execution-policy dispatch for the data-parallel kernels (k-means
// assignment, per-user trajectory generation, per-case evaluation).
//
// Every parallel loop in this project writes only to state owned by its own
// index and draws randomness from a per-index derived seed, so the serial
// and OpenMP paths produce bit-identical results regardless of thread
// count. Reductions over floating-point values are always done serially in
// index order after the parallel region. Tests assert the equivalence; the
// bench tool measures the speedup.

#include <cstddef>
#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace gemrec {

enum class Exec { serial, parallel };

inline int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

template <typename Fn>
void parallel_for(std::size_t n, Exec exec, Fn&& fn) {
#ifdef _OPENMP
  if (exec == Exec::parallel) {
    const std::int64_t count = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < count; ++i) {
      fn(static_cast<std::size_t>(i));
    }
    return;
  }
#else
  (void)exec;
#endif
  for (std::size_t i = 0; i < n; ++i) {
    fn(i);
  }
}

}  // namespace gemrec
