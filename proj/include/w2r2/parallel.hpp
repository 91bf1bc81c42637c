#pragma once

// Execution policy for the data-parallel kernels (dataset generation,
// featurization, batch gradients, evaluation, sweeps). Every kernel writes
// per-index results into pre-sized slots and reduces them serially in index
// order afterwards, so serial and parallel runs are bitwise identical.

#include <cstddef>
#include <exception>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace w2r2 {

enum class Exec { serial, parallel };

inline int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

// Calls fn(i) for i in [0, n). Exceptions are captured per index and the one
// with the lowest index is rethrown after the loop, so the reported failure is
// the same whatever the thread count.
template <class Fn>
void for_each_index(std::size_t n, Exec exec, Fn&& fn, int threads = 0) {
  if (exec == Exec::serial || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  const long long count = static_cast<long long>(n);
  const int team = threads > 0 ? threads : max_threads();
#pragma omp parallel for schedule(dynamic, 4) num_threads(team)
  for (long long i = 0; i < count; ++i) {
    try {
      fn(static_cast<std::size_t>(i));
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace w2r2
