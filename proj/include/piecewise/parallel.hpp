#pragma once

#include <algorithm>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

#include "piecewise/autodiff.hpp"

namespace piecewise {

/// Worker threads for per-instance loops: PIECEWISE_THREADS if set (≥ 1),
/// otherwise the hardware concurrency.
inline int worker_count() {
  if (const char* env = std::getenv("PIECEWISE_THREADS")) {
    try {
      return std::max(1, std::stoi(env));
    } catch (...) {
      return 1;
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs body(i) for i in [0, n) over contiguous chunks. Each index is visited
/// exactly once, so results written per index do not depend on the thread
/// count. Exceptions from workers are rethrown on the calling thread.
template <typename Body>
void parallel_for(Index n, Body&& body, int threads = worker_count()) {
  threads = static_cast<int>(std::min<Index>(std::max(threads, 1), std::max<Index>(n, 1)));
  if (threads <= 1) {
    for (Index i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
  const Index chunk = (n + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        const Index lo = t * chunk;
        const Index hi = std::min(n, lo + chunk);
        for (Index i = lo; i < hi; ++i) body(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace piecewise
