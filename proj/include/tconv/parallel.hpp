#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <thread>
#include <vector>

namespace tconv {

namespace detail {
inline std::atomic<unsigned> g_threads{1};
}

inline void set_num_threads(unsigned n) { detail::g_threads = std::max(1u, n); }
inline unsigned num_threads() { return detail::g_threads; }

// Runs fn(i) for i in [0, count), split into contiguous chunks. Each index is
// handled by exactly one thread, so per-index work keeps its sequential order.
template <typename Fn>
void parallel_for(std::size_t count, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(num_threads(), count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  const std::size_t chunk = (count + workers - 1) / workers;
  for (std::size_t t = 0; t < workers; ++t) {
    const std::size_t lo = t * chunk;
    const std::size_t hi = std::min(count, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
}

}  // namespace tconv
