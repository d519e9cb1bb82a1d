#pragma once

#include <algorithm>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace fpt {

// Worker cap for data-parallel loops. Overridable via FPT_THREADS.
inline std::size_t worker_count() {
  static const std::size_t n = [] {
    if (const char* env = std::getenv("FPT_THREADS")) {
      long v = std::atol(env);
      if (v >= 1) return static_cast<std::size_t>(v);
    }
    std::size_t hw = std::thread::hardware_concurrency();
    return std::min<std::size_t>(hw == 0 ? 1 : hw, 4);
  }();
  return n;
}

// Runs fn(begin, end) over contiguous chunks of [0, n). Chunk boundaries
// depend only on n and the worker count, so any per-chunk output written to
// disjoint ranges is bit-deterministic.
inline void parallel_chunks(std::size_t n,
                            const std::function<void(std::size_t, std::size_t)>& fn) {
  std::size_t workers = std::min(worker_count(), n == 0 ? std::size_t{1} : n);
  if (n == 0) return;
  if (workers <= 1) {
    fn(0, n);
    return;
  }
  std::size_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> threads;
  threads.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) {
    std::size_t b = std::min(n, w * chunk);
    std::size_t e = std::min(n, (w + 1) * chunk);
    if (b < e) threads.emplace_back(fn, b, e);
  }
  fn(0, std::min(n, chunk));
  for (auto& t : threads) t.join();
}

// Index-parallel loop; fn(i) must touch only state owned by index i.
inline void parallel_for_each_index(std::size_t n, const std::function<void(std::size_t)>& fn) {
  parallel_chunks(n, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) fn(i);
  });
}

}  // namespace fpt
