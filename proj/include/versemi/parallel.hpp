#pragma once

#include <algorithm>
#include <exception>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace versemi {

// Activation buffers of a few MB churn on every step; without this they go
// through mmap/munmap and the kernel re-zeroes them each time.
inline void tune_allocator_once() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
    return true;
  }();
  (void)done;
#endif
}

// Static partition so the work->thread mapping is reproducible. Results must
// be written to per-item slots; reductions happen in the caller, in order.
template <class Fn>
void parallel_for(int n, int max_threads, Fn&& fn) {
  const int n_threads = std::max(1, std::min({max_threads, n, static_cast<int>(std::thread::hardware_concurrency())}));
  if (n_threads <= 1) {
    for (int i = 0; i < n; ++i) fn(i, 0);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errs(static_cast<std::size_t>(n_threads));
  for (int t = 0; t < n_threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (int i = t; i < n; i += n_threads) fn(i, t);
      } catch (...) {
        errs[static_cast<std::size_t>(t)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);
}

}  // namespace versemi
