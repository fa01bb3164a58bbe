#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <thread>
#include <vector>

namespace lseg {

namespace detail {
inline std::atomic<int>& thread_setting() {
  static std::atomic<int> n{1};
  return n;
}
}  // namespace detail

/// Number of workers used by parallel_for. Defaults to 1.
inline int num_threads() { return detail::thread_setting().load(); }

/// n <= 0 selects std::thread::hardware_concurrency().
inline void set_num_threads(int n) {
  if (n <= 0) n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  detail::thread_setting().store(n);
}

inline int max_threads() { return static_cast<int>(std::max(1u, std::thread::hardware_concurrency())); }

/// Runs fn(begin, end) over contiguous static chunks of [0, n).
/// Every index is processed by exactly one worker, so callers that write
/// disjoint outputs per index get results independent of the worker count.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const auto workers = static_cast<std::size_t>(std::min<std::size_t>(num_threads(), n));
  if (workers <= 1) {
    if (n > 0) fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t b = w * chunk;
    const std::size_t e = std::min(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(std::size_t{0}, std::min(n, chunk));
}

}  // namespace lseg
