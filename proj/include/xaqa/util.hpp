#pragma once

#include <atomic>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace xaqa {

/// Worker cap from XAQA_THREADS; defaults to 1 so runs stay reproducible
/// without opt-in.
inline int worker_threads() {
  const char* env = std::getenv("XAQA_THREADS");
  if (!env) return 1;
  const int n = std::atoi(env);
  return n < 1 ? 1 : n;
}

/// Runs f(i) for i in [0, n). With more than one worker, items are claimed
/// from a shared counter; each slot's result must be written by index so
/// downstream aggregation stays order-deterministic.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& f) {
  const int workers = worker_threads();
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  const int count = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(workers), n));
  pool.reserve(count);
  for (int w = 0; w < count; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) f(i);
    });
  }
  for (std::thread& t : pool) t.join();
}

}  // namespace xaqa
