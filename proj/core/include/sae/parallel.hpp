#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <mutex>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace sae {

/// Runs fn(0..n-1) across up to n_threads workers. Work items must be
/// independent and write only to their own slots, so results do not
/// depend on the schedule. The first exception thrown by any item is
/// rethrown on the caller's thread.
inline void parallel_for(std::size_t n, int n_threads,
                         const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  if (n_threads <= 1 || n == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t workers =
      std::min<std::size_t>(static_cast<std::size_t>(n_threads), n);
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n || failed.load()) return;
        try {
          fn(i);
        } catch (...) {
          std::scoped_lock lock(error_mutex);
          if (!failed.exchange(true)) error = std::current_exception();
          return;
        }
      }
    });
  }
  for (std::thread& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace sae
