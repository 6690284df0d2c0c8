#pragma once

#include <atomic>
#include <cstdint>
#include <thread>
#include <vector>

namespace texbridge {

/// Run f(i) for i in [0, n). Each item must be independent and write only to
/// its own output slot, so results do not depend on how work is scheduled.
template <typename F>
void parallel_for(int64_t n, F&& f, int threads = 0) {
  if (threads <= 0) threads = static_cast<int>(std::thread::hardware_concurrency());
  if (threads <= 1 || n <= 1) {
    for (int64_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<int64_t> next{0};
  std::vector<std::thread> pool;
  int use = static_cast<int>(std::min<int64_t>(threads, n));
  pool.reserve(static_cast<size_t>(use));
  for (int t = 0; t < use; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        int64_t i = next.fetch_add(1);
        if (i >= n) return;
        f(i);
      }
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace texbridge
