#include "vividforge/threading.hpp"

#include <cstdlib>
#include <thread>
#include <vector>

namespace vividforge {

int worker_count() {
  // Re-read the environment every call so the thread count can be changed
  // between operations (tests exercise renders at several counts).
  if (const char* env = std::getenv("VIVIDFORGE_THREADS")) {
    int v = std::atoi(env);
    if (v >= 1) return v;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : int(hw);
}

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
  if (n <= 0) return;
  int workers = worker_count();
  if (int64_t(workers) > n) workers = int(n);
  if (workers <= 1) {
    fn(0, n);
    return;
  }
  // Static contiguous chunks; deterministic regardless of scheduling.
  int64_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (int w = 1; w < workers; ++w) {
    int64_t b = w * chunk;
    int64_t e = std::min<int64_t>(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(0, std::min<int64_t>(n, chunk));
  for (auto& t : pool) t.join();
}

}  // namespace vividforge
