#pragma once

#include <cstdint>
#include <functional>

namespace vividforge {

// Number of worker threads: VIVIDFORGE_THREADS if set (>=1), otherwise the
// hardware concurrency.
int worker_count();

// Splits [0, n) into one contiguous chunk per worker and runs fn(begin, end)
// on each. Chunk boundaries depend only on n and the worker count, and each
// output element must be owned by exactly one chunk, so results are identical
// for any thread count.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn);

}  // namespace vividforge
