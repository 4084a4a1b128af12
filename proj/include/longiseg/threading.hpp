#pragma once

#include <cstdint>
#include <functional>

namespace longiseg {

/// Number of worker threads used by data-parallel loops. Always >= 1.
int thread_count();

/// Set the worker count; 0 picks std::thread::hardware_concurrency().
/// The initial value comes from LONGISEG_THREADS, defaulting to 1.
void set_thread_count(int n);

/// Run fn(begin, end) over a partition of [0, n). Chunks are contiguous and
/// disjoint, so callers writing disjoint output ranges stay deterministic
/// regardless of the worker count.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn);

}  // namespace longiseg
