#pragma once

#include <cstdint>
#include <functional>

namespace hyperconv {

/// Number of worker threads ops may use. Read once from HYPERCONV_THREADS;
/// defaults to 1 so results are reproducible without any configuration.
int thread_count();

/// Runs fn(i) for i in [0, n). Work is split into contiguous ranges, one per
/// worker, and each range is executed in index order, so any scheme whose
/// writes are disjoint per index produces bit-identical results for every
/// thread count.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn);

}  // namespace hyperconv
