#pragma once

#include <cstddef>
#include <functional>

namespace flashblock {

/// Worker cap: FLASHBLOCK_THREADS if set to a positive integer, otherwise the
/// number of hardware threads.
std::size_t worker_count();

/// Runs fn(i) for i in [0, n) across up to worker_count() threads. Callers
/// write results into slot i so output order never depends on scheduling.
/// The first exception thrown by any task is rethrown after all workers join.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace flashblock
