#pragma once

#include <cstddef>
#include <functional>

namespace netdeconv {

// Number of worker threads used by kernel-level parallel loops.
// Reads NETDECONV_THREADS once; defaults to the hardware concurrency.
int thread_count();

// Runs fn(i) for i in [0, n). Work is split into fixed-size chunks that do
// not depend on the worker count, so any writes fn makes to disjoint outputs
// are placed identically no matter how many threads execute.
void parallel_for(long n, const std::function<void(long)>& fn);

// Same, but hands each worker a contiguous [begin, end) range.
void parallel_ranges(long n, long chunk, const std::function<void(long, long)>& fn);

} // namespace netdeconv
