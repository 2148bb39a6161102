#pragma once

#include <functional>

namespace sri {

// Worker count: SRI_THREADS if set (>=1), else hardware concurrency.
int worker_count();

// Runs fn(i) for i in [0, n). Work items must write to disjoint slots;
// results are position-addressed so scheduling cannot change them.
void parallel_for(int n, const std::function<void(int)>& fn);

}  // namespace sri
