#pragma once

#include <cstdint>
#include <functional>

namespace unetmm {

/// Worker cap: UNETMM_THREADS when set to a positive integer, otherwise the
/// hardware concurrency.
unsigned max_threads();

/// Calls fn(i) for i in [0, count). Runs inline unless `cost` (a rough
/// operation count for the whole range) makes threading worthwhile. Each
/// index is processed by exactly one worker, so results do not depend on
/// the thread count.
void parallel_for(std::int64_t count, std::int64_t cost, const std::function<void(std::int64_t)>& fn);

}  // namespace unetmm
