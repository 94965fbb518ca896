#include "unetmm/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace unetmm {

namespace {
constexpr std::int64_t kMinCostPerThread = 1 << 20;
}

unsigned max_threads() {
    if (const char* env = std::getenv("UNETMM_THREADS")) {
        try {
            const long v = std::stol(env);
            if (v > 0) return static_cast<unsigned>(v);
        } catch (...) {
        }
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::int64_t count, std::int64_t cost, const std::function<void(std::int64_t)>& fn) {
    if (count <= 0) return;
    const auto by_cost = std::max<std::int64_t>(1, cost / kMinCostPerThread);
    const auto workers = std::min<std::int64_t>({static_cast<std::int64_t>(max_threads()), count, by_cost});
    if (workers <= 1) {
        for (std::int64_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (std::int64_t t = 0; t < workers; ++t) {
        pool.emplace_back([&, t] {
            for (std::int64_t i = t; i < count; i += workers) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace unetmm
