#pragma once

#include <cstdint>
#include <cstdlib>
#include <thread>
#include <vector>

namespace rmarn::num {

// Kernel parallelism cap. RMARN_THREADS=1 forces serial execution; unset
// falls back to the hardware count. Work is split into contiguous ranges so
// every output element is written by exactly one worker and results do not
// depend on the thread count.
inline int effective_threads() {
    static const int cached = [] {
        if (const char* env = std::getenv("RMARN_THREADS")) {
            int v = std::atoi(env);
            if (v >= 1) return v;
        }
        unsigned hw = std::thread::hardware_concurrency();
        return hw == 0 ? 1 : static_cast<int>(hw);
    }();
    return cached;
}

template <typename Fn>
void parallel_for(int64_t n, Fn&& fn) {
    int threads = effective_threads();
    if (threads <= 1 || n < 2) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    int workers = static_cast<int>(std::min<int64_t>(threads, n));
    int64_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        int64_t lo = w * chunk;
        int64_t hi = std::min<int64_t>(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn] {
            for (int64_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace rmarn::num
