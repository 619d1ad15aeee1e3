#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace ditforge {

// Worker count: DITFORGE_THREADS if set (clamped to >= 1), else hardware
// concurrency capped at 8.
inline int worker_count() {
    if (const char* env = std::getenv("DITFORGE_THREADS")) {
        int n = std::atoi(env);
        if (n >= 1) return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    return static_cast<int>(std::min(hw, 8u));
}

// Runs fn(i) for i in [0, n). Each index is independent; callers that reduce
// results must collect per-index outputs and fold them in index order so the
// result is identical for any worker count.
inline void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
    int workers = worker_count();
    if (n <= 1 || workers <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    workers = static_cast<int>(std::min<int64_t>(workers, n));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    std::atomic<int64_t> next{0};
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&]() {
            for (;;) {
                int64_t i = next.fetch_add(1);
                if (i >= n) return;
                fn(i);
            }
        });
    }
    for (auto& t : pool) t.join();
}

} // namespace ditforge
