#pragma once

#include <algorithm>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace mfct {

/// Default worker count: MFCT_WORKERS environment variable, else 1.
inline int default_workers() {
    if (const char* env = std::getenv("MFCT_WORKERS")) {
        int w = std::atoi(env);
        if (w >= 1) return w;
    }
    return 1;
}

/// Runs fn(i) for i in [0, n). Each index writes only its own outputs, so the
/// result is identical for any worker count.
template <typename Fn>
void parallel_for(int n, int workers, Fn&& fn) {
    if (n <= 0) return;
    workers = std::clamp(workers, 1, n);
    if (workers == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([=, &fn]() {
            for (int i = w; i < n; i += workers) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

} // namespace mfct
