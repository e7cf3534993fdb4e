#pragma once

#include <functional>
#include <thread>
#include <vector>

namespace ctxbias {

// Index-parallel map with deterministic aggregation: results land in index
// order regardless of scheduling, so downstream reductions are stable.
template <typename Result>
std::vector<Result> parallel_map(size_t n, int jobs, const std::function<Result(size_t)>& fn) {
    std::vector<Result> results(n);
    if (jobs <= 1 || n <= 1) {
        for (size_t i = 0; i < n; ++i) results[i] = fn(i);
        return results;
    }
    const int workers = std::min<int>(jobs, static_cast<int>(n));
    std::vector<std::thread> threads;
    threads.reserve(static_cast<size_t>(workers));
    for (int t = 0; t < workers; ++t) {
        threads.emplace_back([&, t] {
            for (size_t i = static_cast<size_t>(t); i < n; i += static_cast<size_t>(workers))
                results[i] = fn(i);
        });
    }
    for (auto& th : threads) th.join();
    return results;
}

}  // namespace ctxbias
