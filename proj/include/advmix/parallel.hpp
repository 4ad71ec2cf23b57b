#pragma once

#include <atomic>
#include <cstddef>
#include <exception>
#include <algorithm>
#include <thread>
#include <vector>

namespace advmix {

// Runs job(i) for i in [0, count) on up to `workers` threads. Jobs must not
// share mutable state. The exception of the lowest failing index is rethrown
// once all workers have stopped.
template <typename Job>
void parallel_for(std::size_t count, std::size_t workers, Job&& job) {
    if (workers <= 1 || count <= 1) {
        for (std::size_t i = 0; i < count; ++i) job(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(count);
    auto worker = [&] {
        for (std::size_t i = next++; i < count; i = next++) {
            try {
                job(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < std::min(workers, count); ++w) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

}  // namespace advmix
