#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace micro {

/// Worker count: MICRO_PREF_THREADS when set (>= 1), otherwise the
/// hardware concurrency.
std::size_t thread_count();

/// Splits [0, n) into fixed-size chunks and evaluates `fn(begin, end)` for
/// each, returning results in chunk order. Chunk boundaries do not depend
/// on the thread count, so reducing the returned vector left-to-right gives
/// the same floating-point result for any MICRO_PREF_THREADS.
template <class Result, class Fn>
std::vector<Result> map_chunks(std::size_t n, std::size_t chunk, Fn&& fn) {
    chunk = std::max<std::size_t>(chunk, 1);
    const std::size_t chunks = (n + chunk - 1) / chunk;
    std::vector<Result> out(chunks);
    const std::size_t workers = std::min(thread_count(), chunks);
    if (workers <= 1) {
        for (std::size_t c = 0; c < chunks; ++c) {
            out[c] = fn(c * chunk, std::min(n, (c + 1) * chunk));
        }
        return out;
    }

    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> failures(chunks);
    auto work = [&] {
        for (std::size_t c = next++; c < chunks; c = next++) {
            try {
                out[c] = fn(c * chunk, std::min(n, (c + 1) * chunk));
            } catch (...) {
                failures[c] = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(work);
    work();
    for (auto& t : pool) t.join();
    // Lowest failing chunk wins so the reported error is deterministic.
    for (auto& f : failures) {
        if (f) std::rethrow_exception(f);
    }
    return out;
}

} // namespace micro
