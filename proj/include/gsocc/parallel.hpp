#pragma once

#include <atomic>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace gsocc {

// Worker count policy: GSOCC_WORKERS if set, otherwise hardware concurrency.
// Every parallel region in this library writes each output element from
// exactly one task and performs reductions in a fixed order, so results are
// identical for any worker count.

namespace detail {
inline std::atomic<int>& worker_count_slot() {
    static std::atomic<int> count{0}; // 0 = uninitialized
    return count;
}

inline int resolve_worker_count() {
    if (const char* env = std::getenv("GSOCC_WORKERS")) {
        int n = std::atoi(env);
        if (n >= 1) return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}
} // namespace detail

inline void set_worker_count(int n) {
    detail::worker_count_slot().store(n < 1 ? 1 : n, std::memory_order_relaxed);
}

inline int worker_count() {
    int n = detail::worker_count_slot().load(std::memory_order_relaxed);
    if (n == 0) {
        n = detail::resolve_worker_count();
        detail::worker_count_slot().store(n, std::memory_order_relaxed);
    }
    return n;
}

/// Runs fn(begin, end) over a partition of [0, n). Blocks are claimed from a
/// shared counter in fixed-size chunks; which worker runs a block never
/// affects the values it writes.
template <typename Fn>
void parallel_blocks(std::int64_t n, Fn&& fn, std::int64_t min_block = 64) {
    if (n <= 0) return;
    const int workers = worker_count();
    if (workers <= 1 || n <= min_block) {
        fn(std::int64_t{0}, n);
        return;
    }
    std::int64_t block = (n + workers * 4 - 1) / (workers * 4);
    if (block < min_block) block = min_block;
    std::atomic<std::int64_t> next{0};
    auto body = [&] {
        for (;;) {
            std::int64_t begin = next.fetch_add(block, std::memory_order_relaxed);
            if (begin >= n) return;
            std::int64_t end = begin + block < n ? begin + block : n;
            fn(begin, end);
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers) - 1);
    for (int t = 1; t < workers; ++t) pool.emplace_back(body);
    body();
    for (auto& th : pool) th.join();
}

/// Runs fn(i) for every i in [0, n); fn must write only outputs owned by i.
template <typename Fn>
void parallel_for(std::int64_t n, Fn&& fn, std::int64_t min_block = 64) {
    parallel_blocks(
        n,
        [&](std::int64_t begin, std::int64_t end) {
            for (std::int64_t i = begin; i < end; ++i) fn(i);
        },
        min_block);
}

/// Deterministic reduction: partials are computed per fixed-size chunk (in
/// parallel) and folded sequentially in chunk order. The chunk grid depends
/// only on n, never on the worker count.
///
/// Acc must be default-constructible; chunk_fn(acc, begin, end) accumulates a
/// chunk into acc; fold(total, acc) merges in fixed order.
template <typename Acc, typename ChunkFn, typename FoldFn>
Acc deterministic_reduce(std::int64_t n, std::int64_t chunk, ChunkFn&& chunk_fn, FoldFn&& fold) {
    if (chunk < 1) chunk = 1;
    const std::int64_t num_chunks = n <= 0 ? 0 : (n + chunk - 1) / chunk;
    std::vector<Acc> partials(static_cast<size_t>(num_chunks));
    parallel_for(num_chunks, [&](std::int64_t c) {
        std::int64_t begin = c * chunk;
        std::int64_t end = begin + chunk < n ? begin + chunk : n;
        chunk_fn(partials[static_cast<size_t>(c)], begin, end);
    }, 1);
    Acc total{};
    for (auto& p : partials) fold(total, p);
    return total;
}

} // namespace gsocc
