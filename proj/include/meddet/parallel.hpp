// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>

namespace meddet {

// Worker count for parallel_for. 1 = fully sequential.
inline int& thread_count() {
    static int n = 1;
    return n;
}

inline void set_thread_count(int n) { thread_count() = n < 1 ? 1 : n; }

namespace detail_pool {

// Persistent helper threads with a spin-then-park handoff. Each run() bumps a
// generation counter; every helper executes every generation exactly once
// (run() blocks until all helpers have checked in, so generations cannot be
// skipped). Helpers spin briefly for low-latency wakeup, then park on a
// condition variable.
class WorkerPool {
public:
    static WorkerPool& get() {
        static WorkerPool pool;
        return pool;
    }

    void run(int64_t n, const std::function<void(int64_t, int64_t)>& range_fn, int helpers) {
        ensure(helpers);
        job_ = &range_fn;
        job_n_ = n;
        job_helpers_ = helpers;
        pending_.store(helpers, std::memory_order_relaxed);
        generation_.fetch_add(1, std::memory_order_release);
        if (parked_.load(std::memory_order_acquire) > 0) {
            std::lock_guard lk(m_);
            cv_.notify_all();
        }
        const int parts = helpers + 1;
        const int64_t chunk = (n + parts - 1) / parts;
        range_fn(0, std::min<int64_t>(n, chunk));
        while (pending_.load(std::memory_order_acquire) != 0) std::this_thread::yield();
        job_ = nullptr;
    }

private:
    void ensure(int helpers) {
        if (spawned_ >= helpers) return;
        std::lock_guard lk(m_);
        while (spawned_ < helpers) {
            const int id = spawned_++;
            std::thread([this, id] { loop(id); }).detach();
        }
    }

    void loop(int id) {
        uint64_t seen = 0;
        for (;;) {
            uint64_t g;
            auto spin_start = std::chrono::steady_clock::now();
            while ((g = generation_.load(std::memory_order_acquire)) == seen) {
                std::this_thread::yield();
                if (std::chrono::steady_clock::now() - spin_start > std::chrono::milliseconds(50)) {
                    std::unique_lock lk(m_);
                    if (generation_.load(std::memory_order_acquire) == seen) {
                        parked_.fetch_add(1, std::memory_order_release);
                        cv_.wait_for(lk, std::chrono::milliseconds(20));
                        parked_.fetch_sub(1, std::memory_order_release);
                    }
                    spin_start = std::chrono::steady_clock::now();
                }
            }
            seen = g;
            const auto* job = job_;
            const int64_t n = job_n_;
            const int helpers = job_helpers_;
            if (id < helpers) {
                if (job) {
                    const int parts = helpers + 1;
                    const int64_t chunk = (n + parts - 1) / parts;
                    const int64_t lo = static_cast<int64_t>(id + 1) * chunk;
                    const int64_t hi = std::min<int64_t>(n, lo + chunk);
                    if (lo < hi) (*job)(lo, hi);
                }
                pending_.fetch_sub(1, std::memory_order_release);
            }
        }
    }

    std::mutex m_;
    std::condition_variable cv_;
    const std::function<void(int64_t, int64_t)>* job_ = nullptr;
    int64_t job_n_ = 0;
    int job_helpers_ = 0;
    std::atomic<int> pending_{0};
    std::atomic<int> parked_{0};
    std::atomic<uint64_t> generation_{0};
    int spawned_ = 0;
};

}  // namespace detail_pool

// Splits [0,n) into contiguous chunks, one per worker. Every index is owned by
// exactly one thread and inner reductions stay sequential, so results are
// bit-identical for any thread count.
template <typename Fn>
void parallel_for(int64_t n, const Fn& fn) {
    const int workers = thread_count();
    if (workers <= 1 || n < 2) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::function<void(int64_t, int64_t)> range = [&fn](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) fn(i);
    };
    detail_pool::WorkerPool::get().run(n, range, workers - 1);
}

}  // namespace meddet
