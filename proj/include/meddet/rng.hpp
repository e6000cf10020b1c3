// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>

namespace meddet {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Counter-based generator keyed by (seed, index, stage). Any draw is a pure
// function of the key and the draw counter, so images, parameter tensors and
// noise fields can be regenerated in isolation and in parallel.
class CounterRng {
public:
    CounterRng(uint64_t seed, uint64_t index = 0, uint64_t stage = 0)
        : key_(splitmix64(seed ^ splitmix64(index ^ splitmix64(stage + 0x632be59bd9b4e019ULL)))) {}

    uint64_t next_u64() { return splitmix64(key_ + (++counter_) * 0x9e3779b97f4a7c15ULL); }

    // uniform in [0,1)
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // uniform integer in [lo, hi] inclusive
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return lo + static_cast<int64_t>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
    }

    // Box-Muller, one value per call (the pair's partner is discarded to keep
    // the draw count independent of call parity).
    double gaussian(double mean = 0.0, double stddev = 1.0) {
        double u1 = 0.0;
        do {
            u1 = next_double();
        } while (u1 <= 0.0);
        const double u2 = next_double();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(6.283185307179586476925287 * u2);
    }

    uint64_t state() const { return key_ ^ counter_; }

private:
    uint64_t key_;
    uint64_t counter_ = 0;
};

}  // namespace meddet
