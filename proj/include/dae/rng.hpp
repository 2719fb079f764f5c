#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <span>
#include <stdexcept>

namespace dae {

/// SplitMix64 finalizer. Bijective on 64-bit words.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Derives an independent key from a seed and a list of stream coordinates
/// (run, iteration, actor, ...). Equal coordinates give equal keys.
constexpr std::uint64_t stream_key(std::uint64_t seed, std::initializer_list<std::uint64_t> coords) noexcept {
    std::uint64_t k = mix64(seed);
    for (auto c : coords) k = mix64(k ^ mix64(c + 0x632be59bd9b4e019ULL));
    return k;
}

/// Counter-based generator: the i-th draw is a pure function of (key, i),
/// so any stream can be replayed from its key and counter alone.
class CounterRng {
public:
    explicit constexpr CounterRng(std::uint64_t key, std::uint64_t counter = 0) noexcept
        : key_(key), counter_(counter) {}

    constexpr std::uint64_t next_u64() noexcept { return mix64(key_ ^ mix64(counter_++)); }

    /// Uniform in [0, 1) with 53 random bits.
    constexpr double uniform() noexcept {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Index drawn from a discrete distribution given by `probs` (need not be
    /// exactly normalised; the last positive entry absorbs rounding).
    std::size_t categorical(std::span<const double> probs) {
        if (probs.empty()) throw std::invalid_argument("categorical: empty distribution");
        double total = 0.0;
        for (double p : probs) total += p;
        const double u = uniform() * total;
        double acc = 0.0;
        std::size_t last_positive = 0;
        for (std::size_t i = 0; i < probs.size(); ++i) {
            if (probs[i] <= 0.0) continue;
            last_positive = i;
            acc += probs[i];
            if (u < acc) return i;
        }
        return last_positive;
    }

    /// Standard normal via Box-Muller (consumes two draws).
    double normal() noexcept {
        double u1 = uniform();
        const double u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    constexpr std::uint64_t key() const noexcept { return key_; }
    constexpr std::uint64_t counter() const noexcept { return counter_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_;
};

}  // namespace dae
