#pragma once

// Counter-based random numbers: every draw is a pure function of
// (seed, stream, counter), so substreams can be handed to independent
// trials or runs without any shared state.

#include <cmath>
#include <cstdint>

namespace memvuln {

// SplitMix64 finalizer.
constexpr std::uint64_t splitmix64(std::uint64_t z) noexcept
{
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

class CounterRng {
  public:
    using result_type = std::uint64_t;

    constexpr CounterRng(std::uint64_t seed, std::uint64_t stream = 0) noexcept
        : key_(splitmix64(seed ^ splitmix64(stream + 0x632be59bd9b4e019ull)))
    {
    }

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return ~result_type{0}; }

    constexpr result_type operator()() noexcept { return splitmix64(key_ + 0x9e3779b97f4a7c15ull * ++counter_); }

    // Uniform on [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

    // Uniform on (0, 1).
    double uniform_open() noexcept
    {
        double u;
        do
            u = uniform();
        while (u == 0.0);
        return u;
    }

    // Uniform integer on [0, n), unbiased (rejection on the top range).
    std::uint64_t below(std::uint64_t n) noexcept
    {
        if (n <= 1)
            return 0;
        const std::uint64_t limit = max() - max() % n;
        std::uint64_t v;
        do
            v = (*this)();
        while (v >= limit);
        return v % n;
    }

    double exponential(double rate) noexcept { return -std::log(uniform_open()) / rate; }

    std::uint64_t counter() const noexcept { return counter_; }

  private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace memvuln
