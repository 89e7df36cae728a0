#pragma once

#include <array>
#include <cstdint>

namespace vqlcmd {

// xoshiro256++ seeded via splitmix64. Self-contained so that checkpointed rng
// state is exactly four words, with no hidden distribution caches.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

    void reseed(std::uint64_t seed);

    std::uint64_t next_u64();

    // Uniform on [0, 1), 53-bit resolution.
    double uniform();
    // Uniform on [lo, hi).
    double uniform(double lo, double hi);
    // Standard normal via Box-Muller (two uniforms per draw, no spare kept).
    double normal();
    // Uniform on {0, ..., n-1}.
    int uniform_int(int n);
    // Bernoulli with probability p of returning true.
    bool bernoulli(double p);

    std::array<std::uint64_t, 4> state() const { return state_; }
    void set_state(const std::array<std::uint64_t, 4>& s) { state_ = s; }

private:
    std::array<std::uint64_t, 4> state_{};
};

}  // namespace vqlcmd
