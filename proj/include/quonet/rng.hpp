#pragma once

// Deterministic pseudorandom streams. Everything in the simulator that needs
// randomness draws from these generators so that a run is a pure function of
// its seeds, independent of platform and standard-library version
// (std::<distribution> output is implementation-defined; these are not).
//
// splitmix64: seed expansion / stream derivation.
// xoshiro256**: the working generator and the documented keystream.

#include <array>
#include <cstdint>
#include <cstddef>
#include <vector>

namespace quonet {

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Derive an independent stream seed from a base seed and a lane tag.
inline uint64_t derive_seed(uint64_t base, uint64_t lane) {
    uint64_t s = base ^ (0xa076'1d64'78bd'642fULL * (lane + 1));
    uint64_t a = splitmix64(s);
    uint64_t b = splitmix64(s);
    return a ^ (b << 1);
}

class Xoshiro256ss {
public:
    Xoshiro256ss() : Xoshiro256ss(0) {}

    explicit Xoshiro256ss(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& w : state_) w = splitmix64(sm);
    }

    // Seed directly from four state words (used by the keyed stream cipher).
    // An all-zero state is invalid for xoshiro; fall back to expansion.
    explicit Xoshiro256ss(const std::array<uint64_t, 4>& words) : state_(words) {
        if ((state_[0] | state_[1] | state_[2] | state_[3]) == 0) {
            uint64_t sm = 0x6b6579'73747265ULL;
            for (auto& w : state_) w = splitmix64(sm);
        }
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1), 53-bit resolution.
    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    bool bernoulli(double p) {
        if (p <= 0.0) return false;
        if (p >= 1.0) return true;
        return next_unit() < p;
    }

    uint32_t next_bit() { return static_cast<uint32_t>(next_u64() >> 63); }

    // Unbiased integer in [0, bound) via rejection.
    uint64_t next_below(uint64_t bound) {
        if (bound <= 1) return 0;
        const uint64_t threshold = (0-bound) % bound;
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % bound;
        }
    }

    // Keystream bytes: successive next_u64() words, little-endian.
    void fill_bytes(uint8_t* out, std::size_t n) {
        std::size_t i = 0;
        while (i + 8 <= n) {
            uint64_t w = next_u64();
            for (int b = 0; b < 8; ++b) out[i++] = static_cast<uint8_t>(w >> (8 * b));
        }
        if (i < n) {
            uint64_t w = next_u64();
            for (int b = 0; i < n; ++b) out[i++] = static_cast<uint8_t>(w >> (8 * b));
        }
    }

    std::vector<uint8_t> bytes(std::size_t n) {
        std::vector<uint8_t> out(n);
        fill_bytes(out.data(), n);
        return out;
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::array<uint64_t, 4> state_{};
};

}  // namespace quonet
