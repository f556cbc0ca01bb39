#pragma once

// SipHash-2-4 (Aumasson & Bernstein), 64-bit output. Used for datagram
// authentication tags and key-verification digests. Keys are 128 bits,
// interpreted as two little-endian 64-bit words.

#include <array>
#include <cstdint>
#include <cstddef>

namespace quonet {

using SipKey = std::array<uint8_t, 16>;

namespace detail {

inline uint64_t sip_rotl(uint64_t x, int b) { return (x << b) | (x >> (64 - b)); }

inline uint64_t sip_load_le64(const uint8_t* p) {
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

inline void sip_round(uint64_t& v0, uint64_t& v1, uint64_t& v2, uint64_t& v3) {
    v0 += v1; v1 = sip_rotl(v1, 13); v1 ^= v0; v0 = sip_rotl(v0, 32);
    v2 += v3; v3 = sip_rotl(v3, 16); v3 ^= v2;
    v0 += v3; v3 = sip_rotl(v3, 21); v3 ^= v0;
    v2 += v1; v1 = sip_rotl(v1, 17); v1 ^= v2; v2 = sip_rotl(v2, 32);
}

}  // namespace detail

inline uint64_t siphash24(const SipKey& key, const uint8_t* data, std::size_t len) {
    using namespace detail;
    const uint64_t k0 = sip_load_le64(key.data());
    const uint64_t k1 = sip_load_le64(key.data() + 8);
    uint64_t v0 = k0 ^ 0x736f6d6570736575ULL;
    uint64_t v1 = k1 ^ 0x646f72616e646f6dULL;
    uint64_t v2 = k0 ^ 0x6c7967656e657261ULL;
    uint64_t v3 = k1 ^ 0x7465646279746573ULL;

    const std::size_t full = len & ~std::size_t{7};
    for (std::size_t i = 0; i < full; i += 8) {
        uint64_t m = sip_load_le64(data + i);
        v3 ^= m;
        sip_round(v0, v1, v2, v3);
        sip_round(v0, v1, v2, v3);
        v0 ^= m;
    }

    uint64_t last = static_cast<uint64_t>(len & 0xff) << 56;
    for (std::size_t i = 0; i < (len & 7); ++i)
        last |= static_cast<uint64_t>(data[full + i]) << (8 * i);
    v3 ^= last;
    sip_round(v0, v1, v2, v3);
    sip_round(v0, v1, v2, v3);
    v0 ^= last;

    v2 ^= 0xff;
    for (int i = 0; i < 4; ++i) sip_round(v0, v1, v2, v3);
    return v0 ^ v1 ^ v2 ^ v3;
}

template <typename Container>
uint64_t siphash24(const SipKey& key, const Container& c) {
    return siphash24(key, reinterpret_cast<const uint8_t*>(c.data()), c.size());
}

}  // namespace quonet
