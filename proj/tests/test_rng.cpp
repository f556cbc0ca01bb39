#include <catch2/catch_amalgamated.hpp>

#include <quonet/rng.hpp>

using namespace quonet;

TEST_CASE("xoshiro stream is stable across builds") {
    // Frozen reference outputs; the keyed-stream cipher and every seeded
    // scenario depend on this exact sequence.
    Xoshiro256ss r(42);
    REQUIRE(r.next_u64() == 0x15780b2e0c2ec716ULL);
    REQUIRE(r.next_u64() == 0x6104d9866d113a7eULL);
    REQUIRE(r.next_u64() == 0xae17533239e499a1ULL);
    REQUIRE(r.next_u64() == 0xecb8ad4703b360a1ULL);
}

TEST_CASE("identical seeds give identical streams") {
    Xoshiro256ss a(12345), b(12345);
    for (int i = 0; i < 1000; ++i) REQUIRE(a.next_u64() == b.next_u64());
}

TEST_CASE("derive_seed separates lanes") {
    REQUIRE(derive_seed(7, 0) != derive_seed(7, 1));
    REQUIRE(derive_seed(7, 0) == derive_seed(7, 0));
}

TEST_CASE("next_unit stays in [0,1)") {
    Xoshiro256ss r(9);
    for (int i = 0; i < 10000; ++i) {
        double u = r.next_unit();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
    }
}

TEST_CASE("bernoulli matches its probability within 3 sigma") {
    Xoshiro256ss r(2024);
    const int n = 100000;
    const double p = 0.3;
    int hits = 0;
    for (int i = 0; i < n; ++i) hits += r.bernoulli(p) ? 1 : 0;
    double sigma = std::sqrt(n * p * (1 - p));
    REQUIRE(std::abs(hits - n * p) <= 3 * sigma);
}

TEST_CASE("next_below is bounded and covers small ranges") {
    Xoshiro256ss r(5);
    bool seen[7] = {};
    for (int i = 0; i < 1000; ++i) {
        uint64_t v = r.next_below(7);
        REQUIRE(v < 7);
        seen[v] = true;
    }
    for (bool s : seen) REQUIRE(s);
}

TEST_CASE("fill_bytes emits little-endian words") {
    Xoshiro256ss a(42), b(42);
    uint64_t w = a.next_u64();
    auto bytes = b.bytes(8);
    for (int i = 0; i < 8; ++i) REQUIRE(bytes[i] == static_cast<uint8_t>(w >> (8 * i)));
}
