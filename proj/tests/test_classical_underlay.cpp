#include <catch2/catch_amalgamated.hpp>

#include <quonet/classical_underlay.hpp>

#include <cmath>

using namespace quonet;

namespace {

Network two_nodes(double drop = 0.0, uint32_t latency = 0, uint64_t seed = 1) {
    Network net(seed);
    net.add_node("a");
    net.add_node("b");
    net.set_channel("a", "b", {drop, latency, seed});
    return net;
}

Message msg(const char* from, const char* to, const char* label, std::string payload) {
    return Message{from, to, label, Bytes(payload.begin(), payload.end()), 0};
}

}  // namespace

TEST_CASE("lossless zero-latency channel delivers in the same tick") {
    auto net = two_nodes();
    net.send(msg("a", "b", "data", "hello"));
    auto m = net.receive("b", "data");
    REQUIRE(m.has_value());
    REQUIRE(to_string(m->payload) == "hello");
}

TEST_CASE("certain drop delivers nothing") {
    auto net = two_nodes(1.0);
    for (int i = 0; i < 100; ++i) net.send(msg("a", "b", "data", "x"));
    net.step(10);
    REQUIRE_FALSE(net.receive("b", "data").has_value());
}

TEST_CASE("drop rate matches binomial oracle within 3 sigma") {
    auto net = two_nodes(0.3, 0, 99);
    const int n = 10000;
    for (int i = 0; i < n; ++i) net.send(msg("a", "b", "data", "x"));
    net.step(2);
    int delivered = 0;
    while (net.receive("b", "data")) ++delivered;
    double sigma = std::sqrt(n * 0.3 * 0.7);
    REQUIRE(std::abs(delivered - n * 0.7) <= 3 * sigma);
}

TEST_CASE("per-flow FIFO at equal latency") {
    auto net = two_nodes(0.0, 2);
    net.send(msg("a", "b", "data", "first"));
    net.send(msg("a", "b", "data", "second"));
    REQUIRE_FALSE(net.receive("b", "data").has_value());
    net.step(2);
    REQUIRE(to_string(net.receive("b", "data")->payload) == "first");
    REQUIRE(to_string(net.receive("b", "data")->payload) == "second");
}

TEST_CASE("lower latency message is receivable first") {
    Network net(1);
    net.add_node("a");
    net.add_node("b");
    net.add_node("c");
    net.set_channel("a", "b", {0.0, 5, 1});
    net.set_channel("a", "c", {0.0, 0, 1});
    net.send(msg("a", "b", "data", "slow"));
    net.send(msg("a", "c", "data", "fast"));
    REQUIRE(net.receive("c", "data").has_value());
    REQUIRE_FALSE(net.receive("b", "data").has_value());
    net.step(5);
    REQUIRE(net.receive("b", "data").has_value());
}

TEST_CASE("payload integrity") {
    auto net = two_nodes();
    Bytes payload;
    for (int i = 0; i < 4096; ++i) payload.push_back(static_cast<uint8_t>(i * 37));
    net.send(Message{"a", "b", "data", payload, 0});
    auto m = net.receive("b", "data");
    REQUIRE(m->payload == payload);
}

TEST_CASE("unknown node and self-send are rejected") {
    auto net = two_nodes();
    REQUIRE_THROWS_AS(net.send(msg("a", "nope", "data", "x")), Error);
    REQUIRE_THROWS_AS(net.send(msg("a", "a", "data", "x")), Error);
}

TEST_CASE("message ids increase per (source, label)") {
    auto net = two_nodes();
    for (int i = 0; i < 5; ++i) net.send(msg("a", "b", "data", "x"));
    net.send(msg("a", "b", "other", "y"));
    uint64_t prev = 0;
    for (int i = 0; i < 5; ++i) {
        auto m = net.receive("b", "data");
        REQUIRE(m->message_id > prev);
        prev = m->message_id;
    }
    REQUIRE(net.receive("b", "other")->message_id == 1);
}

TEST_CASE("determinism under a fixed seed and schedule") {
    auto run = [] {
        auto net = two_nodes(0.4, 1, 777);
        std::vector<std::string> got;
        for (int i = 0; i < 200; ++i) {
            net.send(msg("a", "b", "data", "m" + std::to_string(i)));
            net.step();
            while (auto m = net.receive("b", "data")) got.push_back(to_string(m->payload));
        }
        return got;
    };
    REQUIRE(run() == run());
}

TEST_CASE("receive_matching leaves unrelated traffic queued") {
    auto net = two_nodes();
    net.send(msg("a", "b", "data", "one"));
    net.send(msg("a", "b", "data", "two"));
    auto m = net.receive_matching("b", "data", [](const Message& m) {
        return to_string(m.payload) == "two";
    });
    REQUIRE(m.has_value());
    REQUIRE(to_string(net.receive("b", "data")->payload) == "one");
}

TEST_CASE("record conversation survives a lossy channel") {
    auto net = two_nodes(0.4, 0, 4242);
    RecordConversation conv(net, "a", "b", "ctl", 99);
    for (int i = 0; i < 20; ++i) {
        Bytes payload = to_bytes("record-" + std::to_string(i));
        Bytes got = conv.transfer(i % 2 ? "b" : "a", payload);
        REQUIRE(got == payload);
    }
}

TEST_CASE("record conversation times out on a dead channel") {
    auto net = two_nodes(1.0);
    RecordConversation conv(net, "a", "b", "ctl", 1);
    XferPolicy policy{2, 4};
    REQUIRE_THROWS_MATCHES(conv.transfer("a", to_bytes("x"), policy), Error,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("SessionTimeout")));
}
