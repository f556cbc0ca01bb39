#pragma once

// The classical companion network: authenticated, tamper-free message
// transport between named nodes with per-pair drop probability and latency,
// driven by a global integer tick clock. All protocol traffic (sifting,
// acks, handshakes, management) rides this layer.

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"
#include "wire.hpp"

namespace quonet {

using NodeId = std::string;
using Tick = uint64_t;

struct ClassicalChannelParams {
    double drop_probability = 0.0;
    uint32_t latency_ticks = 0;
    uint64_t seed = 0;

    void validate() const {
        require(drop_probability >= 0.0 && drop_probability <= 1.0, Errc::invalid_input,
                "drop_probability out of [0,1]");
    }
};

struct Message {
    NodeId source;
    NodeId destination;
    std::string channel_label;
    Bytes payload;
    uint64_t message_id = 0;  // assigned by the network, increasing per (source, label)
};

struct ChannelStats {
    uint64_t sent = 0;
    uint64_t dropped = 0;
    uint64_t delivered = 0;
};

class Network {
public:
    explicit Network(uint64_t seed = 0) : seed_(seed) {}

    void add_node(const std::string& name) {
        require(!name.empty(), Errc::invalid_input, "node name empty");
        require(!boxes_.count(name), Errc::invalid_input, "duplicate node '" + name + "'");
        boxes_.emplace(name, NodeBox{});
        node_order_.push_back(name);
    }

    bool has_node(const NodeId& n) const { return boxes_.count(n) != 0; }

    const std::vector<NodeId>& nodes() const { return node_order_; }

    void set_channel(const NodeId& a, const NodeId& b, const ClassicalChannelParams& params) {
        params.validate();
        check_node(a);
        check_node(b);
        auto key = pair_key(a, b);
        auto& ch = channels_[key];
        ch.params = params;
        ch.rng = Xoshiro256ss(params.seed);
    }

    const ChannelStats& channel_stats(const NodeId& a, const NodeId& b) {
        return channel(a, b).stats;
    }

    Tick now() const { return tick_; }

    // Test-only fault injection point: may mutate a message in flight.
    // The simulated channel itself never corrupts payloads.
    void set_fault_injector(std::function<void(Message&)> fn) { fault_injector_ = std::move(fn); }

    uint64_t send(Message msg) {
        check_node(msg.source);
        check_node(msg.destination);
        require(msg.source != msg.destination, Errc::invalid_input, "source equals destination");

        auto& box = boxes_.at(msg.source);
        msg.message_id = ++box.next_message_id[msg.channel_label];

        Channel& ch = channel(msg.source, msg.destination);
        ch.stats.sent++;
        uint64_t ticket = ++send_seq_;
        if (ch.rng.bernoulli(ch.params.drop_probability)) {
            ch.stats.dropped++;
            return ticket;
        }
        ch.stats.delivered++;
        if (fault_injector_) fault_injector_(msg);

        Tick deliver_at = tick_ + ch.params.latency_ticks;
        if (deliver_at <= tick_) {
            boxes_.at(msg.destination).inbox[msg.channel_label].push_back(std::move(msg));
        } else {
            in_flight_.emplace(std::make_pair(deliver_at, ticket), std::move(msg));
        }
        return ticket;
    }

    std::optional<Message> receive(const NodeId& node, const std::string& label) {
        check_node(node);
        auto& inbox = boxes_.at(node).inbox;
        auto it = inbox.find(label);
        if (it == inbox.end() || it->second.empty()) return std::nullopt;
        Message m = std::move(it->second.front());
        it->second.pop_front();
        return m;
    }

    // Removes and returns the first queued message satisfying pred, leaving
    // unrelated traffic on the same label untouched.
    std::optional<Message> receive_matching(const NodeId& node, const std::string& label,
                                            const std::function<bool(const Message&)>& pred) {
        check_node(node);
        auto& inbox = boxes_.at(node).inbox;
        auto it = inbox.find(label);
        if (it == inbox.end()) return std::nullopt;
        for (auto qit = it->second.begin(); qit != it->second.end(); ++qit) {
            if (pred(*qit)) {
                Message m = std::move(*qit);
                it->second.erase(qit);
                return m;
            }
        }
        return std::nullopt;
    }

    void step(uint64_t ticks = 1) {
        while (ticks--) {
            ++tick_;
            while (!in_flight_.empty() && in_flight_.begin()->first.first <= tick_) {
                Message m = std::move(in_flight_.begin()->second);
                in_flight_.erase(in_flight_.begin());
                boxes_.at(m.destination).inbox[m.channel_label].push_back(std::move(m));
            }
        }
    }

private:
    struct NodeBox {
        std::map<std::string, std::deque<Message>> inbox;
        std::map<std::string, uint64_t> next_message_id;
    };

    struct Channel {
        ClassicalChannelParams params;
        Xoshiro256ss rng;
        ChannelStats stats;
    };

    static std::pair<NodeId, NodeId> pair_key(const NodeId& a, const NodeId& b) {
        return a < b ? std::make_pair(a, b) : std::make_pair(b, a);
    }

    void check_node(const NodeId& n) const {
        require(boxes_.count(n) != 0, Errc::unknown_node, "node '" + n + "' not registered");
    }

    // Unconfigured pairs get a default lossless zero-latency channel: the
    // classical underlay is assumed fully connected.
    Channel& channel(const NodeId& a, const NodeId& b) {
        auto key = pair_key(a, b);
        auto it = channels_.find(key);
        if (it == channels_.end()) {
            Channel ch;
            uint64_t lane = 0;
            for (char c : key.first + "|" + key.second)
                lane = lane * 131 + static_cast<unsigned char>(c);
            ch.params.seed = derive_seed(seed_, lane);
            ch.rng = Xoshiro256ss(ch.params.seed);
            it = channels_.emplace(key, std::move(ch)).first;
        }
        return it->second;
    }

    uint64_t seed_;
    Tick tick_ = 0;
    uint64_t send_seq_ = 0;
    std::map<NodeId, NodeBox> boxes_;
    std::vector<NodeId> node_order_;
    std::map<std::pair<NodeId, NodeId>, Channel> channels_;
    // keyed by (deliver_tick, send ticket) so equal-latency delivery is FIFO
    std::map<std::pair<Tick, uint64_t>, Message> in_flight_;
    std::function<void(Message&)> fault_injector_;
};

// ---------------------------------------------------------------------------
// Stop-and-wait record exchange for protocol conversations (QKD records,
// circuit handshakes). The caller drives both conversation ends, so one call
// both delivers the payload and observes the returning ack; drops on either
// direction are healed by retransmission. Envelope format: docs/formats.md.

struct XferPolicy {
    uint32_t ack_timeout_ticks = 8;
    uint32_t max_attempts = 64;
};

class RecordConversation {
public:
    RecordConversation(Network& net, NodeId a, NodeId b, std::string label, uint64_t nonce)
        : net_(net), a_(std::move(a)), b_(std::move(b)), label_(std::move(label)), nonce_(nonce) {}

    // Reliably moves payload from one conversation end to the other; returns
    // the bytes as seen by the receiver. Throws SessionTimeout when the
    // channel never delivers within the policy budget.
    Bytes transfer(const NodeId& from, const Bytes& payload, XferPolicy policy = {}) {
        const NodeId& to = (from == a_) ? b_ : a_;
        int dir = (from == a_) ? 0 : 1;
        uint64_t seq = tx_seq_[dir]++;

        WireWriter w;
        w.u64(nonce_);
        w.u64(seq);
        w.u8(0);  // data
        w.raw(payload.data(), payload.size());
        Bytes frame = w.take();

        std::optional<Bytes> delivered;
        for (uint32_t attempt = 0; attempt < policy.max_attempts; ++attempt) {
            net_.send(Message{from, to, label_, frame, 0});
            for (uint32_t t = 0; t <= policy.ack_timeout_ticks; ++t) {
                // Receiver side: accept the record (or re-ack a duplicate).
                while (auto m = net_.receive_matching(to, label_, match_nonce())) {
                    WireReader r(m->payload);
                    r.u64();
                    uint64_t got_seq = r.u64();
                    uint8_t is_ack = r.u8();
                    if (is_ack) continue;  // stale ack addressed to the other role
                    if (got_seq == seq && !delivered) {
                        delivered = Bytes(m->payload.begin() + 17, m->payload.end());
                    }
                    if (got_seq <= seq) send_ack(to, from, got_seq);
                }
                // Sender side: wait for the ack.
                while (auto m = net_.receive_matching(from, label_, match_nonce())) {
                    WireReader r(m->payload);
                    r.u64();
                    uint64_t got_seq = r.u64();
                    if (r.u8() && got_seq == seq && delivered) return *delivered;
                }
                net_.step();
            }
        }
        fail(Errc::session_timeout,
             "no acknowledgment on '" + label_ + "' after retries (channel down?)");
    }

private:
    std::function<bool(const Message&)> match_nonce() const {
        uint64_t nonce = nonce_;
        return [nonce](const Message& m) {
            if (m.payload.size() < 17) return false;
            WireReader r(m.payload);
            return r.u64() == nonce;
        };
    }

    void send_ack(const NodeId& from, const NodeId& to, uint64_t seq) {
        WireWriter w;
        w.u64(nonce_);
        w.u64(seq);
        w.u8(1);  // ack
        net_.send(Message{from, to, label_, w.take(), 0});
    }

    Network& net_;
    NodeId a_, b_;
    std::string label_;
    uint64_t nonce_;
    uint64_t tx_seq_[2] = {0, 0};
};

}  // namespace quonet
