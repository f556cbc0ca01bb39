#pragma once

// The SDK surface of the quantum overlay: four circuit kinds over one
// configured link, fed by the link's key pools. Key material moves in
// handshake-coordinated grants (epoch blocks) sub-allocated to pads, tag
// keys, stream seeds and synchronized-random arenas, so no pool byte is ever
// used twice and both replicas keep identical consumed offsets. Frame and
// handshake formats: docs/formats.md.

#include <array>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "classical_underlay.hpp"
#include "errors.hpp"
#include "management_plane.hpp"
#include "qkd_engine.hpp"
#include "siphash.hpp"
#include "wire.hpp"

namespace quonet {

enum class CircuitKind : uint8_t {
    secure_lossy_datagram = 0,
    secure_reliable_datagram = 1,
    secure_reliable_bytestream = 2,
    synchronized_random = 3,
};

inline const char* kind_name(CircuitKind k) {
    switch (k) {
        case CircuitKind::secure_lossy_datagram: return "lossy";
        case CircuitKind::secure_reliable_datagram: return "reliable";
        case CircuitKind::secure_reliable_bytestream: return "bytestream";
        case CircuitKind::synchronized_random: return "syncrand";
    }
    return "?";
}

enum class CipherMode : uint8_t { one_time_pad = 0, keyed_stream = 1 };

struct CircuitConfig {
    CircuitKind kind = CircuitKind::secure_reliable_datagram;
    std::optional<uint64_t> key_refresh_datagrams = 64;
    std::optional<uint64_t> key_refresh_ticks;
    CipherMode cipher_mode = CipherMode::keyed_stream;
    uint32_t max_datagram_bytes = 1024;
    uint32_t retransmit_limit = 16;
    uint32_t ack_timeout_ticks = 8;

    void validate() const {
        require(max_datagram_bytes > 0, Errc::invalid_input, "max_datagram_bytes must be > 0");
        require(retransmit_limit > 0, Errc::invalid_input, "retransmit_limit must be > 0");
        require(ack_timeout_ticks > 0, Errc::invalid_input, "ack_timeout_ticks must be > 0");
        if (key_refresh_datagrams)
            require(*key_refresh_datagrams > 0, Errc::invalid_input,
                    "key_refresh_datagrams must be > 0");
        if (key_refresh_ticks)
            require(*key_refresh_ticks > 0, Errc::invalid_input, "key_refresh_ticks must be > 0");
        if (kind != CircuitKind::synchronized_random)
            require(key_refresh_datagrams || key_refresh_ticks, Errc::invalid_input,
                    "datagram kinds need at least one key refresh trigger");
        if (cipher_mode == CipherMode::one_time_pad)
            require(key_refresh_datagrams.has_value(), Errc::invalid_input,
                    "one_time_pad sizing needs key_refresh_datagrams");
    }

    // Draws per epoch for synchronized_random circuits.
    uint64_t sync_draw_cap() const { return key_refresh_datagrams.value_or(64); }
};

struct CircuitStats {
    uint64_t sent = 0;
    uint64_t retransmitted = 0;
    uint64_t received_ok = 0;
    uint64_t discarded = 0;
    uint64_t delivery_failures = 0;
};

struct CircuitHandle {
    uint64_t id = 0;
    CircuitKind kind = CircuitKind::secure_reliable_datagram;
    NodeId local;
    NodeId peer;
    bool via_path = false;
    std::string path_name;
};

// ---------------------------------------------------------------------------
// Key consumption ledger. Every grant and every sub-draw is recorded; the
// audit proves grants are disjoint, sub-draws stay inside their grant and
// never overlap, and one-time-pad traffic consumed at least as many pad
// bytes as plaintext bytes.

struct LedgerEntry {
    enum class Purpose : uint8_t { grant, tag_key, stream_seed, pad_arena, sync_arena, pad, sync_draw };
    Purpose purpose;
    uint64_t begin = 0;
    uint64_t end = 0;
    uint64_t circuit = 0;
    uint32_t epoch = 0;
    int dir = 0;
    uint64_t plaintext_bytes = 0;
};

struct LedgerAudit {
    bool ok = true;
    std::vector<std::string> violations;
    uint64_t granted_bytes = 0;
    uint64_t otp_pad_bytes = 0;
    uint64_t otp_plaintext_bytes = 0;

    void flag(const std::string& v) {
        ok = false;
        violations.push_back(v);
    }
};

inline LedgerAudit audit_ledger(std::vector<LedgerEntry> entries) {
    using P = LedgerEntry::Purpose;
    LedgerAudit audit;

    // Exact-duplicate sync draws are the two replicas of one logical draw.
    std::set<std::tuple<uint64_t, uint64_t, uint64_t>> sync_seen;
    std::vector<LedgerEntry> draws, layouts, grants;
    for (auto& e : entries) {
        if (e.purpose == P::grant) {
            grants.push_back(e);
        } else if (e.purpose == P::pad || e.purpose == P::sync_draw) {
            if (e.purpose == P::sync_draw &&
                !sync_seen.insert({e.circuit, e.begin, e.end}).second)
                continue;
            draws.push_back(e);
        } else {
            layouts.push_back(e);
        }
    }

    auto check_disjoint = [&](std::vector<LedgerEntry>& v, const char* what) {
        std::sort(v.begin(), v.end(),
                  [](const LedgerEntry& x, const LedgerEntry& y) { return x.begin < y.begin; });
        for (std::size_t i = 1; i < v.size(); ++i)
            if (v[i].begin < v[i - 1].end)
                audit.flag(std::string(what) + " ranges overlap at byte " +
                           std::to_string(v[i].begin));
    };
    check_disjoint(grants, "grant");
    check_disjoint(layouts, "layout");
    check_disjoint(draws, "draw");

    auto contained = [&](const LedgerEntry& e, const std::vector<LedgerEntry>& outer) {
        for (const auto& g : outer)
            if (e.begin >= g.begin && e.end <= g.end) return true;
        return false;
    };
    for (const auto& e : layouts)
        if (!contained(e, grants)) audit.flag("layout range outside any grant");
    for (const auto& e : draws) {
        if (!contained(e, layouts)) audit.flag("draw range outside its arena");
        if (e.purpose == P::pad) {
            audit.otp_pad_bytes += e.end - e.begin;
            audit.otp_plaintext_bytes += e.plaintext_bytes;
        }
    }
    for (const auto& g : grants) audit.granted_bytes += g.end - g.begin;
    if (audit.otp_pad_bytes < audit.otp_plaintext_bytes)
        audit.flag("one-time pad consumed fewer key bytes than plaintext bytes");
    return audit;
}

// ---------------------------------------------------------------------------

namespace frame {

enum : uint8_t {
    lossy = 1,
    reliable = 2,
    stream = 3,
    stream_fin = 4,
    sync_fwd = 5,
    ack = 6,
};

struct Frame {
    uint64_t circuit_id = 0;
    uint8_t type = 0;
    uint8_t dir = 0;  // 0: link node_a -> node_b; for acks, the acked data direction
    uint32_t epoch = 0;
    uint64_t seq = 0;
    uint64_t pad_offset = 0;
    Bytes ciphertext;
    uint64_t tag = 0;
};

inline Bytes encode_unsigned(const Frame& f) {
    WireWriter w;
    w.u64(f.circuit_id);
    w.u8(f.type);
    w.u8(f.dir);
    w.u32(f.epoch);
    w.u64(f.seq);
    w.u64(f.pad_offset);
    w.blob(f.ciphertext);
    return w.take();
}

inline Bytes encode(const Frame& f) {
    Bytes b = encode_unsigned(f);
    WireWriter w;
    w.raw(b.data(), b.size());
    w.u64(f.tag);
    return w.take();
}

inline Frame decode(const Bytes& b) {
    WireReader r(b);
    Frame f;
    f.circuit_id = r.u64();
    f.type = r.u8();
    f.dir = r.u8();
    f.epoch = r.u32();
    f.seq = r.u64();
    f.pad_offset = r.u64();
    f.ciphertext = r.blob();
    f.tag = r.u64();
    require(r.done(), Errc::invalid_input, "trailing bytes in frame");
    return f;
}

}  // namespace frame

// Per-datagram keystream for keyed_stream mode; bit-exact derivation
// documented in docs/formats.md.
inline Xoshiro256ss datagram_keystream(const std::array<uint64_t, 4>& seed_words, uint64_t seq) {
    SipKey k{};
    for (int i = 0; i < 8; ++i) {
        k[i] = static_cast<uint8_t>(seed_words[0] >> (8 * i));
        k[8 + i] = static_cast<uint8_t>(seed_words[1] >> (8 * i));
    }
    WireWriter w;
    w.u64(seq);
    w.u64(seed_words[2]);
    w.u64(seed_words[3]);
    return Xoshiro256ss(siphash24(k, w.view()));
}

struct OverlayHooks {
    std::function<void(Event)> emit;               // single-threaded contexts only
    std::function<void(uint64_t need)> ensure_pool;  // refill allocator replica or throw
    std::function<uint64_t()> next_circuit_id;
    std::function<void()> pool_changed;
};

// ---------------------------------------------------------------------------
// Dataplane runtime for one configured link. Owns both endpoints' circuit
// state; per-node message handling touches only that endpoint's side so node
// dispatch can run in parallel.

class OverlayLink {
public:
    OverlayLink(Network& net, NodeId node_a, NodeId node_b, std::string scope, OverlayHooks hooks)
        : net_(net),
          node_a_(std::move(node_a)),
          node_b_(std::move(node_b)),
          scope_(std::move(scope)),
          hooks_(std::move(hooks)) {
        allocator_is_a_ = node_a_ <= node_b_;
    }

    const NodeId& node_a() const { return node_a_; }
    const NodeId& node_b() const { return node_b_; }
    const std::string& scope() const { return scope_; }

    KeyPool& pool(const NodeId& n) { return n == node_a_ ? pool_a_ : pool_b_; }
    const KeyPool& pool(const NodeId& n) const { return n == node_a_ ? pool_a_ : pool_b_; }
    KeyPool& allocator_pool() { return allocator_is_a_ ? pool_a_ : pool_b_; }

    bool has_endpoint(const NodeId& n) const { return n == node_a_ || n == node_b_; }
    bool owns_circuit(uint64_t id) const { return circuits_.count(id) != 0; }

    std::vector<LedgerEntry> ledger() const { return ledger_; }

    // ------------------------------------------------------------------ open

    uint64_t open_circuit(const NodeId& opener, const CircuitConfig& cfg, XferPolicy xfer = {}) {
        cfg.validate();
        require(has_endpoint(opener), Errc::unknown_node, "opener is not a link endpoint");
        uint64_t need = grant_size(cfg);
        uint64_t want = std::max(need, allocator_pool().low_watermark());
        if (allocator_pool().available() < want) hooks_.ensure_pool(want);

        uint64_t cid = hooks_.next_circuit_id();
        RecordConversation conv(net_, node_a_, node_b_, "overlay-ctrl", derive_seed(cid, 0x0c));
        {
            WireWriter w;
            w.u8(1);  // OPEN
            w.u64(cid);
            w.u8(static_cast<uint8_t>(cfg.kind));
            w.u8(static_cast<uint8_t>(cfg.cipher_mode));
            w.u32(cfg.max_datagram_bytes);
            w.u64(cfg.key_refresh_datagrams.value_or(0));
            w.u64(cfg.key_refresh_ticks.value_or(0));
            conv.transfer(opener, w.take(), xfer);
        }

        CircuitState state;
        state.id = cid;
        state.cfg = cfg;
        state.opener_is_a = opener == node_a_;
        state.epoch_start_tick = net_.now();
        circuits_.emplace(cid, std::move(state));
        CircuitState& c = circuits_.at(cid);
        install_epoch(c, 0, conv, xfer);
        return cid;
    }

    // Runs the refresh handshake: next epoch keys for the circuit, old epochs
    // retained for in-flight traffic.
    uint32_t refresh_circuit(uint64_t cid, XferPolicy xfer = {}) {
        CircuitState& c = circuit(cid);
        uint64_t need = grant_size(c.cfg);
        try {
            if (allocator_pool().available() < need) hooks_.ensure_pool(need);
        } catch (const Error&) {
            if (!c.degraded) {
                c.degraded = true;
                Event e;
                e.tick = net_.now();
                e.scope = scope_;
                e.kind = EventKind::KEY_POOL_LOW;
                e.severity = Severity::critical;
                e.attributes["circuit"] = std::to_string(cid);
                e.attributes["reason"] = "refresh_failed";
                hooks_.emit(std::move(e));
            }
            fail(Errc::key_exhausted, "key refresh failed; old epoch retained");
        }
        RecordConversation conv(net_, node_a_, node_b_, "overlay-ctrl",
                                derive_seed(cid, 0x0d + c.current_epoch));
        uint32_t new_epoch = c.current_epoch + 1;
        {
            WireWriter w;
            w.u8(3);  // REFRESH
            w.u64(cid);
            w.u32(new_epoch);
            conv.transfer(c.opener_is_a ? node_a_ : node_b_, w.take(), xfer);
        }
        install_epoch(c, new_epoch, conv, xfer);
        c.current_epoch = new_epoch;
        c.epoch_start_tick = net_.now();
        c.ends[0].datagrams_this_epoch = 0;
        c.ends[1].datagrams_this_epoch = 0;
        Event e;
        e.tick = net_.now();
        e.scope = scope_;
        e.kind = EventKind::EPOCH_ROLLED;
        e.severity = Severity::info;
        e.attributes["circuit"] = std::to_string(cid);
        e.attributes["epoch"] = std::to_string(new_epoch);
        hooks_.emit(std::move(e));
        return new_epoch;
    }

    // ------------------------------------------------------------------ send

    // Lossy datagram: encrypt, frame, transmit once, fire and forget.
    uint64_t send_lossy(uint64_t cid, const NodeId& as, const Bytes& payload) {
        CircuitState& c = circuit(cid);
        require(c.cfg.kind == CircuitKind::secure_lossy_datagram, Errc::invalid_input,
                "circuit is not a lossy datagram circuit");
        check_payload(c, payload);
        maybe_count_refresh(c);
        EndpointState& ep = end(c, as);
        uint64_t seq = ep.next_seq++;
        frame::Frame f = build_data_frame(c, as, frame::lossy, seq, payload);
        net_.send(Message{as, peer_of(as), "overlay-data", frame::encode(f), 0});
        ep.stats.sent++;
        ep.datagrams_this_epoch++;
        return seq;
    }

    // Reliable enqueue; transmission, retries and failure detection happen in
    // service(). Returns the sequence id to wait on.
    uint64_t enqueue_reliable(uint64_t cid, const NodeId& as, uint8_t type, Bytes payload) {
        CircuitState& c = circuit(cid);
        check_payload(c, payload);
        maybe_count_refresh(c);
        EndpointState& ep = end(c, as);
        uint64_t seq = ep.next_seq++;
        ep.tx.push_back(TxItem{seq, type, std::move(payload), {}, 0, 0, false});
        ep.datagrams_this_epoch++;
        return seq;
    }

    bool confirmed(uint64_t cid, const NodeId& as, uint64_t seq) {
        return end(circuit(cid), as).confirmed_below > seq;
    }

    bool send_failed(uint64_t cid, const NodeId& as, uint64_t seq) {
        auto& failed = end(circuit(cid), as).failed;
        return std::find(failed.begin(), failed.end(), seq) != failed.end();
    }

    std::optional<Bytes> pop_surfaced(uint64_t cid, const NodeId& as) {
        EndpointState& ep = end(circuit(cid), as);
        if (ep.surfaced.empty()) return std::nullopt;
        Bytes b = std::move(ep.surfaced.front());
        ep.surfaced.pop_front();
        return b;
    }

    // ---------------------------------------------------------------- stream

    // Chunks bytes into datagram-sized reliable stream frames; returns the
    // last sequence id of this write.
    uint64_t stream_write(uint64_t cid, const NodeId& as, const Bytes& bytes) {
        CircuitState& c = circuit(cid);
        require(c.cfg.kind == CircuitKind::secure_reliable_bytestream, Errc::invalid_input,
                "circuit is not a bytestream");
        require(!bytes.empty(), Errc::invalid_input, "empty stream write");
        uint64_t last = 0;
        std::size_t off = 0;
        while (off < bytes.size()) {
            std::size_t n = std::min<std::size_t>(c.cfg.max_datagram_bytes, bytes.size() - off);
            last = enqueue_reliable(cid, as, frame::stream,
                                    Bytes(bytes.begin() + off, bytes.begin() + off + n));
            off += n;
        }
        return last;
    }

    uint64_t stream_close(uint64_t cid, const NodeId& as) {
        CircuitState& c = circuit(cid);
        require(c.cfg.kind == CircuitKind::secure_reliable_bytestream, Errc::invalid_input,
                "circuit is not a bytestream");
        return enqueue_reliable(cid, as, frame::stream_fin, {});
    }

    Bytes stream_read(uint64_t cid, const NodeId& as, std::size_t max_bytes) {
        EndpointState& ep = end(circuit(cid), as);
        drain_reorder(ep);
        std::size_t n = std::min(max_bytes, ep.stream_buf.size());
        Bytes out(ep.stream_buf.begin(), ep.stream_buf.begin() + n);
        ep.stream_buf.erase(ep.stream_buf.begin(), ep.stream_buf.begin() + n);
        return out;
    }

    bool stream_eof(uint64_t cid, const NodeId& as) {
        EndpointState& ep = end(circuit(cid), as);
        drain_reorder(ep);
        return ep.stream_fin_reached && ep.stream_buf.empty();
    }

    bool tx_idle(uint64_t cid, const NodeId& as) { return end(circuit(cid), as).tx.empty(); }

    // ------------------------------------------------------------ sync draws

    // Draws n_bits from the circuit's arena; both ends performing the same
    // call schedule read the same pool bytes. Advances into the next epoch's
    // arena (refreshing if needed) when the current one is exhausted.
    uint64_t sync_draw(uint64_t cid, const NodeId& as, unsigned n_bits) {
        CircuitState& c = circuit(cid);
        require(c.cfg.kind == CircuitKind::synchronized_random, Errc::invalid_input,
                "circuit is not a synchronized_random circuit");
        require(n_bits >= 1 && n_bits <= 64, Errc::invalid_input, "n_bits must be in [1,64]");
        EndpointState& ep = end(c, as);
        if (ep.desynced) fail(Errc::desync, "circuit desynchronized; re-open required");

        uint64_t need = (n_bits + 7) / 8;
        const EpochKeys* keys = &c.epochs.at(ep.sync_epoch);
        if (ep.sync_cursor + need > keys->sync_len) {
            if (!c.epochs.count(ep.sync_epoch + 1)) refresh_circuit(cid);
            ep.sync_epoch++;
            ep.sync_cursor = 0;
            keys = &c.epochs.at(ep.sync_epoch);
        }
        uint64_t begin = keys->sync_base + ep.sync_cursor;
        Bytes bytes = pool(as).read(begin, need);
        ep.sync_cursor += need;
        ep.sync_draws++;
        ledger_.push_back({LedgerEntry::Purpose::sync_draw, begin, begin + need, c.id,
                           ep.sync_epoch, dir_of(as), 0});

        uint64_t value = 0;
        for (std::size_t i = 0; i < bytes.size(); ++i)
            value |= static_cast<uint64_t>(bytes[i]) << (8 * i);
        if (n_bits < 64) value &= (1ull << n_bits) - 1;

        ep.sync_history.emplace_back(ep.sync_draws, ep.sync_epoch, ep.sync_cursor);
        if (ep.sync_history.size() > 64) ep.sync_history.pop_front();
        check_pending_echo(c, ep);
        if (ep.sync_draws % kEchoEveryDraws == 0) send_echo(c, as, ep);
        return value;
    }

    // -------------------------------------------------------------- dispatch

    // Handles one inbound data frame addressed to `as`. Touches only that
    // endpoint's side; acks and events go to the caller's buffers.
    void on_frame(const NodeId& as, const Bytes& payload, std::vector<Message>& out,
                  std::vector<Event>& events) {
        frame::Frame f;
        try {
            f = frame::decode(payload);
        } catch (const Error&) {
            return;
        }
        auto it = circuits_.find(f.circuit_id);
        if (it == circuits_.end()) return;
        CircuitState& c = it->second;
        EndpointState& ep = end(c, as);

        if (f.type == frame::ack) {
            on_ack(c, ep, f);
            return;
        }
        // Data frame: the sender is the peer, so the data direction must be
        // the peer's.
        if (f.dir != static_cast<uint8_t>(1 - dir_of(as))) return;
        auto keys_it = c.epochs.find(f.epoch);
        if (keys_it == c.epochs.end() || !verify_tag(keys_it->second, f)) {
            ep.stats.discarded++;
            return;
        }

        bool fresh = dedup_accept(ep, f.seq);
        if (f.type != frame::lossy)
            out.push_back(Message{as, peer_of(as), "overlay-data",
                                  frame::encode(make_ack(keys_it->second, c.id, f)), 0});
        if (!fresh) {
            ep.stats.discarded++;
            return;
        }
        Bytes plain = apply_cipher(c, keys_it->second, f.dir, f.seq, f.pad_offset, f.ciphertext);
        ep.stats.received_ok++;

        switch (f.type) {
            case frame::lossy:
            case frame::reliable:
                ep.surfaced.push_back(std::move(plain));
                break;
            case frame::stream:
                ep.stream_reorder.emplace(f.seq, std::move(plain));
                break;
            case frame::stream_fin:
                ep.stream_fin_seq = f.seq;
                break;
            case frame::sync_fwd: {
                WireReader r(plain);
                uint64_t draw_idx = r.u64();
                uint8_t bits = r.u8();
                uint64_t value = r.u64();
                ep.sync_fwd.emplace_back(draw_idx, bits, value);
                break;
            }
            default:
                ep.stats.discarded++;
        }
        (void)events;
    }

    // Handles one offset-echo message addressed to `as`.
    void on_echo(const NodeId& as, const Bytes& payload, std::vector<Event>& events) {
        WireReader r(payload);
        uint64_t cid = r.u64();
        uint64_t draws = r.u64();
        uint32_t epoch = r.u32();
        uint64_t cursor = r.u64();
        auto it = circuits_.find(cid);
        if (it == circuits_.end()) return;
        EndpointState& ep = end(it->second, as);
        ep.pending_echo = std::make_tuple(draws, epoch, cursor);
        verify_echo(it->second, ep, events);
    }

    // Single-threaded per-tick work: retransmissions, failure detection,
    // timer-based refresh.
    void service(std::vector<Event>& events) {
        Tick now = net_.now();
        for (auto& [cid, c] : circuits_) {
            if (c.cfg.key_refresh_ticks && !c.degraded &&
                now - c.epoch_start_tick >= *c.cfg.key_refresh_ticks) {
                try {
                    refresh_circuit(cid);
                } catch (const Error&) {
                    // degraded path already reported
                }
            }
            for (int side = 0; side < 2; ++side) {
                EndpointState& ep = c.ends[side];
                const NodeId& sender = side == 0 ? node_a_ : node_b_;
                while (!ep.tx.empty()) {
                    TxItem& item = ep.tx.front();
                    if (item.sent && now < item.next_retry) break;
                    if (item.tries >= c.cfg.retransmit_limit) {
                        ep.failed.push_back(item.seq);
                        ep.stats.delivery_failures++;
                        ep.tx.pop_front();
                        if (!c.degraded) {
                            c.degraded = true;
                            Event e;
                            e.tick = now;
                            e.scope = scope_;
                            e.kind = EventKind::DELIVERY_FAILED;
                            e.severity = Severity::warning;
                            e.attributes["circuit"] = std::to_string(cid);
                            events.push_back(std::move(e));
                        }
                        continue;
                    }
                    if (!item.sent) {
                        frame::Frame f =
                            build_data_frame(c, sender, item.type, item.seq, item.plaintext);
                        item.wire = frame::encode(f);
                        item.sent = true;
                        ep.stats.sent++;
                    } else {
                        ep.stats.retransmitted++;
                    }
                    net_.send(Message{sender, side == 0 ? node_b_ : node_a_, "overlay-data",
                                      item.wire, 0});
                    item.tries++;
                    item.next_retry = now + c.cfg.ack_timeout_ticks;
                    break;  // stop-and-wait: head only
                }
            }
            // Count-based refresh, evaluated outside the parallel phase.
            if (!c.degraded && c.cfg.key_refresh_datagrams &&
                c.ends[0].datagrams_this_epoch + c.ends[1].datagrams_this_epoch >=
                    *c.cfg.key_refresh_datagrams) {
                try {
                    refresh_circuit(cid);
                } catch (const Error&) {
                }
            }
        }
    }

    // ------------------------------------------------------------- accessors

    CircuitKind circuit_kind(uint64_t cid) { return circuit(cid).cfg.kind; }
    uint32_t epoch(uint64_t cid) { return circuit(cid).current_epoch; }
    bool degraded(uint64_t cid) { return circuit(cid).degraded; }
    bool desynced(uint64_t cid, const NodeId& as) { return end(circuit(cid), as).desynced; }
    uint64_t key_bytes_consumed(uint64_t cid) { return circuit(cid).key_bytes_consumed; }
    const CircuitStats& stats(uint64_t cid, const NodeId& as) {
        return end(circuit(cid), as).stats;
    }
    std::optional<std::tuple<uint64_t, uint8_t, uint64_t>> pop_sync_fwd(uint64_t cid,
                                                                        const NodeId& as) {
        EndpointState& ep = end(circuit(cid), as);
        if (ep.sync_fwd.empty()) return std::nullopt;
        auto v = ep.sync_fwd.front();
        ep.sync_fwd.pop_front();
        return v;
    }

private:
    static constexpr uint64_t kEchoEveryDraws = 8;

    struct EpochKeys {
        uint64_t grant_begin = 0, grant_end = 0;
        SipKey tag[2]{};
        std::array<uint64_t, 4> stream_seed[2]{};
        uint64_t pad_base[2] = {0, 0};
        uint64_t pad_len[2] = {0, 0};
        uint64_t pad_cursor[2] = {0, 0};  // written only by the sending side
        uint64_t sync_base = 0, sync_len = 0;
    };

    struct TxItem {
        uint64_t seq;
        uint8_t type;
        Bytes plaintext;
        Bytes wire;
        uint32_t tries;
        Tick next_retry;
        bool sent;
    };

    struct EndpointState {
        uint64_t next_seq = 0;
        std::deque<TxItem> tx;
        uint64_t confirmed_below = 0;
        std::vector<uint64_t> failed;
        uint64_t datagrams_this_epoch = 0;
        // dedup window (sliding, 2^16 ids)
        std::set<uint64_t> seen;
        uint64_t dedup_max = 0;
        bool dedup_any = false;
        // surfacing
        std::deque<Bytes> surfaced;
        std::map<uint64_t, Bytes> stream_reorder;
        uint64_t stream_next = 0;
        Bytes stream_buf;
        std::optional<uint64_t> stream_fin_seq;
        bool stream_fin_reached = false;
        std::deque<std::tuple<uint64_t, uint8_t, uint64_t>> sync_fwd;
        // sync draws
        uint32_t sync_epoch = 0;
        uint64_t sync_cursor = 0;
        uint64_t sync_draws = 0;
        std::deque<std::tuple<uint64_t, uint32_t, uint64_t>> sync_history;
        std::optional<std::tuple<uint64_t, uint32_t, uint64_t>> pending_echo;
        bool desynced = false;
        CircuitStats stats;
    };

    struct CircuitState {
        uint64_t id = 0;
        CircuitConfig cfg;
        bool opener_is_a = true;
        uint32_t current_epoch = 0;
        Tick epoch_start_tick = 0;
        bool degraded = false;
        uint64_t key_bytes_consumed = 0;
        std::map<uint32_t, EpochKeys> epochs;
        EndpointState ends[2];
    };

    CircuitState& circuit(uint64_t cid) {
        auto it = circuits_.find(cid);
        require(it != circuits_.end(), Errc::invalid_input,
                "unknown circuit " + std::to_string(cid));
        return it->second;
    }

    int dir_of(const NodeId& n) const { return n == node_a_ ? 0 : 1; }
    const NodeId& peer_of(const NodeId& n) const { return n == node_a_ ? node_b_ : node_a_; }
    EndpointState& end(CircuitState& c, const NodeId& n) { return c.ends[dir_of(n)]; }

    uint64_t grant_size(const CircuitConfig& cfg) const {
        // Layouts: docs/formats.md. Sync circuits carry an arena plus framing
        // keys for forwarded values; datagram circuits carry tag keys plus
        // either stream seeds or per-direction pad arenas.
        if (cfg.kind == CircuitKind::synchronized_random) return cfg.sync_draw_cap() * 8 + 96;
        if (cfg.cipher_mode == CipherMode::keyed_stream) return 96;
        return 32 + 2ull * *cfg.key_refresh_datagrams * cfg.max_datagram_bytes;
    }

    void check_payload(const CircuitState& c, const Bytes& payload) const {
        require(payload.size() <= c.cfg.max_datagram_bytes, Errc::invalid_input,
                "payload exceeds max_datagram_bytes (datagrams never fragment)");
    }

    // Count-based refresh executed lazily from app-call contexts.
    void maybe_count_refresh(CircuitState& c) {
        if (c.degraded || !c.cfg.key_refresh_datagrams) return;
        if (c.ends[0].datagrams_this_epoch + c.ends[1].datagrams_this_epoch >=
            *c.cfg.key_refresh_datagrams) {
            refresh_circuit(c.id);
        }
    }

    // Allocates the epoch grant on the allocator replica, mirrors the range
    // to the peer replica via the handshake, and installs the key layout.
    // Both replicas must hold identical bytes over the range.
    void install_epoch(CircuitState& c, uint32_t epoch, RecordConversation& conv,
                       XferPolicy xfer) {
        uint64_t need = grant_size(c.cfg);
        auto [g0, g1] = allocator_pool().allocate(need);
        {
            WireWriter w;
            w.u8(2);  // GRANT
            w.u64(c.id);
            w.u32(epoch);
            w.u64(g0);
            w.u64(g1);
            conv.transfer(allocator_is_a_ ? node_a_ : node_b_, w.take(), xfer);
        }
        KeyPool& other = allocator_is_a_ ? pool_b_ : pool_a_;
        other.advance_to(g1);
        require(pool_a_.read(g0, need) == pool_b_.read(g0, need), Errc::desync,
                "pool replicas diverged over grant range");

        EpochKeys keys;
        keys.grant_begin = g0;
        keys.grant_end = g1;
        uint64_t cursor = g0;
        auto take = [&](uint64_t n, LedgerEntry::Purpose purpose, int dir) {
            uint64_t b = cursor;
            cursor += n;
            ledger_.push_back({purpose, b, b + n, c.id, epoch, dir, 0});
            return b;
        };
        auto read_tag = [&](int dir) {
            uint64_t b = take(16, LedgerEntry::Purpose::tag_key, dir);
            Bytes bytes = pool_a_.read(b, 16);
            SipKey k;
            std::copy(bytes.begin(), bytes.end(), k.begin());
            return k;
        };
        auto read_seed = [&](int dir) {
            uint64_t b = take(32, LedgerEntry::Purpose::stream_seed, dir);
            Bytes bytes = pool_a_.read(b, 32);
            WireReader r(bytes);
            for (auto& w : keys.stream_seed[dir]) w = r.u64();
        };
        if (c.cfg.kind == CircuitKind::synchronized_random) {
            keys.sync_len = c.cfg.sync_draw_cap() * 8;
            keys.sync_base = take(keys.sync_len, LedgerEntry::Purpose::sync_arena, 0);
            keys.tag[0] = read_tag(0);
            keys.tag[1] = read_tag(1);
            read_seed(0);
            read_seed(1);
        } else {
            keys.tag[0] = read_tag(0);
            keys.tag[1] = read_tag(1);
            if (c.cfg.cipher_mode == CipherMode::keyed_stream) {
                read_seed(0);
                read_seed(1);
            } else {
                uint64_t arena = *c.cfg.key_refresh_datagrams * c.cfg.max_datagram_bytes;
                for (int dir = 0; dir < 2; ++dir) {
                    keys.pad_len[dir] = arena;
                    keys.pad_base[dir] = take(arena, LedgerEntry::Purpose::pad_arena, dir);
                }
            }
        }
        ledger_.push_back({LedgerEntry::Purpose::grant, g0, g1, c.id, epoch, 0, 0});
        c.key_bytes_consumed += need;
        c.epochs.emplace(epoch, std::move(keys));
        if (hooks_.pool_changed) hooks_.pool_changed();
    }

    // XOR cipher under the epoch's material: pad bytes for one_time_pad,
    // per-datagram keystream for keyed_stream. Symmetric for both directions.
    Bytes apply_cipher(CircuitState& c, const EpochKeys& keys, int dir, uint64_t seq,
                       uint64_t pad_offset, const Bytes& in) {
        Bytes out = in;
        if (c.cfg.cipher_mode == CipherMode::one_time_pad &&
            c.cfg.kind != CircuitKind::synchronized_random) {
            Bytes pad = pool_a_.read(keys.pad_base[dir] + pad_offset, in.size());
            for (std::size_t i = 0; i < out.size(); ++i) out[i] ^= pad[i];
        } else {
            Xoshiro256ss ks = datagram_keystream(keys.stream_seed[dir], seq);
            Bytes pad = ks.bytes(out.size());
            for (std::size_t i = 0; i < out.size(); ++i) out[i] ^= pad[i];
        }
        return out;
    }

    frame::Frame build_data_frame(CircuitState& c, const NodeId& as, uint8_t type, uint64_t seq,
                                  const Bytes& plaintext) {
        int dir = dir_of(as);
        uint32_t epoch = c.current_epoch;
        uint64_t pad_offset = 0;
        if (c.cfg.cipher_mode == CipherMode::one_time_pad &&
            c.cfg.kind != CircuitKind::synchronized_random && !plaintext.empty()) {
            EpochKeys& k = c.epochs.at(epoch);
            if (k.pad_cursor[dir] + plaintext.size() > k.pad_len[dir]) {
                try {
                    refresh_circuit(c.id);
                } catch (const Error&) {
                    fail(Errc::key_exhausted, "one-time pad arena exhausted and refresh failed");
                }
                epoch = c.current_epoch;
            }
            EpochKeys& keys = c.epochs.at(epoch);
            pad_offset = keys.pad_cursor[dir];
            keys.pad_cursor[dir] += plaintext.size();
            ledger_.push_back({LedgerEntry::Purpose::pad, keys.pad_base[dir] + pad_offset,
                               keys.pad_base[dir] + pad_offset + plaintext.size(), c.id, epoch,
                               dir, plaintext.size()});
        }
        const EpochKeys& keys = c.epochs.at(epoch);
        frame::Frame f;
        f.circuit_id = c.id;
        f.type = type;
        f.dir = static_cast<uint8_t>(dir);
        f.epoch = epoch;
        f.seq = seq;
        f.pad_offset = pad_offset;
        f.ciphertext = apply_cipher(c, keys, dir, seq, pad_offset, plaintext);
        f.tag = siphash24(keys.tag[dir], frame::encode_unsigned(f));
        return f;
    }

    bool verify_tag(const EpochKeys& keys, const frame::Frame& f) {
        int key_dir = f.dir;  // acks carry the acked data direction
        return siphash24(keys.tag[key_dir], frame::encode_unsigned(f)) == f.tag;
    }

    frame::Frame make_ack(const EpochKeys& keys, uint64_t cid, const frame::Frame& data) {
        frame::Frame a;
        a.circuit_id = cid;
        a.type = frame::ack;
        a.dir = data.dir;
        a.epoch = data.epoch;
        a.seq = data.seq;
        a.tag = siphash24(keys.tag[a.dir], frame::encode_unsigned(a));
        return a;
    }

    void on_ack(CircuitState& c, EndpointState& ep, const frame::Frame& f) {
        // This endpoint sent the data, so the acked direction must be ours.
        if (f.dir != static_cast<uint8_t>(dir_of(ep_node(c, ep)))) return;
        auto keys_it = c.epochs.find(f.epoch);
        if (keys_it == c.epochs.end() || !verify_tag(keys_it->second, f)) {
            ep.stats.discarded++;
            return;
        }
        if (!ep.tx.empty() && ep.tx.front().seq == f.seq) {
            ep.confirmed_below = f.seq + 1;
            ep.tx.pop_front();
        }
    }

    const NodeId& ep_node(const CircuitState& c, const EndpointState& ep) const {
        return &ep == &c.ends[0] ? node_a_ : node_b_;
    }

    // Sliding 2^16-id dedup window; anything older than the window is treated
    // as a duplicate.
    bool dedup_accept(EndpointState& ep, uint64_t seq) {
        constexpr uint64_t kWindow = 1ull << 16;
        if (ep.dedup_any && seq + kWindow <= ep.dedup_max) return false;
        if (!ep.seen.insert(seq).second) return false;
        ep.dedup_max = std::max(ep.dedup_max, seq);
        ep.dedup_any = true;
        while (!ep.seen.empty() && *ep.seen.begin() + kWindow <= ep.dedup_max)
            ep.seen.erase(ep.seen.begin());
        return true;
    }

    void drain_reorder(EndpointState& ep) {
        for (;;) {
            if (ep.stream_fin_seq && *ep.stream_fin_seq == ep.stream_next) {
                ep.stream_fin_reached = true;
                return;
            }
            auto it = ep.stream_reorder.find(ep.stream_next);
            if (it == ep.stream_reorder.end()) return;
            ep.stream_buf.insert(ep.stream_buf.end(), it->second.begin(), it->second.end());
            ep.stream_reorder.erase(it);
            ep.stream_next++;
        }
    }

    void send_echo(CircuitState& c, const NodeId& as, EndpointState& ep) {
        WireWriter w;
        w.u64(c.id);
        w.u64(ep.sync_draws);
        w.u32(ep.sync_epoch);
        w.u64(ep.sync_cursor);
        net_.send(Message{as, peer_of(as), "overlay-echo", w.take(), 0});
    }

    void check_pending_echo(CircuitState& c, EndpointState& ep) {
        std::vector<Event> events;
        verify_echo(c, ep, events);
        for (auto& e : events) hooks_.emit(std::move(e));
    }

    // Compares a peer's (draws, epoch, cursor) report against our own draw
    // history once we have reached the reported draw count.
    void verify_echo(CircuitState& c, EndpointState& ep, std::vector<Event>& events) {
        if (!ep.pending_echo || ep.desynced) return;
        auto [draws, epoch, cursor] = *ep.pending_echo;
        if (draws > ep.sync_draws) return;  // not there yet; keep pending
        ep.pending_echo.reset();
        for (const auto& [d, e, cur] : ep.sync_history) {
            if (d != draws) continue;
            if (e == epoch && cur == cursor) return;
            ep.desynced = true;
            Event ev;
            ev.tick = net_.now();
            ev.scope = scope_;
            ev.kind = EventKind::DESYNC;
            ev.severity = Severity::critical;
            ev.attributes["circuit"] = std::to_string(c.id);
            ev.attributes["draws"] = std::to_string(draws);
            events.push_back(std::move(ev));
            return;
        }
    }

    Network& net_;
    NodeId node_a_, node_b_;
    std::string scope_;
    OverlayHooks hooks_;
    bool allocator_is_a_ = true;
    KeyPool pool_a_, pool_b_;
    std::map<uint64_t, CircuitState> circuits_;
    std::vector<LedgerEntry> ledger_;
};

}  // namespace quonet
