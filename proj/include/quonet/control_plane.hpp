#pragma once

// Control plane: a single in-process controller owning link, path and policy
// state. Links bind the QKD engine to the dataplane; paths compose per-hop
// circuits through trusted relays that decrypt, log and re-encrypt; policies
// are condition -> action rules evaluated against management events.

#include <algorithm>
#include <cstdint>
#include <future>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "classical_underlay.hpp"
#include "management_plane.hpp"
#include "overlay_dataplane.hpp"
#include "qkd_engine.hpp"
#include "quantum_underlay.hpp"

namespace quonet {

struct LinkSpec {
    NodeId a;
    NodeId b;
    QuantumLinkParams quantum;
    ClassicalChannelParams classical;
    QkdSessionParams qkd;
    uint64_t low_watermark_bytes = 0;
};

struct PathSpec {
    std::string name;
    std::vector<uint64_t> hop_link_ids;  // >= 1, consecutive hops share a relay
};

// ---------------------------------------------------------------------------
// Policies: ANDed field comparisons over an event (plus the scoped link's
// statistics), one action, distinct priorities. Text form parsed by
// parse_policy_line; grammar in docs/formats.md.

enum class PolicyOp { eq, ne, lt, le, gt, ge };

struct PolicyCondition {
    std::string field;
    PolicyOp op = PolicyOp::eq;
    std::string value;
};

enum class PolicyActionKind {
    trigger_qkd_session,
    refresh_circuit_keys,
    mark_link_down,
    raise_alert,
    set_param,
};

struct PolicyAction {
    PolicyActionKind kind = PolicyActionKind::raise_alert;
    std::string param_name;
    std::string param_value;
};

struct Policy {
    std::string name;
    std::vector<PolicyCondition> conditions;
    PolicyAction action;
    int64_t priority = 0;
};

inline const char* action_name(PolicyActionKind k) {
    switch (k) {
        case PolicyActionKind::trigger_qkd_session: return "trigger_qkd_session";
        case PolicyActionKind::refresh_circuit_keys: return "refresh_circuit_keys";
        case PolicyActionKind::mark_link_down: return "mark_link_down";
        case PolicyActionKind::raise_alert: return "raise_alert";
        case PolicyActionKind::set_param: return "set_param";
    }
    return "?";
}

// `when <field> <op> <value> [and <field> <op> <value>]... then <action>[(name,value)] priority <n>`
inline Policy parse_policy_line(const std::string& line, const std::string& name = "") {
    std::istringstream in(line);
    std::string tok;
    Policy p;
    p.name = name.empty() ? "policy" : name;

    auto expect = [&](const std::string& want) {
        require(static_cast<bool>(in >> tok) && tok == want, Errc::config_error,
                "policy rule: expected '" + want + "' in: " + line);
    };
    auto parse_op = [&](const std::string& s) {
        if (s == "==") return PolicyOp::eq;
        if (s == "!=") return PolicyOp::ne;
        if (s == "<") return PolicyOp::lt;
        if (s == "<=") return PolicyOp::le;
        if (s == ">") return PolicyOp::gt;
        if (s == ">=") return PolicyOp::ge;
        fail(Errc::config_error, "policy rule: unknown operator '" + s + "'");
    };

    expect("when");
    for (;;) {
        PolicyCondition c;
        require(static_cast<bool>(in >> c.field), Errc::config_error, "policy rule: missing field");
        require(static_cast<bool>(in >> tok), Errc::config_error, "policy rule: missing operator");
        c.op = parse_op(tok);
        require(static_cast<bool>(in >> c.value), Errc::config_error, "policy rule: missing value");
        p.conditions.push_back(std::move(c));
        require(static_cast<bool>(in >> tok), Errc::config_error,
                "policy rule: missing 'then' clause");
        if (tok == "and") continue;
        require(tok == "then", Errc::config_error, "policy rule: expected 'and' or 'then'");
        break;
    }

    std::string action;
    require(static_cast<bool>(in >> action), Errc::config_error, "policy rule: missing action");
    auto paren = action.find('(');
    std::string args;
    if (paren != std::string::npos) {
        require(action.back() == ')', Errc::config_error, "policy rule: unterminated action args");
        args = action.substr(paren + 1, action.size() - paren - 2);
        action = action.substr(0, paren);
    }
    if (action == "trigger_qkd_session") p.action.kind = PolicyActionKind::trigger_qkd_session;
    else if (action == "refresh_circuit_keys") p.action.kind = PolicyActionKind::refresh_circuit_keys;
    else if (action == "mark_link_down") p.action.kind = PolicyActionKind::mark_link_down;
    else if (action == "raise_alert") p.action.kind = PolicyActionKind::raise_alert;
    else if (action == "set_param") p.action.kind = PolicyActionKind::set_param;
    else fail(Errc::config_error, "policy rule: unknown action '" + action + "'");
    if (p.action.kind == PolicyActionKind::set_param) {
        auto comma = args.find(',');
        require(comma != std::string::npos, Errc::config_error,
                "set_param needs (name,value) arguments");
        p.action.param_name = args.substr(0, comma);
        p.action.param_value = args.substr(comma + 1);
    }

    expect("priority");
    require(static_cast<bool>(in >> p.priority), Errc::config_error,
            "policy rule: missing priority value");
    return p;
}

struct RelayLogEntry {
    Tick tick = 0;
    uint64_t path_circuit = 0;
    Bytes plaintext;
};

struct LinkStats {
    uint64_t sessions_ok = 0;
    uint64_t sessions_aborted = 0;
    double last_qber = 0.0;
    uint64_t distilled_bytes = 0;
    bool admin_down = false;
};

struct ControllerOptions {
    bool parallel_nodes = false;
    uint32_t qkd_refill_attempts = 16;
};

class Controller {
public:
    explicit Controller(uint64_t seed, ControllerOptions opt = {})
        : seed_(seed), opt_(opt), net_(seed) {
        mgmt_.set_policy_hook([this](const Event& e) { run_policies(e); });
    }

    Network& network() { return net_; }
    ManagementPlane& management() { return mgmt_; }

    // ------------------------------------------------------------------ nodes

    void add_node(const std::string& name, bool trusted = false) {
        net_.add_node(name);
        trusted_[name] = trusted;
    }

    bool is_trusted(const NodeId& n) const {
        auto it = trusted_.find(n);
        return it != trusted_.end() && it->second;
    }

    // ------------------------------------------------------------------ links

    uint64_t configure_link(const LinkSpec& spec, bool prefill = false) {
        require(net_.has_node(spec.a), Errc::unknown_node, "link endpoint '" + spec.a + "'");
        require(net_.has_node(spec.b), Errc::unknown_node, "link endpoint '" + spec.b + "'");
        require(spec.a != spec.b, Errc::invalid_input, "link endpoints must differ");
        for (const auto& l : links_)
            require(!(l->spec.a == spec.a && l->spec.b == spec.b) &&
                        !(l->spec.a == spec.b && l->spec.b == spec.a),
                    Errc::duplicate_link, "link " + spec.a + "-" + spec.b + " already configured");
        spec.quantum.validate();
        spec.qkd.validate();
        net_.set_channel(spec.a, spec.b, spec.classical);

        uint64_t id = links_.size();
        auto rt = std::make_unique<LinkRuntime>();
        rt->spec = spec;
        rt->scope = "link:" + spec.a + "-" + spec.b;
        OverlayHooks hooks;
        hooks.emit = [this](Event e) { emit_event(std::move(e)); };
        hooks.ensure_pool = [this, id](uint64_t need) { ensure_pool(id, need); };
        hooks.next_circuit_id = [this] { return next_circuit_id_++; };
        hooks.pool_changed = [this, id] { observe_link(id); };
        rt->overlay =
            std::make_unique<OverlayLink>(net_, spec.a, spec.b, rt->scope, std::move(hooks));
        rt->overlay->pool(spec.a).set_low_watermark(spec.low_watermark_bytes);
        rt->overlay->pool(spec.b).set_low_watermark(spec.low_watermark_bytes);
        scope_to_link_[rt->scope] = id;
        links_.push_back(std::move(rt));
        if (prefill) run_qkd_session(id);
        return id;
    }

    uint64_t link_count() const { return links_.size(); }

    std::optional<uint64_t> find_link(const NodeId& a, const NodeId& b) const {
        for (std::size_t i = 0; i < links_.size(); ++i) {
            const auto& s = links_[i]->spec;
            if ((s.a == a && s.b == b) || (s.a == b && s.b == a)) return i;
        }
        return std::nullopt;
    }

    const LinkSpec& link_spec(uint64_t id) const { return link(id).spec; }
    const LinkStats& link_stats(uint64_t id) const { return link(id).stats; }
    const std::string& link_scope(uint64_t id) const { return link(id).scope; }
    KeyPool& link_pool(uint64_t id, const NodeId& n) { return link(id).overlay->pool(n); }

    void set_link_param(uint64_t id, const std::string& name, double value) {
        LinkRuntime& l = link(id);
        if (name == "loss") l.spec.quantum.loss_probability = value;
        else if (name == "flip") l.spec.quantum.flip_probability = value;
        else if (name == "drop") {
            l.spec.classical.drop_probability = value;
            net_.set_channel(l.spec.a, l.spec.b, l.spec.classical);
        } else if (name == "latency") {
            l.spec.classical.latency_ticks = static_cast<uint32_t>(value);
            net_.set_channel(l.spec.a, l.spec.b, l.spec.classical);
        } else if (name == "low_watermark") {
            l.spec.low_watermark_bytes = static_cast<uint64_t>(value);
            l.overlay->pool(l.spec.a).set_low_watermark(l.spec.low_watermark_bytes);
            l.overlay->pool(l.spec.b).set_low_watermark(l.spec.low_watermark_bytes);
        } else if (name == "qber_threshold") {
            l.spec.qkd.qber_abort_threshold = value;
        } else {
            fail(Errc::invalid_input, "unknown link parameter '" + name + "'");
        }
    }

    // -------------------------------------------------------------------- qkd

    // One BB84 session on the link; updates statistics, emits SESSION_ABORTED
    // on aborts and runs the threshold watcher.
    QkdOutcome run_qkd_session(uint64_t link_id, std::optional<QkdSessionParams> params = {}) {
        LinkRuntime& l = link(link_id);
        require(!l.stats.admin_down, Errc::link_down, "link is administratively down");
        QkdSessionParams p = params.value_or(l.spec.qkd);
        if (!params) p.seed = derive_seed(seed_, 0x5e55 + link_id);

        QkdEndpoints ends{l.spec.a, l.spec.b, &l.overlay->pool(l.spec.a),
                          &l.overlay->pool(l.spec.b)};
        QkdOutcome out = run_session(net_, ends, l.spec.quantum, p);
        l.stats.last_qber = out.qber_estimate;
        if (out.status == QkdOutcome::Status::ok) {
            l.stats.sessions_ok++;
            l.stats.distilled_bytes += out.distilled_bits / 8;
        } else {
            l.stats.sessions_aborted++;
            Event e;
            e.tick = net_.now();
            e.scope = l.scope;
            e.kind = EventKind::SESSION_ABORTED;
            e.severity = Severity::warning;
            e.attributes["status"] = status_name(out.status);
            e.attributes["qber"] = format_number(out.qber_estimate);
            emit_event(std::move(e));
        }
        observe_link(link_id);
        return out;
    }

    // Refills the allocator-side replica to at least `need` bytes by running
    // sessions; throws CircuitUnavailable when the link cannot deliver key.
    void ensure_pool(uint64_t link_id, uint64_t need) {
        LinkRuntime& l = link(link_id);
        uint32_t attempts = 0;
        while (l.overlay->allocator_pool().available() < need) {
            if (attempts++ >= opt_.qkd_refill_attempts)
                fail(Errc::circuit_unavailable,
                     "QKD cannot refill key pool on " + l.scope + " (aborted sessions)");
            try {
                run_qkd_session(link_id);
            } catch (const Error& e) {
                if (e.code() == Errc::link_down) throw;
                // timeout / reconciliation failure: counted as an attempt
            }
        }
    }

    // ------------------------------------------------------------------ paths

    uint64_t establish_path(const PathSpec& spec) {
        require(!spec.hop_link_ids.empty(), Errc::invalid_input, "path needs at least one hop");
        require(!paths_by_name_.count(spec.name), Errc::invalid_input,
                "duplicate path name '" + spec.name + "'");
        for (uint64_t hop : spec.hop_link_ids)
            require(hop < links_.size(), Errc::invalid_input, "path references unknown link");

        // Orient the hop chain into a node sequence.
        std::vector<NodeId> nodes;
        if (spec.hop_link_ids.size() == 1) {
            const auto& s = links_[spec.hop_link_ids[0]]->spec;
            nodes = {s.a, s.b};
        } else {
            auto ends_of = [&](uint64_t id) {
                const auto& s = links_[id]->spec;
                return std::pair<NodeId, NodeId>(s.a, s.b);
            };
            auto [a0, b0] = ends_of(spec.hop_link_ids[0]);
            auto [a1, b1] = ends_of(spec.hop_link_ids[1]);
            NodeId shared = (a0 == a1 || a0 == b1) ? a0 : b0;
            require(shared == a1 || shared == b1, Errc::invalid_input,
                    "consecutive path hops share no node");
            nodes.push_back(a0 == shared ? b0 : a0);
            nodes.push_back(shared);
            for (std::size_t i = 1; i < spec.hop_link_ids.size(); ++i) {
                auto [x, y] = ends_of(spec.hop_link_ids[i]);
                const NodeId& prev = nodes.back();
                require(x == prev || y == prev, Errc::invalid_input,
                        "consecutive path hops share no node");
                require(!(x == prev && y == prev), Errc::invalid_input, "degenerate hop");
                nodes.push_back(x == prev ? y : x);
            }
        }
        for (std::size_t i = 1; i + 1 < nodes.size(); ++i)
            require(is_trusted(nodes[i]), Errc::invalid_input,
                    "relay '" + nodes[i] + "' is not flagged trusted");

        uint64_t id = paths_.size();
        PathRuntime p;
        p.spec = spec;
        p.nodes = std::move(nodes);
        p.scope = "path:" + spec.name;
        paths_.push_back(std::move(p));
        paths_by_name_[spec.name] = id;
        return id;
    }

    const std::vector<NodeId>& path_nodes(uint64_t path_id) const {
        return paths_.at(path_id).nodes;
    }

    std::optional<uint64_t> find_path(const std::string& name) const {
        auto it = paths_by_name_.find(name);
        if (it == paths_by_name_.end()) return std::nullopt;
        return it->second;
    }

    // --------------------------------------------------------------- circuits

    CircuitHandle open_circuit(const NodeId& local, const NodeId& peer, CircuitConfig cfg) {
        require(net_.has_node(local), Errc::unknown_node, "node '" + local + "'");
        require(net_.has_node(peer), Errc::unknown_node, "node '" + peer + "'");
        auto lid = find_link(local, peer);
        require(lid.has_value(), Errc::circuit_unavailable,
                "no configured link between " + local + " and " + peer);
        LinkRuntime& l = link(*lid);
        require(!l.stats.admin_down, Errc::link_down, "link is administratively down");
        uint64_t cid = l.overlay->open_circuit(local, cfg);
        routes_[cid] = Route{*lid, std::nullopt};
        CircuitHandle h;
        h.id = cid;
        h.kind = cfg.kind;
        h.local = local;
        h.peer = peer;
        return h;
    }

    CircuitHandle open_path_circuit(const std::string& path_name, CircuitConfig cfg) {
        auto pid = find_path(path_name);
        require(pid.has_value(), Errc::invalid_input, "unknown path '" + path_name + "'");
        PathRuntime& p = paths_[*pid];

        if (p.spec.hop_link_ids.size() == 1) {
            CircuitHandle h = open_circuit(p.nodes.front(), p.nodes.back(), cfg);
            h.via_path = true;
            h.path_name = path_name;
            return h;
        }

        PathCircuit pc;
        pc.cfg = cfg;
        for (std::size_t hop = 0; hop < p.spec.hop_link_ids.size(); ++hop) {
            CircuitConfig hop_cfg = cfg;
            if (cfg.kind == CircuitKind::synchronized_random && hop > 0)
                hop_cfg.kind = CircuitKind::secure_reliable_datagram;
            uint64_t lid = p.spec.hop_link_ids[hop];
            try {
                uint64_t cid = link(lid).overlay->open_circuit(p.nodes[hop], hop_cfg);
                routes_[cid] = Route{lid, std::nullopt};
                pc.hop_cids.push_back(cid);
            } catch (const Error& e) {
                fail(Errc::path_unavailable, "hop " + std::to_string(hop + 1) + " (" +
                                                 link(lid).scope + "): " + e.what());
            }
        }
        uint64_t app_id = next_circuit_id_++;
        pc.id = app_id;
        p.circuits.push_back(pc);
        routes_[app_id] = Route{0, PathRef{*pid, p.circuits.size() - 1}};

        CircuitHandle h;
        h.id = app_id;
        h.kind = cfg.kind;
        h.local = p.nodes.front();
        h.peer = p.nodes.back();
        h.via_path = true;
        h.path_name = path_name;
        return h;
    }

    CircuitHandle peer_handle(const CircuitHandle& h) const {
        CircuitHandle out = h;
        std::swap(out.local, out.peer);
        return out;
    }

    // ---------------------------------------------------------- circuit ops

    uint64_t send_lossy(const CircuitHandle& h, const Bytes& payload) {
        require(h.kind == CircuitKind::secure_lossy_datagram, Errc::invalid_input,
                "handle is not a lossy circuit");
        auto [link_ref, cid, as] = resolve_end(h);
        return link_ref->overlay->send_lossy(cid, as, payload);
    }

    // Blocking ack/retransmit loop; exactly-once surfacing at the receiver.
    void send_reliable(const CircuitHandle& h, const Bytes& payload) {
        require(h.kind == CircuitKind::secure_reliable_datagram, Errc::invalid_input,
                "handle is not a reliable datagram circuit");
        auto [link_ref, cid, as] = resolve_end(h);
        uint64_t seq = link_ref->overlay->enqueue_reliable(cid, as, frame::reliable, payload);
        wait_confirmed(*link_ref, cid, as, seq);
    }

    std::optional<Bytes> recv(const CircuitHandle& h) {
        auto [link_ref, cid, as] = resolve_end(h);
        return link_ref->overlay->pop_surfaced(cid, as);
    }

    std::optional<Bytes> recv_wait(const CircuitHandle& h, uint64_t max_ticks) {
        for (uint64_t t = 0; t <= max_ticks; ++t) {
            if (auto b = recv(h)) return b;
            pump();
        }
        return std::nullopt;
    }

    void stream_write(const CircuitHandle& h, const Bytes& bytes) {
        require(h.kind == CircuitKind::secure_reliable_bytestream, Errc::invalid_input,
                "handle is not a bytestream circuit");
        auto [link_ref, cid, as] = resolve_end(h);
        link_ref->overlay->stream_write(cid, as, bytes);
    }

    void stream_close(const CircuitHandle& h) {
        auto [link_ref, cid, as] = resolve_end(h);
        link_ref->overlay->stream_close(cid, as);
    }

    Bytes stream_read(const CircuitHandle& h, std::size_t max_bytes) {
        auto [link_ref, cid, as] = resolve_end(h);
        return link_ref->overlay->stream_read(cid, as, max_bytes);
    }

    bool stream_eof(const CircuitHandle& h) {
        auto [link_ref, cid, as] = resolve_end(h);
        return link_ref->overlay->stream_eof(cid, as);
    }

    // Pumps until every hop of the circuit has an empty transmit queue (all
    // writes delivered and acknowledged) or the tick budget runs out.
    void stream_drain(const CircuitHandle& h, uint64_t max_ticks = 1000000) {
        for (uint64_t t = 0; t < max_ticks; ++t) {
            bool idle = true;
            for_each_hop(h, [&](LinkRuntime& l, uint64_t cid) {
                if (!l.overlay->tx_idle(cid, l.spec.a) || !l.overlay->tx_idle(cid, l.spec.b))
                    idle = false;
            });
            if (idle) return;
            pump();
        }
        fail(Errc::delivery_failed, "stream failed to drain within tick budget");
    }

    // Synchronized random draw. Direct circuits (and 1-hop paths) read the
    // shared arena at both ends; multi-hop paths draw at the first endpoint
    // and relay the value hop by hop as reliable encrypted datagrams.
    uint64_t sync_random(const CircuitHandle& h, unsigned n_bits) {
        require(h.kind == CircuitKind::synchronized_random, Errc::invalid_input,
                "handle is not a synchronized_random circuit");
        const Route& r = route(h.id);
        if (!r.path) {
            auto [link_ref, cid, as] = resolve_end(h);
            return link_ref->overlay->sync_draw(cid, as, n_bits);
        }
        PathRuntime& p = paths_[r.path->path_id];
        PathCircuit& pc = p.circuits[r.path->index];
        if (h.local == p.nodes.front()) {
            LinkRuntime& l0 = link(p.spec.hop_link_ids.front());
            uint64_t v = l0.overlay->sync_draw(pc.hop_cids.front(), h.local, n_bits);
            WireWriter w;
            w.u64(pc.forward_draws++);
            w.u8(static_cast<uint8_t>(n_bits));
            w.u64(v);
            l0.overlay->enqueue_reliable(pc.hop_cids.front(), h.local, frame::sync_fwd, w.take());
            return v;
        }
        require(h.local == p.nodes.back(), Errc::invalid_input,
                "sync_random caller is not a path endpoint");
        LinkRuntime& ln = link(p.spec.hop_link_ids.back());
        for (uint64_t t = 0; t <= kPathSyncTimeoutTicks; ++t) {
            if (auto fwd = ln.overlay->pop_sync_fwd(pc.hop_cids.back(), h.local)) {
                auto [draw_idx, bits, value] = *fwd;
                if (bits != n_bits)
                    fail(Errc::desync, "forwarded draw width mismatch (schedule disagreement)");
                return value;
            }
            pump();
        }
        fail(Errc::session_timeout, "no forwarded synchronized value (is the first endpoint drawing?)");
    }

    uint32_t refresh_key(const CircuitHandle& h) {
        uint32_t epoch = 0;
        for_each_hop(h, [&](LinkRuntime& l, uint64_t cid) {
            epoch = l.overlay->refresh_circuit(cid);
        });
        return epoch;
    }

    uint32_t epoch(const CircuitHandle& h) {
        uint32_t e = 0;
        bool first = true;
        for_each_hop(h, [&](LinkRuntime& l, uint64_t cid) {
            if (first) {
                e = l.overlay->epoch(cid);
                first = false;
            }
        });
        return e;
    }

    bool degraded(const CircuitHandle& h) {
        bool d = false;
        for_each_hop(h, [&](LinkRuntime& l, uint64_t cid) { d = d || l.overlay->degraded(cid); });
        return d;
    }

    CircuitStats circuit_stats(const CircuitHandle& h) {
        auto [link_ref, cid, as] = resolve_end(h);
        return link_ref->overlay->stats(cid, as);
    }

    uint64_t key_bytes_consumed(const CircuitHandle& h) {
        uint64_t total = 0;
        for_each_hop(h, [&](LinkRuntime& l, uint64_t cid) {
            total += l.overlay->key_bytes_consumed(cid);
        });
        return total;
    }

    // ------------------------------------------------------------------ relay

    const std::vector<RelayLogEntry>& relay_log(const NodeId& n) { return relay_logs_[n]; }

    // Store-and-forward step for one relay of one path circuit: decrypt
    // whatever has surfaced on the adjacent hops, log the plaintext, forward
    // on the opposite hop under its keys.
    void relay_forward(const NodeId& relay, uint64_t path_circuit_id) {
        const Route& r = route(path_circuit_id);
        require(r.path.has_value(), Errc::invalid_input, "not a path circuit");
        PathRuntime& p = paths_[r.path->path_id];
        PathCircuit& pc = p.circuits[r.path->index];
        for (std::size_t pos = 1; pos + 1 < p.nodes.size(); ++pos) {
            if (p.nodes[pos] != relay) continue;
            forward_at(p, pc, pos, pos - 1, pos);      // toward the last endpoint
            forward_at(p, pc, pos, pos, pos - 1);      // toward the first endpoint
        }
    }

    // ------------------------------------------------------------------- pump

    // One simulation step: deliver due messages, dispatch per-node handlers
    // (parallel when configured, identical results either way), then run
    // single-threaded servicing: retransmits, refresh timers, relay
    // forwarding, suppression-window flushes.
    void pump(uint64_t ticks = 1) {
        while (ticks--) {
            net_.step();
            const auto& nodes = net_.nodes();
            std::vector<std::vector<Message>> outboxes(nodes.size());
            std::vector<std::vector<Event>> events(nodes.size());

            auto dispatch_one = [&](std::size_t i) {
                dispatch_node(nodes[i], outboxes[i], events[i]);
            };
            if (opt_.parallel_nodes) {
                std::vector<std::future<void>> futs;
                futs.reserve(nodes.size());
                for (std::size_t i = 0; i < nodes.size(); ++i)
                    futs.push_back(std::async(std::launch::async, dispatch_one, i));
                for (auto& f : futs) f.get();
            } else {
                for (std::size_t i = 0; i < nodes.size(); ++i) dispatch_one(i);
            }
            for (auto& box : outboxes)
                for (auto& m : box) net_.send(std::move(m));
            for (auto& evs : events)
                for (auto& e : evs) emit_event(std::move(e));

            std::vector<Event> service_events;
            for (auto& l : links_) l->overlay->service(service_events);
            for (auto& e : service_events) emit_event(std::move(e));

            for (auto& p : paths_)
                for (auto& pc : p.circuits)
                    for (std::size_t pos = 1; pos + 1 < p.nodes.size(); ++pos)
                        relay_forward(p.nodes[pos], pc.id);

            mgmt_.flush(net_.now());
        }
    }

    // --------------------------------------------------------------- policies

    void add_policy(const Policy& p) {
        for (const auto& q : policies_)
            require(q.priority != p.priority, Errc::invalid_input,
                    "policy priorities must be distinct");
        policies_.push_back(p);
        std::sort(policies_.begin(), policies_.end(),
                  [](const Policy& x, const Policy& y) { return x.priority < y.priority; });
    }

    const std::vector<Policy>& policies() const { return policies_; }

    // Fires matching policies in priority order; action failures are logged
    // and evaluation continues. Returns descriptions of executed actions.
    std::vector<std::string> evaluate_policies(const Event& e) {
        std::vector<std::string> executed;
        auto fields = event_fields(e);
        for (const auto& p : policies_) {
            bool match = true;
            for (const auto& c : p.conditions)
                if (!condition_holds(c, fields)) {
                    match = false;
                    break;
                }
            if (!match) continue;
            std::string desc = p.name + ":" + action_name(p.action.kind);
            try {
                execute_action(p, e);
                executed.push_back(desc);
            } catch (const Error& err) {
                executed.push_back(desc + " failed: " + err.what());
            }
            action_log_.push_back(executed.back());
        }
        return executed;
    }

    const std::vector<std::string>& action_log() const { return action_log_; }

    // ------------------------------------------------------------------ audit

    LedgerAudit audit_key_ledger() const {
        std::vector<LedgerEntry> all;
        for (std::size_t i = 0; i < links_.size(); ++i) {
            // Byte ranges are per-pool; offset links apart so the combined
            // audit keeps them disjoint.
            uint64_t base = static_cast<uint64_t>(i) << 40;
            for (auto e : links_[i]->overlay->ledger()) {
                e.begin += base;
                e.end += base;
                all.push_back(e);
            }
        }
        return audit_ledger(std::move(all));
    }

    void emit_event(Event e) { mgmt_.emit(std::move(e)); }

private:
    struct LinkRuntime {
        LinkSpec spec;
        std::string scope;
        LinkStats stats;
        std::unique_ptr<OverlayLink> overlay;
    };

    struct PathCircuit {
        uint64_t id = 0;
        CircuitConfig cfg;
        std::vector<uint64_t> hop_cids;
        uint64_t forward_draws = 0;
        // per relay position and direction: stream fin already forwarded
        std::set<std::pair<std::size_t, int>> fin_forwarded;
    };

    struct PathRuntime {
        PathSpec spec;
        std::vector<NodeId> nodes;
        std::string scope;
        std::vector<PathCircuit> circuits;
    };

    struct PathRef {
        uint64_t path_id;
        std::size_t index;
    };

    struct Route {
        uint64_t link_id = 0;
        std::optional<PathRef> path;
    };

    static constexpr uint64_t kPathSyncTimeoutTicks = 4096;

    LinkRuntime& link(uint64_t id) {
        require(id < links_.size(), Errc::invalid_input, "unknown link id");
        return *links_[id];
    }
    const LinkRuntime& link(uint64_t id) const {
        require(id < links_.size(), Errc::invalid_input, "unknown link id");
        return *links_[id];
    }

    const Route& route(uint64_t app_id) const {
        auto it = routes_.find(app_id);
        require(it != routes_.end(), Errc::invalid_input, "unknown circuit id");
        return it->second;
    }

    // Resolves a handle to (owning link, dataplane circuit, acting endpoint).
    // For multi-hop paths this is the hop adjacent to the handle's local end.
    std::tuple<LinkRuntime*, uint64_t, NodeId> resolve_end(const CircuitHandle& h) {
        const Route& r = route(h.id);
        if (!r.path) return {&link(r.link_id), h.id, h.local};
        PathRuntime& p = paths_[r.path->path_id];
        PathCircuit& pc = p.circuits[r.path->index];
        if (h.local == p.nodes.front())
            return {&link(p.spec.hop_link_ids.front()), pc.hop_cids.front(), h.local};
        require(h.local == p.nodes.back(), Errc::invalid_input,
                "handle endpoint is not on this path");
        return {&link(p.spec.hop_link_ids.back()), pc.hop_cids.back(), h.local};
    }

    template <typename Fn>
    void for_each_hop(const CircuitHandle& h, Fn&& fn) {
        const Route& r = route(h.id);
        if (!r.path) {
            fn(link(r.link_id), h.id);
            return;
        }
        PathRuntime& p = paths_[r.path->path_id];
        PathCircuit& pc = p.circuits[r.path->index];
        for (std::size_t i = 0; i < pc.hop_cids.size(); ++i)
            fn(link(p.spec.hop_link_ids[i]), pc.hop_cids[i]);
    }

    void wait_confirmed(LinkRuntime& l, uint64_t cid, const NodeId& as, uint64_t seq) {
        // Generous budget: every retry plus handshake slack.
        for (uint64_t guard = 0; guard < 1000000; ++guard) {
            if (l.overlay->confirmed(cid, as, seq)) return;
            if (l.overlay->send_failed(cid, as, seq))
                fail(Errc::delivery_failed, "retransmit limit exceeded on " + l.scope);
            pump();
        }
        fail(Errc::delivery_failed, "confirmation never arrived (tick budget exhausted)");
    }

    void dispatch_node(const NodeId& n, std::vector<Message>& out, std::vector<Event>& ev) {
        while (auto m = net_.receive(n, "overlay-data")) {
            if (m->payload.size() < 8) continue;
            WireReader r(m->payload);
            uint64_t cid = r.u64();
            if (OverlayLink* l = owner_of(cid)) l->on_frame(n, m->payload, out, ev);
        }
        while (auto m = net_.receive(n, "overlay-echo")) {
            if (m->payload.size() < 8) continue;
            WireReader r(m->payload);
            uint64_t cid = r.u64();
            if (OverlayLink* l = owner_of(cid)) l->on_echo(n, m->payload, ev);
        }
    }

    OverlayLink* owner_of(uint64_t cid) {
        auto it = routes_.find(cid);
        if (it == routes_.end() || it->second.path) return nullptr;
        return links_[it->second.link_id]->overlay.get();
    }

    void observe_link(uint64_t link_id) {
        LinkRuntime& l = link(link_id);
        ThresholdWatcher::Thresholds th;
        th.qber_high = l.spec.qkd.qber_abort_threshold;
        th.pool_low_bytes = l.spec.low_watermark_bytes;
        watcher_thresholds_[link_id] = th;
        auto events = watcher_.observe_with(th, net_.now(), l.scope, l.stats.last_qber,
                                            l.overlay->allocator_pool().available());
        for (auto& e : events) emit_event(std::move(e));
    }

    void forward_at(PathRuntime& p, PathCircuit& pc, std::size_t relay_pos, std::size_t from_hop,
                    std::size_t to_hop) {
        const NodeId& relay = p.nodes[relay_pos];
        LinkRuntime& lin = link(p.spec.hop_link_ids[from_hop]);
        LinkRuntime& lout = link(p.spec.hop_link_ids[to_hop]);
        uint64_t cin = pc.hop_cids[from_hop];
        uint64_t cout = pc.hop_cids[to_hop];
        int dir = from_hop < to_hop ? 0 : 1;

        switch (pc.cfg.kind) {
            case CircuitKind::secure_lossy_datagram:
                while (auto b = lin.overlay->pop_surfaced(cin, relay)) {
                    log_relay(relay, pc.id, *b);
                    lout.overlay->send_lossy(cout, relay, *b);
                }
                break;
            case CircuitKind::secure_reliable_datagram:
                while (auto b = lin.overlay->pop_surfaced(cin, relay)) {
                    log_relay(relay, pc.id, *b);
                    lout.overlay->enqueue_reliable(cout, relay, frame::reliable, std::move(*b));
                }
                break;
            case CircuitKind::secure_reliable_bytestream: {
                for (;;) {
                    Bytes chunk = lin.overlay->stream_read(cin, relay, 1 << 16);
                    if (chunk.empty()) break;
                    log_relay(relay, pc.id, chunk);
                    lout.overlay->stream_write(cout, relay, chunk);
                }
                if (lin.overlay->stream_eof(cin, relay) &&
                    !pc.fin_forwarded.count({relay_pos, dir})) {
                    lout.overlay->stream_close(cout, relay);
                    pc.fin_forwarded.insert({relay_pos, dir});
                }
                break;
            }
            case CircuitKind::synchronized_random:
                // Values flow from the first endpoint only.
                if (dir != 0) break;
                while (auto fwd = lin.overlay->pop_sync_fwd(cin, relay)) {
                    auto [draw_idx, bits, value] = *fwd;
                    WireWriter w;
                    w.u64(draw_idx);
                    w.u8(bits);
                    w.u64(value);
                    Bytes payload = w.take();
                    log_relay(relay, pc.id, payload);
                    lout.overlay->enqueue_reliable(cout, relay, frame::sync_fwd,
                                                   std::move(payload));
                }
                break;
        }
    }

    void log_relay(const NodeId& relay, uint64_t pc_id, const Bytes& plaintext) {
        relay_logs_[relay].push_back(RelayLogEntry{net_.now(), pc_id, plaintext});
    }

    // -------------------------------------------------------- policy support

    void run_policies(const Event& e) {
        if (policy_depth_ >= 4 || policies_.empty()) return;
        ++policy_depth_;
        evaluate_policies(e);
        --policy_depth_;
    }

    std::map<std::string, std::string> event_fields(const Event& e) {
        std::map<std::string, std::string> f;
        f["kind"] = kind_name(e.kind);
        f["severity"] = severity_name(e.severity);
        f["scope"] = e.scope;
        f["tick"] = std::to_string(e.tick);
        for (const auto& [k, v] : e.attributes) f[k] = v;
        auto it = scope_to_link_.find(e.scope);
        if (it != scope_to_link_.end()) {
            LinkRuntime& l = link(it->second);
            f.emplace("qber", format_number(l.stats.last_qber));
            f.emplace("pool_bytes", std::to_string(l.overlay->allocator_pool().available()));
            f.emplace("sessions_ok", std::to_string(l.stats.sessions_ok));
            f.emplace("sessions_aborted", std::to_string(l.stats.sessions_aborted));
        }
        return f;
    }

    static bool condition_holds(const PolicyCondition& c,
                                const std::map<std::string, std::string>& fields) {
        auto it = fields.find(c.field);
        if (it == fields.end()) return false;
        const std::string& actual = it->second;
        char* end = nullptr;
        double lhs = std::strtod(actual.c_str(), &end);
        bool lhs_num = end && *end == '\0' && end != actual.c_str();
        char* end2 = nullptr;
        double rhs = std::strtod(c.value.c_str(), &end2);
        bool rhs_num = end2 && *end2 == '\0' && end2 != c.value.c_str();
        if (lhs_num && rhs_num) {
            switch (c.op) {
                case PolicyOp::eq: return lhs == rhs;
                case PolicyOp::ne: return lhs != rhs;
                case PolicyOp::lt: return lhs < rhs;
                case PolicyOp::le: return lhs <= rhs;
                case PolicyOp::gt: return lhs > rhs;
                case PolicyOp::ge: return lhs >= rhs;
            }
        }
        switch (c.op) {
            case PolicyOp::eq: return actual == c.value;
            case PolicyOp::ne: return actual != c.value;
            default: return false;  // relational needs numbers
        }
    }

    void execute_action(const Policy& p, const Event& e) {
        auto scoped_link = [&]() -> uint64_t {
            auto it = scope_to_link_.find(e.scope);
            require(it != scope_to_link_.end(), Errc::invalid_input,
                    "action needs a link scope, got '" + e.scope + "'");
            return it->second;
        };
        switch (p.action.kind) {
            case PolicyActionKind::trigger_qkd_session:
                run_qkd_session(scoped_link());
                break;
            case PolicyActionKind::refresh_circuit_keys: {
                LinkRuntime& l = link(scoped_link());
                for (const auto& [cid, r] : routes_) {
                    if (r.path || r.link_id != scoped_link()) continue;
                    if (!l.overlay->owns_circuit(cid)) continue;
                    l.overlay->refresh_circuit(cid);
                }
                break;
            }
            case PolicyActionKind::mark_link_down: {
                LinkRuntime& l = link(scoped_link());
                if (!l.stats.admin_down) {
                    l.stats.admin_down = true;
                    Event ev;
                    ev.tick = net_.now();
                    ev.scope = l.scope;
                    ev.kind = EventKind::LINK_DOWN;
                    ev.severity = Severity::critical;
                    ev.attributes["by"] = p.name;
                    emit_event(std::move(ev));
                }
                break;
            }
            case PolicyActionKind::raise_alert: {
                Event ev = e;
                ev.tick = net_.now();
                ev.severity = Severity::critical;
                ev.attributes["alert"] = p.name;
                mgmt_.emit(std::move(ev), /*run_policy_hook=*/false);
                break;
            }
            case PolicyActionKind::set_param:
                set_link_param(scoped_link(), p.action.param_name,
                               std::strtod(p.action.param_value.c_str(), nullptr));
                break;
        }
    }

    uint64_t seed_;
    ControllerOptions opt_;
    Network net_;
    ManagementPlane mgmt_;
    ThresholdWatcher watcher_;
    std::map<uint64_t, ThresholdWatcher::Thresholds> watcher_thresholds_;
    std::map<NodeId, bool> trusted_;
    std::vector<std::unique_ptr<LinkRuntime>> links_;
    std::map<std::string, uint64_t> scope_to_link_;
    std::vector<PathRuntime> paths_;
    std::map<std::string, uint64_t> paths_by_name_;
    std::map<uint64_t, Route> routes_;
    uint64_t next_circuit_id_ = 1;
    std::vector<Policy> policies_;
    std::vector<std::string> action_log_;
    int policy_depth_ = 0;
    std::map<NodeId, std::vector<RelayLogEntry>> relay_logs_;
};

}  // namespace quonet
