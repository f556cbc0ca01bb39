#pragma once

// Management plane: occurrence records that can be suppressed, stored,
// queried, dispatched to subscribers and handed to the policy hook. The log
// is append-only and its text rendering is byte-reproducible for seeded runs
// (format: docs/formats.md).

#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "errors.hpp"

namespace quonet {

enum class EventKind : uint8_t {
    QBER_HIGH,
    KEY_POOL_LOW,
    LINK_DOWN,
    DELIVERY_FAILED,
    DESYNC,
    SESSION_ABORTED,
    EPOCH_ROLLED,
};

enum class Severity : uint8_t { info, warning, critical };

inline const char* kind_name(EventKind k) {
    switch (k) {
        case EventKind::QBER_HIGH: return "QBER_HIGH";
        case EventKind::KEY_POOL_LOW: return "KEY_POOL_LOW";
        case EventKind::LINK_DOWN: return "LINK_DOWN";
        case EventKind::DELIVERY_FAILED: return "DELIVERY_FAILED";
        case EventKind::DESYNC: return "DESYNC";
        case EventKind::SESSION_ABORTED: return "SESSION_ABORTED";
        case EventKind::EPOCH_ROLLED: return "EPOCH_ROLLED";
    }
    return "?";
}

inline std::optional<EventKind> kind_from_name(const std::string& s) {
    for (EventKind k : {EventKind::QBER_HIGH, EventKind::KEY_POOL_LOW, EventKind::LINK_DOWN,
                        EventKind::DELIVERY_FAILED, EventKind::DESYNC, EventKind::SESSION_ABORTED,
                        EventKind::EPOCH_ROLLED})
        if (s == kind_name(k)) return k;
    return std::nullopt;
}

inline const char* severity_name(Severity s) {
    switch (s) {
        case Severity::info: return "info";
        case Severity::warning: return "warning";
        case Severity::critical: return "critical";
    }
    return "?";
}

// Canonical numeric rendering for attributes so replayed logs match byte for
// byte.
inline std::string format_number(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

struct Event {
    uint64_t tick = 0;
    std::string scope;  // "link:<a>-<b>", "path:<name>", or "network"
    EventKind kind = EventKind::QBER_HIGH;
    Severity severity = Severity::info;
    std::map<std::string, std::string> attributes;  // sorted; rendered in key order

    std::string render() const {
        std::string line = "tick=" + std::to_string(tick) + " scope=" + scope +
                           " kind=" + kind_name(kind) + " sev=" + severity_name(severity);
        for (const auto& [k, v] : attributes) line += " " + k + "=" + v;
        return line;
    }
};

struct SuppressionRule {
    EventKind kind;
    uint64_t window_ticks = 1;
    uint64_t max_per_window = 1;

    void validate() const {
        require(window_ticks >= 1, Errc::invalid_input, "window_ticks must be >= 1");
        require(max_per_window >= 1, Errc::invalid_input, "max_per_window must be >= 1");
    }
};

struct EventFilter {
    std::optional<EventKind> kind;
    std::optional<Severity> min_severity;
    std::optional<std::string> scope;
    std::optional<uint64_t> tick_from;
    std::optional<uint64_t> tick_to;  // inclusive

    void validate() const {
        if (tick_from && tick_to)
            require(*tick_from <= *tick_to, Errc::invalid_filter, "tick range reversed");
    }

    bool matches(const Event& e) const {
        if (kind && e.kind != *kind) return false;
        if (min_severity && static_cast<int>(e.severity) < static_cast<int>(*min_severity))
            return false;
        if (scope && e.scope != *scope) return false;
        if (tick_from && e.tick < *tick_from) return false;
        if (tick_to && e.tick > *tick_to) return false;
        return true;
    }
};

class ManagementPlane {
public:
    using Subscriber = std::function<void(const Event&)>;
    using PolicyHook = std::function<void(const Event&)>;

    void set_policy_hook(PolicyHook hook) { policy_hook_ = std::move(hook); }

    void subscribe(Subscriber s) { subscribers_.push_back(std::move(s)); }

    void add_suppression(const SuppressionRule& rule) {
        rule.validate();
        suppression_[rule.kind] = rule;
    }

    // Appends the event unless suppressed, dispatches to subscribers, and
    // hands it to the policy hook. Emission never fails the emitter.
    // Policy-raised records pass run_policy_hook=false to avoid rule loops.
    void emit(Event e, bool run_policy_hook = true) {
        validate_event(e);
        auto it = suppression_.find(e.kind);
        if (it != suppression_.end()) {
            auto& st = windows_[e.kind];
            uint64_t window = e.tick / it->second.window_ticks;
            if (!st.active || st.window != window) {
                flush_window(e.kind, it->second);
                st.active = true;
                st.window = window;
                st.seen = 0;
                st.suppressed = 0;
                st.last_tick = e.tick;
            }
            st.seen++;
            st.last_tick = e.tick;
            if (st.seen > it->second.max_per_window) {
                st.suppressed++;
                return;  // dropped; summarized when the window closes
            }
        }
        append(std::move(e), run_policy_hook);
    }

    // Closes any suppression window that ended before `tick`, appending
    // summary records for drops.
    void flush(uint64_t tick) {
        for (auto& [kind, rule] : suppression_) {
            auto it = windows_.find(kind);
            if (it != windows_.end() && it->second.active &&
                tick / rule.window_ticks != it->second.window)
                flush_window(kind, rule);
        }
    }

    std::vector<Event> query(const EventFilter& filter) const {
        filter.validate();
        std::vector<Event> out;
        for (const auto& e : log_)
            if (filter.matches(e)) out.push_back(e);
        return out;
    }

    const std::vector<Event>& log() const { return log_; }

    std::string render_log() const {
        std::string out;
        for (const auto& e : log_) {
            out += e.render();
            out += '\n';
        }
        return out;
    }

private:
    struct WindowState {
        bool active = false;
        uint64_t window = 0;
        uint64_t seen = 0;
        uint64_t suppressed = 0;
        uint64_t last_tick = 0;
    };

    static void validate_event(const Event& e) {
        if (e.kind == EventKind::QBER_HIGH)
            require(e.attributes.count("qber") != 0, Errc::invalid_input,
                    "QBER_HIGH requires a qber attribute");
        require(!e.scope.empty(), Errc::invalid_input, "event scope empty");
    }

    void flush_window(EventKind kind, const SuppressionRule&) {
        auto it = windows_.find(kind);
        if (it == windows_.end() || !it->second.active) return;
        if (it->second.suppressed > 0) {
            Event summary;
            summary.tick = it->second.last_tick;
            summary.scope = "network";
            summary.kind = kind;
            summary.severity = Severity::info;
            summary.attributes["suppressed"] = std::to_string(it->second.suppressed);
            summary.attributes["summary"] = "1";
            append(std::move(summary));
        }
        it->second.active = false;
    }

    void append(Event e, bool run_policy_hook = true) {
        require(log_.empty() || e.tick >= log_.back().tick, Errc::invalid_input,
                "event ticks must be non-decreasing");
        log_.push_back(e);
        for (auto& s : subscribers_) s(log_.back());
        if (run_policy_hook && policy_hook_) policy_hook_(log_.back());
    }

    std::vector<Event> log_;
    std::vector<Subscriber> subscribers_;
    PolicyHook policy_hook_;
    std::map<EventKind, SuppressionRule> suppression_;
    std::map<EventKind, WindowState> windows_;
};

// Edge-triggered threshold watcher over link statistics: one event per
// upward crossing, re-armed only after the value falls back under the
// threshold.
class ThresholdWatcher {
public:
    struct Thresholds {
        double qber_high = 0.11;
        uint64_t pool_low_bytes = 0;
    };

    ThresholdWatcher() = default;
    explicit ThresholdWatcher(const Thresholds& t) : thresholds_(t) {}

    const Thresholds& thresholds() const { return thresholds_; }

    // Returns the events to emit for this observation of one link's stats.
    std::vector<Event> observe(uint64_t tick, const std::string& scope, double qber,
                               uint64_t pool_available_bytes) {
        return observe_with(thresholds_, tick, scope, qber, pool_available_bytes);
    }

    // Same, with scope-specific thresholds.
    std::vector<Event> observe_with(const Thresholds& thresholds, uint64_t tick,
                                    const std::string& scope, double qber,
                                    uint64_t pool_available_bytes) {
        std::vector<Event> out;
        auto& st = state_[scope];
        bool qber_above = qber > thresholds.qber_high;
        if (qber_above && !st.qber_high) {
            Event e;
            e.tick = tick;
            e.scope = scope;
            e.kind = EventKind::QBER_HIGH;
            e.severity = Severity::critical;
            e.attributes["qber"] = format_number(qber);
            out.push_back(std::move(e));
        }
        st.qber_high = qber_above;

        bool pool_low = pool_available_bytes < thresholds.pool_low_bytes;
        if (pool_low && !st.pool_low) {
            Event e;
            e.tick = tick;
            e.scope = scope;
            e.kind = EventKind::KEY_POOL_LOW;
            e.severity = Severity::warning;
            e.attributes["pool_bytes"] = std::to_string(pool_available_bytes);
            out.push_back(std::move(e));
        }
        st.pool_low = pool_low;
        return out;
    }

private:
    struct LinkState {
        bool qber_high = false;
        bool pool_low = false;
    };

    Thresholds thresholds_;
    std::map<std::string, LinkState> state_;
};

}  // namespace quonet
