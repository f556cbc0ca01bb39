#pragma once

#include <stdexcept>
#include <string>

namespace quonet {

enum class Errc {
    invalid_input,
    unknown_node,
    duplicate_link,
    session_timeout,
    reconciliation_failed,
    circuit_unavailable,
    key_exhausted,
    delivery_failed,
    path_unavailable,
    desync,
    invalid_filter,
    not_found,
    partial_aggregate,
    config_error,
    link_down,
};

inline const char* errc_name(Errc c) {
    switch (c) {
        case Errc::invalid_input: return "InvalidInput";
        case Errc::unknown_node: return "UnknownNode";
        case Errc::duplicate_link: return "DuplicateLink";
        case Errc::session_timeout: return "SessionTimeout";
        case Errc::reconciliation_failed: return "ReconciliationFailed";
        case Errc::circuit_unavailable: return "CircuitUnavailable";
        case Errc::key_exhausted: return "KeyExhausted";
        case Errc::delivery_failed: return "DeliveryFailed";
        case Errc::path_unavailable: return "PathUnavailable";
        case Errc::desync: return "DesyncError";
        case Errc::invalid_filter: return "InvalidFilter";
        case Errc::not_found: return "NotFound";
        case Errc::partial_aggregate: return "PartialAggregate";
        case Errc::config_error: return "ConfigError";
        case Errc::link_down: return "LinkDown";
    }
    return "UnknownError";
}

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what)
        : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

inline void require(bool ok, Errc code, const std::string& what) {
    if (!ok) fail(code, what);
}

}  // namespace quonet
