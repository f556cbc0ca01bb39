#pragma once

// Line-oriented sectioned topology configuration: [node], [link], [path],
// [policy] and [defaults] blocks of `key = value` entries. Parsing and
// reference resolution fail fast with the offending line number. Grammar and
// key list: docs/formats.md.

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "control_plane.hpp"
#include "errors.hpp"

namespace quonet {

struct NodeDecl {
    std::string name;
    bool trusted = false;
    int line = 0;
};

struct LinkDecl {
    LinkSpec spec;
    bool prefill = false;
    std::set<std::string> explicit_keys;
    int line = 0;
};

struct PathDecl {
    std::string name;
    std::vector<std::string> nodes;
    int line = 0;
};

struct TopologyConfig {
    std::vector<NodeDecl> nodes;
    std::vector<LinkDecl> links;
    std::vector<PathDecl> paths;
    std::vector<Policy> policies;
    QkdSessionParams defaults;
    std::set<std::string> default_keys;
};

namespace config_detail {

inline std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

[[noreturn]] inline void bad_line(int line, const std::string& what) {
    fail(Errc::config_error, "line " + std::to_string(line) + ": " + what);
}

inline double parse_double(const std::string& v, int line) {
    char* end = nullptr;
    double d = std::strtod(v.c_str(), &end);
    if (!end || *end != '\0' || end == v.c_str()) bad_line(line, "expected a number, got '" + v + "'");
    return d;
}

inline uint64_t parse_u64(const std::string& v, int line) {
    char* end = nullptr;
    unsigned long long u = std::strtoull(v.c_str(), &end, 10);
    if (!end || *end != '\0' || end == v.c_str())
        bad_line(line, "expected an unsigned integer, got '" + v + "'");
    return u;
}

inline bool parse_bool(const std::string& v, int line) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    bad_line(line, "expected a boolean, got '" + v + "'");
}

inline std::vector<std::string> split_words(const std::string& v) {
    std::istringstream in(v);
    std::vector<std::string> out;
    std::string w;
    while (in >> w) out.push_back(w);
    return out;
}

inline bool apply_qkd_key(QkdSessionParams& q, const std::string& key, const std::string& value,
                          int line) {
    if (key == "pulses") q.pulse_count = parse_u64(value, line);
    else if (key == "sample_fraction") q.sample_fraction = parse_double(value, line);
    else if (key == "qber_threshold") q.qber_abort_threshold = parse_double(value, line);
    else if (key == "block_size") q.reconciliation_block_size =
        static_cast<uint32_t>(parse_u64(value, line));
    else if (key == "safety_margin") q.privacy_safety_margin_bits = parse_u64(value, line);
    else if (key == "qkd_seed") q.seed = parse_u64(value, line);
    else return false;
    return true;
}

}  // namespace config_detail

inline TopologyConfig parse_topology(const std::string& text) {
    using namespace config_detail;
    TopologyConfig cfg;
    std::istringstream in(text);
    std::string raw;
    int line_no = 0;
    std::string section;
    std::string pending_policy_name;

    auto finish_section = [&]() {
        if (section == "node" && !cfg.nodes.empty() && cfg.nodes.back().name.empty())
            bad_line(cfg.nodes.back().line, "[node] needs a name");
        if (section == "link" && !cfg.links.empty() &&
            (cfg.links.back().spec.a.empty() || cfg.links.back().spec.b.empty()))
            bad_line(cfg.links.back().line, "[link] needs endpoints");
        if (section == "path" && !cfg.paths.empty() &&
            (cfg.paths.back().name.empty() || cfg.paths.back().nodes.size() < 2))
            bad_line(cfg.paths.back().line, "[path] needs a name and at least two nodes");
    };

    while (std::getline(in, raw)) {
        ++line_no;
        std::string line = trim(raw);
        auto hash = line.find('#');
        if (hash != std::string::npos) line = trim(line.substr(0, hash));
        if (line.empty()) continue;

        if (line.front() == '[') {
            if (line.back() != ']') bad_line(line_no, "unterminated section header");
            finish_section();
            section = line.substr(1, line.size() - 2);
            if (section == "node") cfg.nodes.push_back({"", false, line_no});
            else if (section == "link") cfg.links.push_back({{}, false, {}, line_no});
            else if (section == "path") cfg.paths.push_back({"", {}, line_no});
            else if (section == "policy" || section == "defaults") {}
            else bad_line(line_no, "unknown section [" + section + "]");
            continue;
        }

        auto eq = line.find('=');
        if (eq == std::string::npos) bad_line(line_no, "expected 'key = value'");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty()) bad_line(line_no, "expected 'key = value'");
        if (section.empty()) bad_line(line_no, "entry outside any section");

        if (section == "node") {
            NodeDecl& n = cfg.nodes.back();
            if (key == "name") n.name = value;
            else if (key == "trusted") n.trusted = parse_bool(value, line_no);
            else bad_line(line_no, "unknown [node] key '" + key + "'");
        } else if (section == "link") {
            LinkDecl& l = cfg.links.back();
            l.explicit_keys.insert(key);
            if (key == "endpoints") {
                auto words = split_words(value);
                if (words.size() != 2) bad_line(line_no, "endpoints needs exactly two node names");
                l.spec.a = words[0];
                l.spec.b = words[1];
            } else if (key == "loss") l.spec.quantum.loss_probability = parse_double(value, line_no);
            else if (key == "flip") l.spec.quantum.flip_probability = parse_double(value, line_no);
            else if (key == "eavesdropper") {
                if (value == "none") l.spec.quantum.eavesdropper = Eavesdropper::none;
                else if (value == "intercept_resend")
                    l.spec.quantum.eavesdropper = Eavesdropper::intercept_resend;
                else bad_line(line_no, "eavesdropper must be none or intercept_resend");
            } else if (key == "seed") l.spec.quantum.seed = parse_u64(value, line_no);
            else if (key == "drop") l.spec.classical.drop_probability = parse_double(value, line_no);
            else if (key == "latency")
                l.spec.classical.latency_ticks = static_cast<uint32_t>(parse_u64(value, line_no));
            else if (key == "low_watermark") l.spec.low_watermark_bytes = parse_u64(value, line_no);
            else if (key == "prefill") l.prefill = parse_bool(value, line_no);
            else if (!config_detail::apply_qkd_key(l.spec.qkd, key, value, line_no))
                bad_line(line_no, "unknown [link] key '" + key + "'");
        } else if (section == "path") {
            PathDecl& p = cfg.paths.back();
            if (key == "name") p.name = value;
            else if (key == "nodes") p.nodes = split_words(value);
            else bad_line(line_no, "unknown [path] key '" + key + "'");
        } else if (section == "policy") {
            if (key == "name") pending_policy_name = value;
            else if (key == "rule") {
                try {
                    cfg.policies.push_back(parse_policy_line(
                        value, pending_policy_name.empty()
                                   ? "policy-" + std::to_string(cfg.policies.size() + 1)
                                   : pending_policy_name));
                } catch (const Error& e) {
                    bad_line(line_no, e.what());
                }
                pending_policy_name.clear();
            } else bad_line(line_no, "unknown [policy] key '" + key + "'");
        } else if (section == "defaults") {
            cfg.default_keys.insert(key);
            if (!config_detail::apply_qkd_key(cfg.defaults, key, value, line_no))
                bad_line(line_no, "unknown [defaults] key '" + key + "'");
        }
    }
    finish_section();

    // Cross references resolve now; later ones (paths over links) need the
    // full declaration set.
    std::set<std::string> names;
    for (const auto& n : cfg.nodes) {
        if (!names.insert(n.name).second) bad_line(n.line, "duplicate node '" + n.name + "'");
    }
    for (const auto& l : cfg.links) {
        if (!names.count(l.spec.a)) bad_line(l.line, "link references unknown node '" + l.spec.a + "'");
        if (!names.count(l.spec.b)) bad_line(l.line, "link references unknown node '" + l.spec.b + "'");
    }
    for (const auto& p : cfg.paths)
        for (const auto& n : p.nodes)
            if (!names.count(n)) bad_line(p.line, "path references unknown node '" + n + "'");
    return cfg;
}

// Applies defaults, derives per-link seeds from the master seed, registers
// everything with the controller, and establishes declared paths.
inline void apply_topology(Controller& ctl, const TopologyConfig& cfg, uint64_t master_seed) {
    for (const auto& n : cfg.nodes) ctl.add_node(n.name, n.trusted);

    for (std::size_t i = 0; i < cfg.links.size(); ++i) {
        LinkDecl l = cfg.links[i];
        for (const auto& key : cfg.default_keys) {
            if (l.explicit_keys.count(key)) continue;
            QkdSessionParams merged = l.spec.qkd;
            // re-apply the default value for this key
            if (key == "pulses") merged.pulse_count = cfg.defaults.pulse_count;
            else if (key == "sample_fraction") merged.sample_fraction = cfg.defaults.sample_fraction;
            else if (key == "qber_threshold")
                merged.qber_abort_threshold = cfg.defaults.qber_abort_threshold;
            else if (key == "block_size")
                merged.reconciliation_block_size = cfg.defaults.reconciliation_block_size;
            else if (key == "safety_margin")
                merged.privacy_safety_margin_bits = cfg.defaults.privacy_safety_margin_bits;
            else if (key == "qkd_seed") merged.seed = cfg.defaults.seed;
            l.spec.qkd = merged;
        }
        if (!l.explicit_keys.count("seed"))
            l.spec.quantum.seed = derive_seed(master_seed, 0x11a + i);
        if (!l.explicit_keys.count("qkd_seed") && !cfg.default_keys.count("qkd_seed"))
            l.spec.qkd.seed = derive_seed(master_seed, 0x5e0 + i);
        l.spec.classical.seed = derive_seed(master_seed, 0xc1a + i);
        ctl.configure_link(l.spec, l.prefill);
    }

    for (const auto& p : cfg.paths) {
        PathSpec spec;
        spec.name = p.name;
        for (std::size_t i = 0; i + 1 < p.nodes.size(); ++i) {
            auto lid = ctl.find_link(p.nodes[i], p.nodes[i + 1]);
            if (!lid)
                fail(Errc::config_error, "path '" + p.name + "': no link between " + p.nodes[i] +
                                             " and " + p.nodes[i + 1]);
            spec.hop_link_ids.push_back(*lid);
        }
        ctl.establish_path(spec);
    }

    for (const auto& p : cfg.policies) ctl.add_policy(p);
}

}  // namespace quonet
