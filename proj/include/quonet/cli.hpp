#pragma once

// Batch scenario runner. Every command takes --topology and --seed and is
// bit-reproducible given them. Exit codes: 0 scenario completed per contract
// (an expected lossy hash mismatch is a completion), 1 configuration error,
// 2 delivery or protocol failure.

#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "apps.hpp"
#include "config.hpp"
#include "control_plane.hpp"
#include "errors.hpp"
#include "siphash.hpp"

namespace quonet::cli {

struct CommonOpts {
    std::string topology;
    uint64_t seed = 1;
    uint64_t ticks = 0;
    std::string records_path;
    std::string event_log_path;
    bool parallel_nodes = false;
    std::string link;  // "a:b"
    std::string path;
};

inline void add_common(CLI::App* cmd, CommonOpts& o, bool needs_endpoint = true) {
    cmd->add_option("--topology", o.topology, "topology config file")->required();
    cmd->add_option("--seed", o.seed, "master seed (bit-reproducible runs)");
    cmd->add_option("--ticks", o.ticks, "extra simulation ticks after the scenario");
    cmd->add_option("--records", o.records_path, "machine-readable record stream file");
    cmd->add_option("--event-log", o.event_log_path, "write the management event log here");
    cmd->add_flag("--parallel-nodes", o.parallel_nodes,
                  "dispatch node handlers concurrently (identical results)");
    if (needs_endpoint) {
        cmd->add_option("--link", o.link, "link endpoints as a:b");
        cmd->add_option("--path", o.path, "established path name");
    }
}

class Runner {
public:
    Runner(const CommonOpts& o, std::ostream& out) : opts_(o), out_(out) {
        std::ifstream f(o.topology);
        require(f.good(), Errc::config_error, "cannot read topology file '" + o.topology + "'");
        std::stringstream ss;
        ss << f.rdbuf();
        ControllerOptions copt;
        copt.parallel_nodes = o.parallel_nodes;
        ctl_ = std::make_unique<Controller>(o.seed, copt);
        apply_topology(*ctl_, parse_topology(ss.str()), o.seed);
        if (!o.records_path.empty()) {
            records_.open(o.records_path);
            require(records_.good(), Errc::config_error,
                    "cannot write records file '" + o.records_path + "'");
        }
    }

    ~Runner() { finish(); }

    Controller& ctl() { return *ctl_; }

    uint64_t link_id() {
        require(!opts_.link.empty(), Errc::config_error, "--link a:b is required");
        auto colon = opts_.link.find(':');
        require(colon != std::string::npos, Errc::config_error, "--link must look like a:b");
        auto id = ctl_->find_link(opts_.link.substr(0, colon), opts_.link.substr(colon + 1));
        require(id.has_value(), Errc::config_error, "no such link '" + opts_.link + "'");
        return *id;
    }

    // Opens the requested circuit over --link or --path; returns both end
    // handles (local first).
    std::pair<CircuitHandle, CircuitHandle> open(CircuitKind kind, CircuitConfig cfg) {
        cfg.kind = kind;
        if (!opts_.path.empty()) {
            CircuitHandle a = ctl_->open_path_circuit(opts_.path, cfg);
            return {a, ctl_->peer_handle(a)};
        }
        uint64_t lid = link_id();
        const LinkSpec& s = ctl_->link_spec(lid);
        CircuitHandle a = ctl_->open_circuit(s.a, s.b, cfg);
        return {a, ctl_->peer_handle(a)};
    }

    void record(const std::string& line) {
        if (records_.is_open()) records_ << line << "\n";
    }

    void finish() {
        if (finished_) return;
        finished_ = true;
        if (opts_.ticks) ctl_->pump(opts_.ticks);
        if (!opts_.event_log_path.empty()) {
            std::ofstream f(opts_.event_log_path);
            f << ctl_->management().render_log();
        }
    }

private:
    CommonOpts opts_;
    std::ostream& out_;
    std::unique_ptr<Controller> ctl_;
    std::ofstream records_;
    bool finished_ = false;
};

inline std::string fmt(double v) { return format_number(v); }

inline std::string content_hash(const Bytes& b) {
    static const SipKey kContentKey = {'q', 'u', 'o', 'n', 'e', 't', '-', 'c',
                                       'o', 'n', 't', 'e', 'n', 't', '-', '0'};
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(siphash24(kContentKey, b)));
    return buf;
}

// ------------------------------------------------------------------- qkd

inline int cmd_qkd(const CommonOpts& o, uint64_t pulses, uint64_t trials, std::ostream& out) {
    Runner run(o, out);
    uint64_t lid = run.link_id();
    const LinkSpec& spec = run.ctl().link_spec(lid);

    out << "trial  status                qber      sifted  distilled  key_rate\n";
    uint64_t aborted = 0;
    double qber_sum = 0, sifted_sum = 0, distilled_sum = 0;
    uint64_t estimated = 0;
    for (uint64_t t = 0; t < trials; ++t) {
        QkdSessionParams p = spec.qkd;
        if (pulses) p.pulse_count = pulses;
        p.seed = derive_seed(o.seed, 0x9b0 + t);
        std::string status;
        QkdOutcome outc;
        try {
            outc = run.ctl().run_qkd_session(lid, p);
            status = status_name(outc.status);
            if (outc.status != QkdOutcome::Status::ok) ++aborted;
        } catch (const Error& e) {
            status = std::string("failed(") + errc_name(e.code()) + ")";
            ++aborted;
        }
        qber_sum += outc.qber_estimate;
        sifted_sum += static_cast<double>(outc.sifted_bits);
        distilled_sum += static_cast<double>(outc.distilled_bits);
        ++estimated;
        double rate = p.pulse_count ? static_cast<double>(outc.distilled_bits) /
                                          static_cast<double>(p.pulse_count)
                                    : 0.0;
        std::ostringstream row;
        row << std::left << std::setw(7) << t << std::setw(22) << status << std::setw(10)
            << fmt(outc.qber_estimate) << std::setw(8) << outc.sifted_bits << std::setw(11)
            << outc.distilled_bits << fmt(rate);
        out << row.str() << "\n";
        run.record("qkd trial=" + std::to_string(t) + " status=" + status +
                   " qber=" + fmt(outc.qber_estimate) +
                   " sifted=" + std::to_string(outc.sifted_bits) +
                   " distilled=" + std::to_string(outc.distilled_bits));
    }
    double n = static_cast<double>(estimated);
    out << "aggregate: trials=" << trials << " aborted=" << aborted
        << " mean_qber=" << fmt(qber_sum / n) << " mean_sifted=" << fmt(sifted_sum / n)
        << " mean_distilled=" << fmt(distilled_sum / n) << "\n";
    return 0;
}

// --------------------------------------------------------------- circuit

inline int cmd_circuit(const CommonOpts& o, const std::string& kind_name_str,
                       const std::string& input, CircuitConfig cfg, std::ostream& out) {
    Bytes data;
    {
        std::ifstream f(input, std::ios::binary);
        require(f.good(), Errc::config_error, "cannot read input file '" + input + "'");
        std::stringstream ss;
        ss << f.rdbuf();
        std::string s = ss.str();
        data.assign(s.begin(), s.end());
    }
    require(!data.empty(), Errc::config_error, "input file is empty");

    CircuitKind kind;
    if (kind_name_str == "lossy") kind = CircuitKind::secure_lossy_datagram;
    else if (kind_name_str == "reliable") kind = CircuitKind::secure_reliable_datagram;
    else if (kind_name_str == "bytestream") kind = CircuitKind::secure_reliable_bytestream;
    else fail(Errc::config_error, "kind must be lossy, reliable or bytestream");

    Runner run(o, out);
    auto [ha, hb] = run.open(kind, cfg);
    Bytes received;
    uint64_t sent_chunks = 0;

    if (kind == CircuitKind::secure_reliable_bytestream) {
        run.ctl().stream_write(ha, data);
        run.ctl().stream_close(ha);
        run.ctl().stream_drain(ha);
        run.ctl().pump(8);
        for (;;) {
            Bytes chunk = run.ctl().stream_read(hb, 1 << 20);
            if (chunk.empty()) {
                if (run.ctl().stream_eof(hb)) break;
                run.ctl().pump();
                continue;
            }
            received.insert(received.end(), chunk.begin(), chunk.end());
        }
        sent_chunks = (data.size() + cfg.max_datagram_bytes - 1) / cfg.max_datagram_bytes;
    } else {
        for (std::size_t off = 0; off < data.size(); off += cfg.max_datagram_bytes) {
            std::size_t n = std::min<std::size_t>(cfg.max_datagram_bytes, data.size() - off);
            Bytes chunk(data.begin() + off, data.begin() + off + n);
            if (kind == CircuitKind::secure_lossy_datagram) {
                run.ctl().send_lossy(ha, chunk);
                run.ctl().pump();
            } else {
                run.ctl().send_reliable(ha, chunk);
            }
            ++sent_chunks;
        }
        run.ctl().pump(cfg.ack_timeout_ticks + 4);
        while (auto b = run.ctl().recv(hb)) received.insert(received.end(), b->begin(), b->end());
    }

    CircuitStats sa = run.ctl().circuit_stats(ha);
    CircuitStats sb = run.ctl().circuit_stats(hb);
    bool match = content_hash(received) == content_hash(data) && received.size() == data.size();
    out << "kind: " << kind_name_str << "\n";
    out << "chunks sent: " << sent_chunks << "\n";
    out << "frames sent: " << sa.sent << " retransmitted: " << sa.retransmitted << "\n";
    out << "frames received ok: " << sb.received_ok << " discarded: " << sb.discarded << "\n";
    out << "bytes: sent=" << data.size() << " received=" << received.size() << "\n";
    out << "content hash: sent=" << content_hash(data) << " received=" << content_hash(received)
        << "\n";
    run.record("circuit kind=" + kind_name_str + " sent=" + std::to_string(data.size()) +
               " received=" + std::to_string(received.size()) +
               " match=" + (match ? "yes" : "no"));
    if (match) {
        out << "hash match: yes\n";
        return 0;
    }
    if (kind == CircuitKind::secure_lossy_datagram) {
        out << "hash match: no (expected under the lossy contract)\n";
        return 0;
    }
    out << "hash match: no\n";
    return 2;
}

// -------------------------------------------------------------- syncrand

inline int cmd_syncrand(const CommonOpts& o, uint64_t draws, unsigned bits, std::ostream& out) {
    Runner run(o, out);
    CircuitConfig cfg;
    cfg.key_refresh_datagrams = 256;
    auto [ha, hb] = run.open(CircuitKind::synchronized_random, cfg);
    std::vector<uint64_t> va, vb;
    va.reserve(draws);
    vb.reserve(draws);
    for (uint64_t i = 0; i < draws; ++i) {
        va.push_back(run.ctl().sync_random(ha, bits));
        vb.push_back(run.ctl().sync_random(hb, bits));
    }
    auto print_seq = [&](const char* who, const std::vector<uint64_t>& v) {
        out << who << ":";
        for (uint64_t x : v) out << " " << std::hex << x << std::dec;
        out << "\n";
    };
    print_seq(ha.local.c_str(), va);
    print_seq(hb.local.c_str(), vb);
    bool same = va == vb;
    out << "sequences identical: " << (same ? "true" : "false") << "\n";
    run.record(std::string("syncrand draws=") + std::to_string(draws) +
               " identical=" + (same ? "true" : "false"));
    return same ? 0 : 2;
}

// ------------------------------------------------------------ montecarlo

inline int cmd_montecarlo(const CommonOpts& o, const std::string& estimand_name, uint32_t parts,
                          uint64_t total_samples, const std::string& split, uint32_t resolution,
                          unsigned bits, std::ostream& out) {
    const CatalogEstimand& est = find_estimand(estimand_name);
    Runner run(o, out);
    CircuitConfig cfg;
    auto [ha, hb] = run.open(CircuitKind::synchronized_random, cfg);
    uint64_t va = run.ctl().sync_random(ha, bits);
    uint64_t vb = run.ctl().sync_random(hb, bits);
    require(va == vb, Errc::desync, "endpoints drew different shared numbers");
    SharedRandom shared{va, bits};
    double r = to_fraction(shared);

    Partition part;
    if (split == "axis") {
        require(parts == 2, Errc::config_error, "axis split has exactly two parts");
        require(est.dim == 2, Errc::config_error, "axis split needs a 2-D estimand");
        part = split_axis_2d(r);
    } else if (split == "unfolded") {
        part = split_unfolded(r, parts, est.dim, resolution);
    } else if (split == "circular") {
        require(est.dim == 1, Errc::config_error, "circular split needs a 1-D estimand");
        part = split_circular(r, parts);
    } else {
        fail(Errc::config_error, "split must be axis, unfolded or circular");
    }

    uint64_t per_node = total_samples / parts;
    require(per_node >= 1, Errc::config_error, "samples too small for the part count");
    std::vector<uint64_t> seeds;
    for (uint32_t i = 0; i < parts; ++i) seeds.push_back(derive_seed(va, i + 1));
    McEstimate e = parallel_monte_carlo(est.fn, part, per_node, seeds);

    out << "estimand: " << est.name << "  shared_r: " << fmt(r) << "  split: " << split
        << "  parts: " << parts << "  samples/node: " << per_node << "\n";
    for (uint32_t i = 0; i < parts; ++i) {
        const auto& reg = e.regions[i];
        out << "region " << i << ": measure=" << fmt(part.regions[i].measure())
            << " mean=" << fmt(reg.mean)
            << " se=" << fmt(std::sqrt(reg.variance / static_cast<double>(reg.samples))) << "\n";
    }
    out << "estimate: " << fmt(e.value) << " +/- " << fmt(e.std_error)
        << "  (true " << fmt(est.true_value) << ", deviation "
        << fmt(e.std_error > 0 ? std::abs(e.value - est.true_value) / e.std_error : 0.0)
        << " SE)\n";
    if (est.name == "quarter_circle")
        out << "pi estimate: " << fmt(4.0 * e.value) << " +/- " << fmt(4.0 * e.std_error) << "\n";
    run.record("montecarlo estimand=" + est.name + " estimate=" + fmt(e.value) +
               " se=" + fmt(e.std_error));
    return 0;
}

// ---------------------------------------------------------------- search

inline int cmd_search(const CommonOpts& o, uint64_t items, uint32_t nodes,
                      std::optional<uint64_t> target, unsigned bits, std::ostream& out) {
    Runner run(o, out);
    CircuitConfig cfg;
    auto [ha, hb] = run.open(CircuitKind::synchronized_random, cfg);
    uint64_t va = run.ctl().sync_random(ha, bits);
    uint64_t vb = run.ctl().sync_random(hb, bits);
    require(va == vb, Errc::desync, "endpoints drew different shared numbers");

    uint64_t target_idx = target.value_or([&] {
        uint64_t s = derive_seed(o.seed, 0x7a7);
        return Xoshiro256ss(s).next_below(items);
    }());
    require(target_idx < items, Errc::config_error, "target index out of range");

    SearchReport rep = parallel_las_vegas_search(
        items, [target_idx](uint64_t i) { return i == target_idx; }, SharedRandom{va, bits},
        nodes);

    out << "items: " << items << "  nodes: " << nodes << "  target: " << target_idx << "\n";
    uint64_t total = 0;
    for (uint32_t i = 0; i < nodes; ++i) {
        out << "node " << i << ": probes=" << rep.probes_per_node[i]
            << (i == rep.winning_node ? "  <- found it" : "") << "\n";
        total += rep.probes_per_node[i];
    }
    out << "found index: " << rep.found_index << "  winner: node " << rep.winning_node
        << "  probes by winner: " << rep.probes_by_winner << "  total probes: " << total << "\n";
    run.record("search items=" + std::to_string(items) + " nodes=" + std::to_string(nodes) +
               " found=" + std::to_string(rep.found_index) +
               " winner_probes=" + std::to_string(rep.probes_by_winner));
    return 0;
}

// ------------------------------------------------------------------ main

inline int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
    CLI::App app{"quonet: quantum-overlay network simulator and SDK"};
    app.require_subcommand(1);

    CommonOpts qkd_o, cir_o, syn_o, mc_o, se_o;
    uint64_t qkd_pulses = 0, qkd_trials = 10;
    auto* qkd = app.add_subcommand("qkd", "run seeded BB84 sessions and report key statistics");
    add_common(qkd, qkd_o);
    qkd->add_option("--pulses", qkd_pulses, "pulses per session (0 = link default)");
    qkd->add_option("--trials", qkd_trials, "number of sessions");

    std::string cir_kind = "reliable", cir_input;
    CircuitConfig cir_cfg;
    cir_cfg.key_refresh_datagrams = 4096;
    cir_cfg.retransmit_limit = 50;
    auto* cir = app.add_subcommand("circuit", "transfer a file over a circuit kind");
    add_common(cir, cir_o);
    cir->add_option("--kind", cir_kind, "lossy | reliable | bytestream");
    cir->add_option("--input", cir_input, "file to transfer")->required();
    std::string cir_cipher = "stream";
    cir->add_option("--cipher", cir_cipher, "stream | otp");
    cir->add_option("--max-datagram", cir_cfg.max_datagram_bytes, "datagram size limit");
    cir->add_option("--retransmit-limit", cir_cfg.retransmit_limit, "per-datagram attempts");
    cir->add_option("--ack-timeout", cir_cfg.ack_timeout_ticks, "ticks before retransmit");

    uint64_t syn_draws = 100;
    unsigned syn_bits = 16;
    auto* syn = app.add_subcommand("syncrand", "draw synchronized random numbers at both ends");
    add_common(syn, syn_o);
    syn->add_option("--draws", syn_draws, "paired draws");
    syn->add_option("--bits", syn_bits, "bits per draw (1-64)");

    std::string mc_estimand = "quarter_circle", mc_split = "axis";
    uint32_t mc_parts = 2, mc_resolution = 256;
    uint64_t mc_samples = 400000;
    unsigned mc_bits = 32;
    auto* mc = app.add_subcommand("montecarlo", "partitioned parallel Monte Carlo estimation");
    add_common(mc, mc_o);
    mc->add_option("--estimand", mc_estimand, "constant | quarter_circle | product_of_sines");
    mc->add_option("--parts", mc_parts, "number of equal parts / nodes");
    mc->add_option("--samples", mc_samples, "total samples across nodes");
    mc->add_option("--split", mc_split, "axis | unfolded | circular");
    mc->add_option("--resolution", mc_resolution, "cells per axis for the unfolded split");
    mc->add_option("--bits", mc_bits, "shared number width");

    uint64_t se_items = 4096;
    uint32_t se_nodes = 4;
    unsigned se_bits = 32;
    std::optional<uint64_t> se_target;
    auto* se = app.add_subcommand("search", "parallel Las Vegas search over a shared permutation");
    add_common(se, se_o);
    se->add_option("--items", se_items, "collection size");
    se->add_option("--nodes", se_nodes, "parallel searchers");
    se->add_option("--target", se_target, "target index (default: seeded uniform)");
    se->add_option("--bits", se_bits, "shared number width");

    std::vector<const char*> argv;
    argv.push_back("quonet");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e, out, err);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (qkd->parsed()) return cmd_qkd(qkd_o, qkd_pulses, qkd_trials, out);
        if (cir->parsed()) {
            cir_cfg.cipher_mode =
                cir_cipher == "otp" ? CipherMode::one_time_pad : CipherMode::keyed_stream;
            if (cir_cfg.cipher_mode == CipherMode::one_time_pad &&
                *cir_cfg.key_refresh_datagrams > 64)
                cir_cfg.key_refresh_datagrams = 8;  // keep pad arenas fundable
            return cmd_circuit(cir_o, cir_kind, cir_input, cir_cfg, out);
        }
        if (syn->parsed()) return cmd_syncrand(syn_o, syn_draws, syn_bits, out);
        if (mc->parsed())
            return cmd_montecarlo(mc_o, mc_estimand, mc_parts, mc_samples, mc_split,
                                  mc_resolution, mc_bits, out);
        if (se->parsed()) return cmd_search(se_o, se_items, se_nodes, se_target, se_bits, out);
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        switch (e.code()) {
            case Errc::config_error:
            case Errc::invalid_input:
            case Errc::unknown_node:
            case Errc::duplicate_link:
            case Errc::invalid_filter:
                return 1;
            default:
                return 2;
        }
    }
    return 1;
}

}  // namespace quonet::cli
