#pragma once

// BB84 session engine: pulse exchange over the quantum underlay, sifting,
// QBER estimation on a disclosed sample, single-pass block-parity
// reconciliation with a whole-key verification hash, and Toeplitz privacy
// amplification. Successful sessions append identical distilled bytes to the
// key pools at both ends of a link.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "classical_underlay.hpp"
#include "errors.hpp"
#include "quantum_underlay.hpp"
#include "rng.hpp"
#include "siphash.hpp"
#include "wire.hpp"

namespace quonet {

// A bit sequence as explicit 0/1 values; packed forms are derived only where
// hashing or matrix arithmetic needs them.
using BitVec = std::vector<uint8_t>;

inline Bytes pack_bits(const BitVec& bits) {
    Bytes out((bits.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < bits.size(); ++i)
        if (bits[i]) out[i >> 3] |= static_cast<uint8_t>(1u << (i & 7));
    return out;
}

struct QkdSessionParams {
    uint64_t pulse_count = 10000;
    double sample_fraction = 0.1;
    double qber_abort_threshold = 0.11;
    uint32_t reconciliation_block_size = 8;
    uint32_t privacy_safety_margin_bits = 64;
    uint64_t seed = 0;

    void validate() const {
        require(pulse_count > 0, Errc::invalid_input, "pulse_count must be positive");
        require(sample_fraction > 0.0 && sample_fraction < 1.0, Errc::invalid_input,
                "sample_fraction out of (0,1)");
        require(qber_abort_threshold > 0.0 && qber_abort_threshold < 1.0, Errc::invalid_input,
                "qber_abort_threshold out of (0,1)");
        require(reconciliation_block_size > 0, Errc::invalid_input,
                "reconciliation_block_size must be positive");
        require(pulse_count >= 16ull * reconciliation_block_size, Errc::invalid_input,
                "pulse_count must be at least 16x reconciliation_block_size");
    }
};

struct SiftedKey {
    BitVec bits;
    std::vector<uint64_t> source_indices;

    std::size_t size() const { return bits.size(); }
};

struct QkdOutcome {
    enum class Status { ok, aborted_qber, aborted_insufficient };
    Status status = Status::ok;
    double qber_estimate = 0.0;
    uint64_t distilled_bits = 0;
    uint64_t sifted_bits = 0;  // sifted key length before sampling
};

inline const char* status_name(QkdOutcome::Status s) {
    switch (s) {
        case QkdOutcome::Status::ok: return "ok";
        case QkdOutcome::Status::aborted_qber: return "aborted_qber";
        case QkdOutcome::Status::aborted_insufficient: return "aborted_insufficient";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// Key pool: the distilled shared secret held at one end of a link. Both
// replicas of a link's pool stay byte-identical; consumption moves only via
// handshake-coordinated grants, so offsets agree at both ends absent faults.

class KeyPool {
public:
    void set_low_watermark(uint64_t bytes) { watermark_ = bytes; }
    uint64_t low_watermark() const { return watermark_; }

    void append(const Bytes& distilled) {
        material_.insert(material_.end(), distilled.begin(), distilled.end());
        ++sessions_;
    }

    uint64_t session_counter() const { return sessions_; }
    uint64_t size() const { return material_.size(); }
    uint64_t consumed_offset() const { return consumed_; }
    uint64_t available() const { return material_.size() - consumed_; }
    bool below_watermark() const { return available() < watermark_; }

    // Allocator-side draw of the next contiguous range.
    std::pair<uint64_t, uint64_t> allocate(uint64_t n) {
        require(available() >= n, Errc::key_exhausted, "key pool has too little material");
        uint64_t begin = consumed_;
        consumed_ += n;
        return {begin, consumed_};
    }

    // Replica-side follow: offsets only ever move forward.
    void advance_to(uint64_t offset) {
        require(offset <= material_.size(), Errc::invalid_input, "offset beyond pool material");
        consumed_ = std::max(consumed_, offset);
    }

    Bytes read(uint64_t offset, uint64_t len) const {
        require(offset + len <= material_.size(), Errc::invalid_input, "pool read out of range");
        return Bytes(material_.begin() + static_cast<std::ptrdiff_t>(offset),
                     material_.begin() + static_cast<std::ptrdiff_t>(offset + len));
    }

    uint64_t material_hash() const {
        static const SipKey kPoolKey = {'q', 'u', 'o', 'n', 'e', 't', '-', 'p',
                                        'o', 'o', 'l', '-', 'h', 'a', 's', 'h'};
        return siphash24(kPoolKey, material_);
    }

private:
    Bytes material_;
    uint64_t consumed_ = 0;
    uint64_t watermark_ = 0;
    uint64_t sessions_ = 0;
};

// ---------------------------------------------------------------------------
// Protocol stages as standalone operations.

inline std::pair<SiftedKey, SiftedKey> sift(std::span<const Basis> sender_bases,
                                            std::span<const Basis> receiver_bases,
                                            std::span<const QubitSymbol> sender_symbols,
                                            std::span<const DetectionRecord> detections) {
    require(sender_bases.size() == receiver_bases.size() &&
                sender_bases.size() == detections.size() &&
                sender_symbols.size() == sender_bases.size(),
            Errc::invalid_input, "sift input length mismatch");
    SiftedKey sender, receiver;
    for (std::size_t i = 0; i < detections.size(); ++i) {
        if (detections[i].lost) continue;
        if (sender_bases[i] != receiver_bases[i]) continue;
        sender.bits.push_back(sender_symbols[i].bit);
        sender.source_indices.push_back(i);
        receiver.bits.push_back(detections[i].bit);
        receiver.source_indices.push_back(i);
    }
    return {std::move(sender), std::move(receiver)};
}

// Fraction of disagreeing bits over a disclosed sample. disclosed carries
// (source_index, peer_bit) pairs; indices must refer to positions present in
// the local key. Removal of the sampled positions is the caller's step.
inline double estimate_qber(const SiftedKey& local,
                            std::span<const std::pair<uint64_t, uint8_t>> disclosed) {
    require(!disclosed.empty(), Errc::invalid_input, "empty QBER sample");
    std::size_t mismatches = 0;
    for (const auto& [idx, peer_bit] : disclosed) {
        auto it = std::lower_bound(local.source_indices.begin(), local.source_indices.end(), idx);
        require(it != local.source_indices.end() && *it == idx, Errc::invalid_input,
                "disclosed index not in sifted key");
        std::size_t pos = static_cast<std::size_t>(it - local.source_indices.begin());
        if (local.bits[pos] != peer_bit) ++mismatches;
    }
    return static_cast<double>(mismatches) / static_cast<double>(disclosed.size());
}

inline BitVec block_parities(const BitVec& bits, uint32_t block_size) {
    BitVec out;
    for (std::size_t start = 0; start < bits.size(); start += block_size) {
        uint8_t p = 0;
        std::size_t end = std::min(bits.size(), start + block_size);
        for (std::size_t i = start; i < end; ++i) p ^= bits[i];
        out.push_back(p);
    }
    return out;
}

// Single-pass parity-discard step: both sides drop every block whose parity
// disagrees. Blocks with an even number of flips survive carrying residual
// errors; the whole-key hash check downstream catches those sessions.
inline std::pair<BitVec, BitVec> reconcile_block_parity(const BitVec& a, const BitVec& b,
                                                        uint32_t block_size) {
    require(a.size() == b.size(), Errc::invalid_input, "reconcile length mismatch");
    require(block_size > 0, Errc::invalid_input, "block_size must be positive");
    BitVec pa = block_parities(a, block_size);
    BitVec pb = block_parities(b, block_size);
    BitVec ka, kb;
    for (std::size_t blk = 0; blk < pa.size(); ++blk) {
        if (pa[blk] != pb[blk]) continue;
        std::size_t start = blk * block_size;
        std::size_t end = std::min(a.size(), start + block_size);
        ka.insert(ka.end(), a.begin() + start, a.begin() + end);
        kb.insert(kb.end(), b.begin() + start, b.begin() + end);
    }
    return {std::move(ka), std::move(kb)};
}

inline uint64_t key_verify_hash(const BitVec& bits) {
    static const SipKey kVerifyKey = {'q', 'u', 'o', 'n', 'e', 't', '-', 'k',
                                      'e', 'y', '-', 'v', 'e', 'r', 'i', 'f'};
    Bytes packed = pack_bits(bits);
    WireWriter w;
    w.raw(packed.data(), packed.size());
    w.u64(bits.size());
    return siphash24(kVerifyKey, w.view());
}

inline double binary_entropy(double p) {
    if (p <= 0.0 || p >= 1.0) return 0.0;
    return -p * std::log2(p) - (1.0 - p) * std::log2(1.0 - p);
}

// Post-amplification length in bits: floor(n * (1 - 2*h2(q))) - margin,
// clamped at zero. One entropy term bounds the adversary's information, the
// second crudely bounds parity disclosure from reconciliation.
inline uint64_t distilled_bit_count(uint64_t n_bits, double qber, uint64_t safety_margin_bits) {
    double rate = 1.0 - 2.0 * binary_entropy(qber);
    if (rate <= 0.0) return 0;
    double raw = std::floor(static_cast<double>(n_bits) * rate);
    if (raw <= static_cast<double>(safety_margin_bits)) return 0;
    return static_cast<uint64_t>(raw) - safety_margin_bits;
}

// Toeplitz universal hash over GF(2), compressing n input bits to out_bits.
// The matrix is defined by out_bits + n - 1 bits drawn from the documented
// keystream seeded with `seed`; output bit j is the inner product of matrix
// row j with the input. Output is packed LSB-first into whole bytes (length
// floor(out_bits/8)); both ends produce identical bytes from identical input.
inline Bytes toeplitz_compress(const BitVec& input, uint64_t out_bits, uint64_t seed) {
    const std::size_t n = input.size();
    if (out_bits == 0 || n == 0) return {};

    // Row j of the Toeplitz matrix, scanned against input reversed, is the
    // window t[j .. j+n-1]; pack both operands and slide.
    const std::size_t t_bits = out_bits + n - 1;
    const std::size_t t_words = (t_bits + 63) / 64 + 1;
    std::vector<uint64_t> t(t_words, 0);
    Xoshiro256ss rng(seed);
    for (auto& w : t) w = rng.next_u64();

    const std::size_t in_words = (n + 63) / 64;
    std::vector<uint64_t> rev(in_words, 0);
    for (std::size_t m = 0; m < n; ++m)
        if (input[n - 1 - m]) rev[m >> 6] |= (1ull << (m & 63));
    // Mask tail bits beyond n so window AND sees zeros there.
    if (n & 63) rev[in_words - 1] &= (~0ull) >> (64 - (n & 63));

    Bytes out(out_bits / 8, 0);
    const uint64_t usable_bits = (out.size()) * 8;
    for (uint64_t j = 0; j < usable_bits; ++j) {
        int parity = 0;
        for (std::size_t w = 0; w < in_words; ++w) {
            std::size_t bit = j + 64 * w;
            std::size_t k = bit >> 6;
            unsigned s = bit & 63;
            uint64_t window = s ? ((t[k] >> s) | (t[k + 1] << (64 - s))) : t[k];
            parity ^= __builtin_parityll(window & rev[w]);
        }
        if (parity) out[j >> 3] |= static_cast<uint8_t>(1u << (j & 7));
    }
    return out;
}

// Full amplification step: length from the entropy formula, truncated to
// whole bytes for pool material.
inline Bytes privacy_amplify(const BitVec& bits, double qber_estimate,
                             uint64_t safety_margin_bits, uint64_t shared_seed) {
    uint64_t out_bits = distilled_bit_count(bits.size(), qber_estimate, safety_margin_bits);
    return toeplitz_compress(bits, out_bits, shared_seed);
}

// ---------------------------------------------------------------------------
// Session coordinator. Drives both endpoints of one link through a full BB84
// session; every classical byte crosses the simulated channel on the
// "qkd-sift" label (record formats: docs/formats.md). Both ends always reach
// the same status; ok appends the same bytes to both pools.

namespace qkd_detail {

inline Bytes encode_bitmap(const BitVec& bits) {
    WireWriter w;
    w.u64(bits.size());
    Bytes packed = pack_bits(bits);
    w.raw(packed.data(), packed.size());
    return w.take();
}

inline BitVec decode_bitmap(WireReader& r) {
    uint64_t n = r.u64();
    BitVec bits(n, 0);
    Bytes packed((n + 7) / 8);
    for (auto& byte : packed) byte = r.u8();
    for (uint64_t i = 0; i < n; ++i) bits[i] = (packed[i >> 3] >> (i & 7)) & 1;
    return bits;
}

inline Bytes encode_indices(const std::vector<uint64_t>& v) {
    WireWriter w;
    w.u64(v.size());
    for (uint64_t x : v) w.u64(x);
    return w.take();
}

inline std::vector<uint64_t> decode_indices(WireReader& r) {
    uint64_t n = r.u64();
    std::vector<uint64_t> v(n);
    for (auto& x : v) x = r.u64();
    return v;
}

}  // namespace qkd_detail

struct QkdEndpoints {
    NodeId initiator;   // prepares and sends pulses
    NodeId responder;   // measures
    KeyPool* initiator_pool = nullptr;
    KeyPool* responder_pool = nullptr;
};

inline QkdOutcome run_session(Network& net, const QkdEndpoints& ends,
                              const QuantumLinkParams& link, const QkdSessionParams& params,
                              XferPolicy xfer = {}) {
    using namespace qkd_detail;
    params.validate();
    link.validate();
    KeyPool& pool_a = *ends.initiator_pool;
    KeyPool& pool_b = *ends.responder_pool;

    const uint64_t session_index = pool_a.session_counter();
    uint64_t proto_seed = derive_seed(params.seed, session_index);
    Xoshiro256ss a_rng(derive_seed(proto_seed, 1));
    Xoshiro256ss b_rng(derive_seed(proto_seed, 2));
    RecordConversation conv(net, ends.initiator, ends.responder, "qkd-sift",
                            derive_seed(proto_seed, 3));

    // (1) initiator prepares pulses; responder picks measurement bases.
    std::vector<QubitSymbol> symbols(params.pulse_count);
    std::vector<Basis> a_bases(params.pulse_count);
    for (uint64_t i = 0; i < params.pulse_count; ++i) {
        a_bases[i] = a_rng.next_bit() ? Basis::diagonal : Basis::rectilinear;
        symbols[i] = QubitSymbol{a_bases[i], static_cast<uint8_t>(a_rng.next_bit())};
    }
    std::vector<Basis> b_bases(params.pulse_count);
    for (auto& b : b_bases) b = b_rng.next_bit() ? Basis::diagonal : Basis::rectilinear;

    QuantumLinkParams session_link = link;
    session_link.seed = derive_seed(link.seed, session_index);
    std::vector<DetectionRecord> detections = transmit_pulses(symbols, b_bases, session_link);

    // (2) responder discloses which pulses were detected and its bases; the
    // initiator works from the received record only.
    SiftedKey a_key;
    {
        BitVec detected(params.pulse_count, 0), bases_bits(params.pulse_count, 0);
        for (uint64_t i = 0; i < params.pulse_count; ++i) {
            detected[i] = detections[i].measured() ? 1 : 0;
            bases_bits[i] = b_bases[i] == Basis::diagonal ? 1 : 0;
        }
        WireWriter w;
        w.u8(1);  // REC_DETECTIONS
        Bytes d = encode_bitmap(detected), bb = encode_bitmap(bases_bits);
        w.raw(d.data(), d.size());
        w.raw(bb.data(), bb.size());
        Bytes rec = conv.transfer(ends.responder, w.take(), xfer);

        WireReader r(rec);
        r.u8();
        BitVec got_detected = decode_bitmap(r);
        BitVec got_bases = decode_bitmap(r);
        for (uint64_t i = 0; i < params.pulse_count; ++i) {
            if (!got_detected[i]) continue;
            Basis rb = got_bases[i] ? Basis::diagonal : Basis::rectilinear;
            if (rb != a_bases[i]) continue;
            a_key.bits.push_back(symbols[i].bit);
            a_key.source_indices.push_back(i);
        }
    }

    // (3) initiator replies with the matched-basis detected indices; the
    // responder assembles its sifted key from them.
    SiftedKey b_key;
    {
        WireWriter w;
        w.u8(2);  // REC_SIFT_SET
        Bytes idx = encode_indices(a_key.source_indices);
        w.raw(idx.data(), idx.size());
        Bytes rec = conv.transfer(ends.initiator, w.take(), xfer);

        WireReader r(rec);
        r.u8();
        for (uint64_t i : decode_indices(r)) {
            b_key.bits.push_back(detections[i].bit);
            b_key.source_indices.push_back(i);
        }
    }

    const std::size_t sifted_n = a_key.size();
    auto finish_insufficient = [&](double qber) {
        return QkdOutcome{QkdOutcome::Status::aborted_insufficient, qber, 0, sifted_n};
    };

    // (4) QBER estimation over a disclosed random sample, then sample removal.
    std::size_t sample_n = static_cast<std::size_t>(
        std::floor(params.sample_fraction * static_cast<double>(sifted_n)));
    if (sifted_n > 0 && sample_n == 0) sample_n = 1;
    if (sifted_n == 0 || sample_n >= sifted_n) return finish_insufficient(0.0);

    std::vector<std::size_t> positions(sifted_n);
    for (std::size_t i = 0; i < sifted_n; ++i) positions[i] = i;
    for (std::size_t i = 0; i < sample_n; ++i) {  // partial Fisher-Yates
        std::size_t j = i + static_cast<std::size_t>(a_rng.next_below(sifted_n - i));
        std::swap(positions[i], positions[j]);
    }
    std::vector<std::size_t> sample(positions.begin(), positions.begin() + sample_n);
    std::sort(sample.begin(), sample.end());

    double qber = 0.0;
    {
        std::vector<uint64_t> sample_sources;
        BitVec a_sample_bits;
        for (std::size_t pos : sample) {
            sample_sources.push_back(a_key.source_indices[pos]);
            a_sample_bits.push_back(a_key.bits[pos]);
        }
        WireWriter w;
        w.u8(3);  // REC_SAMPLE_REQ
        Bytes idx = encode_indices(sample_sources);
        Bytes ab = encode_bitmap(a_sample_bits);
        w.raw(idx.data(), idx.size());
        w.raw(ab.data(), ab.size());
        Bytes req = conv.transfer(ends.initiator, w.take(), xfer);

        // Responder evaluates the disclosure against its own key.
        WireReader r(req);
        r.u8();
        std::vector<uint64_t> got_src = decode_indices(r);
        BitVec got_bits = decode_bitmap(r);
        std::vector<std::pair<uint64_t, uint8_t>> disclosed;
        BitVec b_sample_bits;
        for (std::size_t k = 0; k < got_src.size(); ++k)
            disclosed.emplace_back(got_src[k], got_bits[k]);
        double qber_b = estimate_qber(b_key, disclosed);
        for (uint64_t src : got_src) {
            auto it = std::lower_bound(b_key.source_indices.begin(), b_key.source_indices.end(),
                                       src);
            b_sample_bits.push_back(b_key.bits[static_cast<std::size_t>(
                it - b_key.source_indices.begin())]);
        }
        WireWriter resp;
        resp.u8(4);  // REC_SAMPLE_RESP
        Bytes bb = encode_bitmap(b_sample_bits);
        resp.raw(bb.data(), bb.size());
        Bytes resp_bytes = conv.transfer(ends.responder, resp.take(), xfer);

        // Initiator computes the same estimate from the response.
        WireReader rr(resp_bytes);
        rr.u8();
        BitVec peer_bits = decode_bitmap(rr);
        std::vector<std::pair<uint64_t, uint8_t>> disclosed_a;
        for (std::size_t k = 0; k < sample_sources.size(); ++k)
            disclosed_a.emplace_back(sample_sources[k], peer_bits[k]);
        double qber_a = estimate_qber(a_key, disclosed_a);
        require(qber_a == qber_b, Errc::invalid_input, "sample estimates diverged");
        qber = qber_a;
    }

    auto drop_positions = [](SiftedKey& key, const std::vector<std::size_t>& sorted_pos) {
        SiftedKey out;
        std::size_t next = 0;
        for (std::size_t i = 0; i < key.size(); ++i) {
            if (next < sorted_pos.size() && sorted_pos[next] == i) {
                ++next;
                continue;
            }
            out.bits.push_back(key.bits[i]);
            out.source_indices.push_back(key.source_indices[i]);
        }
        key = std::move(out);
    };
    drop_positions(a_key, sample);
    drop_positions(b_key, sample);

    if (qber > params.qber_abort_threshold)
        return QkdOutcome{QkdOutcome::Status::aborted_qber, qber, 0, sifted_n};
    if (a_key.size() == 0) return finish_insufficient(qber);

    // (5) block-parity reconciliation: initiator discloses parities, the
    // responder answers with the disagreeing block list, both discard.
    BitVec a_bits = a_key.bits, b_bits = b_key.bits;
    {
        BitVec pa = block_parities(a_bits, params.reconciliation_block_size);
        WireWriter w;
        w.u8(6);  // REC_PARITIES
        w.u32(params.reconciliation_block_size);
        Bytes pm = encode_bitmap(pa);
        w.raw(pm.data(), pm.size());
        Bytes rec = conv.transfer(ends.initiator, w.take(), xfer);

        WireReader r(rec);
        r.u8();
        uint32_t bs = r.u32();
        BitVec got_pa = decode_bitmap(r);
        BitVec pb = block_parities(b_bits, bs);
        std::vector<uint64_t> diff;
        for (std::size_t i = 0; i < pb.size(); ++i)
            if (got_pa[i] != pb[i]) diff.push_back(i);
        WireWriter wd;
        wd.u8(7);  // REC_PARITY_DIFF
        Bytes di = encode_indices(diff);
        wd.raw(di.data(), di.size());
        Bytes diff_bytes = conv.transfer(ends.responder, wd.take(), xfer);

        WireReader rd(diff_bytes);
        rd.u8();
        std::vector<uint64_t> diff_a = decode_indices(rd);

        auto drop_blocks = [&](BitVec& bits, const std::vector<uint64_t>& blocks) {
            BitVec out;
            std::size_t next = 0;
            std::size_t n_blocks = (bits.size() + bs - 1) / bs;
            for (std::size_t blk = 0; blk < n_blocks; ++blk) {
                if (next < blocks.size() && blocks[next] == blk) {
                    ++next;
                    continue;
                }
                std::size_t start = blk * bs;
                std::size_t end = std::min(bits.size(), start + bs);
                out.insert(out.end(), bits.begin() + start, bits.begin() + end);
            }
            bits = std::move(out);
        };
        drop_blocks(a_bits, diff_a);
        drop_blocks(b_bits, diff);
    }

    // (6) whole-key verification hash; any surviving residue fails the session.
    {
        WireWriter w;
        w.u8(8);  // REC_KEY_HASH
        w.u64(key_verify_hash(a_bits));
        Bytes rec = conv.transfer(ends.initiator, w.take(), xfer);
        WireReader r(rec);
        r.u8();
        uint64_t a_hash = r.u64();
        uint8_t ok = key_verify_hash(b_bits) == a_hash ? 1 : 0;
        WireWriter resp;
        resp.u8(9);  // REC_HASH_OK
        resp.u8(ok);
        Bytes rb = conv.transfer(ends.responder, resp.take(), xfer);
        WireReader rr(rb);
        rr.u8();
        if (rr.u8() == 0)
            fail(Errc::reconciliation_failed,
                 "residual errors survived block parity; session discarded");
    }

    // (7) privacy amplification under a cleartext-shared Toeplitz seed.
    uint64_t out_bits = distilled_bit_count(a_bits.size(), qber, params.privacy_safety_margin_bits);
    uint64_t pa_seed = a_rng.next_u64();
    {
        WireWriter w;
        w.u8(10);  // REC_PA_SEED
        w.u64(pa_seed);
        w.u64(out_bits);
        conv.transfer(ends.initiator, w.take(), xfer);
    }
    Bytes a_out = toeplitz_compress(a_bits, out_bits, pa_seed);
    Bytes b_out = toeplitz_compress(b_bits, out_bits, pa_seed);
    if (a_out.size() < 8) return finish_insufficient(qber);

    pool_a.append(a_out);
    pool_b.append(b_out);
    return QkdOutcome{QkdOutcome::Status::ok, qber, static_cast<uint64_t>(a_out.size()) * 8,
                      sifted_n};
}

}  // namespace quonet
