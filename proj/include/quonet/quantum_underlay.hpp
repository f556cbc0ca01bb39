#pragma once

// Pulse-level model of the qubit-carrying link: per-pulse loss, an optional
// intercept-resend adversary, and depolarizing flips on matched-basis
// measurement. Mismatched-basis measurements yield uniform bits, which is the
// only quantum behavior the key-distribution layer above needs.

#include <cstdint>
#include <span>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace quonet {

enum class Basis : uint8_t { rectilinear = 0, diagonal = 1 };

struct QubitSymbol {
    Basis basis = Basis::rectilinear;
    uint8_t bit = 0;  // 0 or 1
};

enum class Eavesdropper : uint8_t { none = 0, intercept_resend = 1 };

struct QuantumLinkParams {
    double loss_probability = 0.1;
    double flip_probability = 0.01;
    Eavesdropper eavesdropper = Eavesdropper::none;
    uint64_t seed = 0;

    void validate() const {
        require(loss_probability >= 0.0 && loss_probability <= 1.0, Errc::invalid_input,
                "loss_probability out of [0,1]");
        require(flip_probability >= 0.0 && flip_probability <= 1.0, Errc::invalid_input,
                "flip_probability out of [0,1]");
    }
};

struct DetectionRecord {
    uint64_t pulse_index = 0;
    bool lost = false;
    uint8_t bit = 0;  // meaningful only when !lost

    bool measured() const { return !lost; }
};

// One seeded stream drives the whole transmission. Draw order per pulse is
// fixed: loss; adversary basis; adversary bit (mismatched basis only);
// receiver flip (matched basis) or receiver uniform bit (mismatched basis).
// Replays with the same arguments are byte-identical.
inline std::vector<DetectionRecord> transmit_pulses(std::span<const QubitSymbol> symbols,
                                                    std::span<const Basis> receiver_bases,
                                                    const QuantumLinkParams& params) {
    require(symbols.size() == receiver_bases.size(), Errc::invalid_input,
            "symbols and receiver_bases length mismatch");
    params.validate();

    Xoshiro256ss rng(params.seed);
    std::vector<DetectionRecord> out;
    out.reserve(symbols.size());

    for (std::size_t i = 0; i < symbols.size(); ++i) {
        DetectionRecord rec;
        rec.pulse_index = i;

        if (rng.bernoulli(params.loss_probability)) {
            rec.lost = true;
            out.push_back(rec);
            continue;
        }

        Basis pulse_basis = symbols[i].basis;
        uint8_t pulse_bit = symbols[i].bit;

        if (params.eavesdropper == Eavesdropper::intercept_resend) {
            Basis adv_basis = rng.next_bit() ? Basis::diagonal : Basis::rectilinear;
            if (adv_basis != pulse_basis) {
                // Wrong-basis measurement collapses to a uniform outcome and
                // the pulse is re-prepared in the adversary's basis.
                pulse_bit = static_cast<uint8_t>(rng.next_bit());
                pulse_basis = adv_basis;
            }
        }

        if (receiver_bases[i] == pulse_basis) {
            uint8_t bit = pulse_bit;
            if (rng.bernoulli(params.flip_probability)) bit ^= 1;
            rec.bit = bit;
        } else {
            rec.bit = static_cast<uint8_t>(rng.next_bit());
        }
        out.push_back(rec);
    }
    return out;
}

}  // namespace quonet
