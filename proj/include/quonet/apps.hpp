#pragma once

// Applications of the synchronized random number: splitting the unit
// hypercube into equal parts keyed by one shared fraction, parallel Monte
// Carlo estimation over the parts, and parallel Las Vegas search over a
// shared pseudorandom permutation. Everything here is a pure function of the
// shared number, so cooperating processes need no further coordination.

#include <cmath>
#include <cstdint>
#include <functional>
#include <future>
#include <optional>
#include <string>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace quonet {

struct SharedRandom {
    uint64_t value = 0;
    unsigned k_bits = 64;

    void validate() const {
        require(k_bits >= 1 && k_bits <= 64, Errc::invalid_input, "k_bits must be in [1,64]");
        if (k_bits < 64)
            require(value < (1ull << k_bits), Errc::invalid_input, "value has more than k_bits");
    }
};

// value / 2^K, exact up to double precision.
inline double to_fraction(const SharedRandom& r) {
    r.validate();
    return std::ldexp(static_cast<double>(r.value), -static_cast<int>(r.k_bits));
}

struct UnitPoint {
    std::vector<double> coordinates;

    void validate() const {
        require(!coordinates.empty(), Errc::invalid_input, "point needs at least one coordinate");
        for (double c : coordinates)
            require(c >= 0.0 && c < 1.0, Errc::invalid_input, "coordinate out of [0,1)");
    }
};

// An arc [start, start+length) on the circle [0,1) with wraparound.
struct Arc {
    double start = 0.0;
    double length = 1.0;

    // Closed-closure containment; partition membership resolves boundary
    // points by first match in region index order, so ties land in the
    // lower-indexed region.
    bool contains_closed(double x) const {
        double d = x - start;
        d -= std::floor(d);
        return d <= length;
    }
};

enum class SpaceMap : uint8_t {
    circle_1d,       // the 1-D circular space itself
    unfolded_cells,  // row-major cell unfolding of the d-cube onto the circle
    axis_split,      // arc applied to the first coordinate of the 2-cube
};

struct Region {
    Arc arc;
    SpaceMap map = SpaceMap::circle_1d;
    uint32_t dim = 1;
    // unfolded_cells only: cyclic cell range
    uint64_t resolution = 0;
    uint64_t cell_begin = 0;
    uint64_t cell_count = 0;
    uint64_t cells_total = 0;

    double measure() const {
        if (map == SpaceMap::unfolded_cells)
            return static_cast<double>(cell_count) / static_cast<double>(cells_total);
        return arc.length;
    }
};

struct Partition {
    std::vector<Region> regions;
    uint32_t parts = 0;
};

namespace apps_detail {

inline double wrap_unit(double x) {
    double f = x - std::floor(x);
    return f >= 1.0 ? 0.0 : f;
}

// Row-major cell index of a point at the given per-axis resolution.
inline uint64_t cell_of(const UnitPoint& p, uint64_t resolution) {
    uint64_t idx = 0;
    for (double c : p.coordinates) {
        uint64_t axis = static_cast<uint64_t>(c * static_cast<double>(resolution));
        if (axis >= resolution) axis = resolution - 1;
        idx = idx * resolution + axis;
    }
    return idx;
}

// Number of cell centers (k + 0.5)/C strictly below x, for x in [0,1).
inline uint64_t centers_below(double x, uint64_t cells) {
    double v = x * static_cast<double>(cells) - 0.5;
    if (v <= 0.0) return 0;
    uint64_t n = static_cast<uint64_t>(std::ceil(v));
    // A center exactly on the boundary belongs to the upper region.
    if (std::ceil(v) == v) n = static_cast<uint64_t>(v);
    return std::min(n, cells);
}

}  // namespace apps_detail

// Splits the 1-D circular space into p equal arcs anchored at r: region i is
// [r + i/p, r + (i+1)/p) mod 1.
inline Partition split_circular(double r, uint32_t parts) {
    require(parts >= 2, Errc::invalid_input, "parts must be >= 2");
    require(r >= 0.0 && r < 1.0, Errc::invalid_input, "r out of [0,1)");
    Partition out;
    out.parts = parts;
    for (uint32_t i = 0; i < parts; ++i) {
        Region reg;
        reg.map = SpaceMap::circle_1d;
        reg.dim = 1;
        reg.arc.start = apps_detail::wrap_unit(r + static_cast<double>(i) / parts);
        reg.arc.length = 1.0 / parts;
        out.regions.push_back(reg);
    }
    return out;
}

// Splits the d-cube via its row-major cell unfolding onto the circle. Arc
// boundaries snap to cell centers, so each region is a cyclic run of whole
// cells; measures deviate from 1/p by at most 1/resolution^d.
inline Partition split_unfolded(double r, uint32_t parts, uint32_t dim, uint32_t resolution) {
    require(parts >= 2, Errc::invalid_input, "parts must be >= 2");
    require(r >= 0.0 && r < 1.0, Errc::invalid_input, "r out of [0,1)");
    require(dim >= 1, Errc::invalid_input, "dim must be >= 1");
    require(resolution >= 1, Errc::invalid_input, "resolution must be >= 1");
    uint64_t cells = 1;
    for (uint32_t i = 0; i < dim; ++i) {
        require(cells <= (1ull << 62) / resolution, Errc::invalid_input,
                "resolution^dim too large");
        cells *= resolution;
    }
    require(cells >= parts, Errc::invalid_input, "fewer cells than parts");

    Partition out;
    out.parts = parts;
    std::vector<uint64_t> snap(parts + 1);
    for (uint32_t i = 0; i <= parts; ++i) {
        double b = apps_detail::wrap_unit(r + static_cast<double>(i) / parts);
        snap[i] = apps_detail::centers_below(b, cells);
    }
    for (uint32_t i = 0; i < parts; ++i) {
        Region reg;
        reg.map = SpaceMap::unfolded_cells;
        reg.dim = dim;
        reg.resolution = resolution;
        reg.cells_total = cells;
        reg.cell_begin = snap[i];
        reg.cell_count = (snap[i + 1] + cells - snap[i]) % cells;
        reg.arc.start = static_cast<double>(reg.cell_begin) / static_cast<double>(cells);
        reg.arc.length = reg.measure();
        out.regions.push_back(reg);
    }
    return out;
}

// Splits the 2-cube circularly on the first coordinate: part 0 is
// x0 in [r, r+1/2) mod 1, part 1 the complement. Both measures are exactly
// one half.
inline Partition split_axis_2d(double r) {
    require(r >= 0.0 && r < 1.0, Errc::invalid_input, "r out of [0,1)");
    Partition out;
    out.parts = 2;
    for (uint32_t i = 0; i < 2; ++i) {
        Region reg;
        reg.map = SpaceMap::axis_split;
        reg.dim = 2;
        reg.arc.start = apps_detail::wrap_unit(r + 0.5 * i);
        reg.arc.length = 0.5;
        out.regions.push_back(reg);
    }
    return out;
}

inline bool membership(const UnitPoint& p, const Region& reg) {
    p.validate();
    require(p.coordinates.size() == reg.dim, Errc::invalid_input,
            "point dimension does not match region space");
    switch (reg.map) {
        case SpaceMap::circle_1d:
            return reg.arc.contains_closed(p.coordinates[0]);
        case SpaceMap::axis_split:
            return reg.arc.contains_closed(p.coordinates[0]);
        case SpaceMap::unfolded_cells: {
            uint64_t cell = apps_detail::cell_of(p, reg.resolution);
            uint64_t off = (cell + reg.cells_total - reg.cell_begin) % reg.cells_total;
            return off < reg.cell_count;
        }
    }
    return false;
}

// Index of the region containing the point; boundary ties resolve to the
// lower index because regions are tested in order with closed arcs.
inline uint32_t region_of(const UnitPoint& p, const Partition& part) {
    for (uint32_t i = 0; i < part.regions.size(); ++i)
        if (membership(p, part.regions[i])) return i;
    // Closed-arc cover of the circle cannot miss; reachable only through
    // floating-point edge rounding at the wrap point.
    return static_cast<uint32_t>(part.regions.size() - 1);
}

// Uniform sample inside one region.
inline UnitPoint sample_region(const Region& reg, Xoshiro256ss& rng) {
    UnitPoint p;
    switch (reg.map) {
        case SpaceMap::circle_1d:
            p.coordinates = {apps_detail::wrap_unit(reg.arc.start + rng.next_unit() * reg.arc.length)};
            break;
        case SpaceMap::axis_split:
            p.coordinates = {
                apps_detail::wrap_unit(reg.arc.start + rng.next_unit() * reg.arc.length),
                rng.next_unit()};
            break;
        case SpaceMap::unfolded_cells: {
            require(reg.cell_count >= 1, Errc::invalid_input,
                    "cannot sample an empty (fully quantized away) region");
            uint64_t cell =
                (reg.cell_begin + rng.next_below(reg.cell_count)) % reg.cells_total;
            std::vector<uint64_t> axes(reg.dim);
            for (uint32_t d = reg.dim; d-- > 0;) {
                axes[d] = cell % reg.resolution;
                cell /= reg.resolution;
            }
            p.coordinates.resize(reg.dim);
            for (uint32_t d = 0; d < reg.dim; ++d)
                p.coordinates[d] = (static_cast<double>(axes[d]) + rng.next_unit()) /
                                   static_cast<double>(reg.resolution);
            break;
        }
    }
    return p;
}

// ---------------------------------------------------------------------------
// Parallel Monte Carlo over a partition: one worker per region samples
// uniformly within its region; the aggregator combines conditional means
// with equal weights 1/p and pools the standard error.

using Estimand = std::function<double(const UnitPoint&)>;

struct RegionEstimate {
    double mean = 0.0;
    double variance = 0.0;  // sample variance of f within the region
    uint64_t samples = 0;
};

struct McEstimate {
    double value = 0.0;
    double std_error = 0.0;
    std::vector<RegionEstimate> regions;
};

inline RegionEstimate estimate_region(const Estimand& f, const Region& reg,
                                      uint64_t samples, uint64_t seed) {
    Xoshiro256ss rng(seed);
    double sum = 0.0, sumsq = 0.0;
    for (uint64_t i = 0; i < samples; ++i) {
        double v = f(sample_region(reg, rng));
        sum += v;
        sumsq += v * v;
    }
    RegionEstimate out;
    out.samples = samples;
    out.mean = sum / static_cast<double>(samples);
    if (samples > 1)
        out.variance = std::max(0.0, (sumsq - sum * sum / static_cast<double>(samples)) /
                                         static_cast<double>(samples - 1));
    return out;
}

inline McEstimate parallel_monte_carlo(const Estimand& f, const Partition& part,
                                       uint64_t samples_per_node,
                                       const std::vector<uint64_t>& node_seeds) {
    require(part.parts >= 1 && part.regions.size() == part.parts, Errc::invalid_input,
            "invalid partition");
    require(samples_per_node >= 1, Errc::invalid_input, "samples_per_node must be >= 1");
    require(node_seeds.size() == part.regions.size(), Errc::invalid_input,
            "one seed per region is required");

    std::vector<std::future<RegionEstimate>> workers;
    workers.reserve(part.regions.size());
    for (std::size_t i = 0; i < part.regions.size(); ++i) {
        const Region& reg = part.regions[i];
        uint64_t seed = node_seeds[i];
        workers.push_back(std::async(std::launch::async, [&f, &reg, samples_per_node, seed] {
            return estimate_region(f, reg, samples_per_node, seed);
        }));
    }

    McEstimate out;
    std::vector<uint32_t> missing;
    for (std::size_t i = 0; i < workers.size(); ++i) {
        try {
            out.regions.push_back(workers[i].get());
        } catch (...) {
            missing.push_back(static_cast<uint32_t>(i));
            out.regions.push_back({});
        }
    }
    if (!missing.empty()) {
        std::string which;
        for (uint32_t m : missing) which += (which.empty() ? "" : ",") + std::to_string(m);
        fail(Errc::partial_aggregate, "missing region reports: " + which);
    }

    const double p = static_cast<double>(part.parts);
    double mean_sum = 0.0, var_sum = 0.0;
    for (const auto& r : out.regions) {
        mean_sum += r.mean;
        var_sum += r.variance / static_cast<double>(r.samples);
    }
    out.value = mean_sum / p;
    out.std_error = std::sqrt(var_sum) / p;
    return out;
}

// Built-in estimand catalog for the CLI: name -> (function, dimension).
struct CatalogEstimand {
    std::string name;
    uint32_t dim;
    double true_value;  // integral over the unit cube
    Estimand fn;
};

inline const std::vector<CatalogEstimand>& estimand_catalog() {
    static const std::vector<CatalogEstimand> catalog = {
        {"constant", 2, 1.0, [](const UnitPoint&) { return 1.0; }},
        {"quarter_circle", 2, 3.14159265358979323846 / 4.0,
         [](const UnitPoint& p) {
             double x = p.coordinates[0], y = p.coordinates[1];
             return x * x + y * y < 1.0 ? 1.0 : 0.0;
         }},
        {"product_of_sines", 2, 4.0 / (3.14159265358979323846 * 3.14159265358979323846),
         [](const UnitPoint& p) {
             double v = 1.0;
             for (double c : p.coordinates) v *= std::sin(3.14159265358979323846 * c);
             return v;
         }},
    };
    return catalog;
}

inline const CatalogEstimand& find_estimand(const std::string& name) {
    for (const auto& e : estimand_catalog())
        if (e.name == name) return e;
    fail(Errc::invalid_input, "unknown estimand '" + name + "'");
}

// ---------------------------------------------------------------------------
// Parallel Las Vegas search: the shared number seeds one pseudorandom
// permutation; node i probes positions congruent to i modulo the node count.
// Probe sets are disjoint and cover every index, so the search is always
// correct and only its cost varies.

struct SearchReport {
    uint64_t found_index = 0;
    uint32_t winning_node = 0;
    uint64_t probes_by_winner = 0;          // lockstep rounds until the hit
    std::vector<uint64_t> probes_per_node;  // probes spent until the search stopped
};

inline std::vector<uint64_t> search_permutation(const SharedRandom& shared, uint64_t count) {
    shared.validate();
    std::vector<uint64_t> perm(count);
    for (uint64_t i = 0; i < count; ++i) perm[i] = i;
    Xoshiro256ss rng(derive_seed(shared.value, 0x5eac * (shared.k_bits + 1)));
    for (uint64_t i = count; i > 1; --i) {
        uint64_t j = rng.next_below(i);
        std::swap(perm[i - 1], perm[j]);
    }
    return perm;
}

inline std::vector<uint64_t> node_probe_sequence(const SharedRandom& shared, uint64_t count,
                                                 uint32_t nodes, uint32_t node) {
    auto perm = search_permutation(shared, count);
    std::vector<uint64_t> seq;
    for (uint64_t pos = node; pos < count; pos += nodes) seq.push_back(perm[pos]);
    return seq;
}

inline SearchReport parallel_las_vegas_search(uint64_t item_count,
                                              const std::function<bool(uint64_t)>& target,
                                              const SharedRandom& shared, uint32_t nodes) {
    require(item_count >= 1, Errc::invalid_input, "item_count must be >= 1");
    require(nodes >= 1, Errc::invalid_input, "nodes must be >= 1");
    auto perm = search_permutation(shared, item_count);

    // Workers scan their residue classes independently and report the first
    // hit round; the aggregator stops everyone at the earliest hit.
    std::vector<std::future<std::optional<std::pair<uint64_t, uint64_t>>>> workers;
    for (uint32_t node = 0; node < nodes; ++node) {
        workers.push_back(std::async(std::launch::async, [&, node] {
            std::optional<std::pair<uint64_t, uint64_t>> hit;  // (round, index)
            uint64_t round = 0;
            for (uint64_t pos = node; pos < item_count; pos += nodes, ++round) {
                if (target(perm[pos])) {
                    hit = {round, perm[pos]};
                    break;
                }
            }
            return hit;
        }));
    }

    std::optional<std::pair<uint64_t, uint32_t>> best;  // (round, node)
    std::vector<std::optional<std::pair<uint64_t, uint64_t>>> hits;
    for (uint32_t node = 0; node < nodes; ++node) {
        hits.push_back(workers[node].get());
        if (hits.back()) {
            auto [round, idx] = *hits.back();
            if (!best || round < best->first) best = {{round, node}};
        }
    }
    if (!best) fail(Errc::not_found, "no item satisfies the predicate");

    SearchReport rep;
    rep.winning_node = best->second;
    rep.probes_by_winner = best->first + 1;
    rep.found_index = hits[best->second]->second;
    for (uint32_t node = 0; node < nodes; ++node) {
        // Under lockstep probing every node stops after the winning round
        // (or earlier, when its class is exhausted or it hit first).
        uint64_t class_size = node < item_count % nodes ? item_count / nodes + 1
                                                        : item_count / nodes;
        uint64_t probes = std::min<uint64_t>(rep.probes_by_winner, class_size);
        if (hits[node] && hits[node]->first + 1 < probes) probes = hits[node]->first + 1;
        rep.probes_per_node.push_back(probes);
    }
    return rep;
}

}  // namespace quonet
