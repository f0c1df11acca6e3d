#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "b2r/cmdp.hpp"
#include "b2r/rng.hpp"
#include "b2r/util.hpp"

namespace b2r {

// ---------------------------------------------------------------------------
// Annotated trajectories: RTG/CTG suffix sums over a base trajectory
// ---------------------------------------------------------------------------

// total_cost stays the ORIGINAL C(tau) even after realignment rewrites ctg;
// filtering keys on C(tau), conditioning keys on ctg.
struct AnnotatedTrajectory {
    Trajectory traj;
    std::vector<double> rtg;
    std::vector<double> ctg;
    double total_return = 0.0;
    double total_cost = 0.0;
    std::optional<double> kappa_tag; // set by multi-target preparation

    std::size_t horizon() const { return traj.horizon(); }

    void validate() const {
        const std::size_t h = traj.horizon();
        require(rtg.size() == h && ctg.size() == h,
                "AnnotatedTrajectory: rtg/ctg length (", rtg.size(), ", ", ctg.size(),
                ") != horizon ", h);
        for (std::size_t t = 0; t + 1 < h; ++t) {
            require(ctg[t] >= ctg[t + 1],
                    "AnnotatedTrajectory: ctg increases at step ", t, " (", ctg[t], " -> ", ctg[t + 1], ")");
        }
    }
};

inline AnnotatedTrajectory annotate(const Trajectory& traj) {
    const std::size_t h = traj.horizon();
    AnnotatedTrajectory at{traj, std::vector<double>(h), std::vector<double>(h), 0.0, 0.0, std::nullopt};
    double r = 0.0;
    double c = 0.0;
    for (std::size_t i = h; i-- > 0;) {
        r += traj.transitions()[i].reward;
        c += traj.transitions()[i].cost;
        at.rtg[i] = r;
        at.ctg[i] = c;
    }
    at.total_return = at.rtg[0];
    at.total_cost = at.ctg[0];
    return at;
}

// Per-step costs implied by a CTG sequence: first differences plus the final
// entry. Equals the original costs before realignment; after realignment it
// is the supervision-space cost sequence the theory audits.
inline std::vector<double> implied_costs(const std::vector<double>& ctg) {
    require(!ctg.empty(), "implied_costs: empty ctg");
    std::vector<double> c(ctg.size());
    for (std::size_t t = 0; t + 1 < ctg.size(); ++t) {
        c[t] = ctg[t] - ctg[t + 1];
    }
    c.back() = ctg.back();
    return c;
}

// ---------------------------------------------------------------------------
// Safety filtering: D_safe = { tau : C(tau) <= kappa }
// ---------------------------------------------------------------------------

struct FilterResult {
    std::vector<AnnotatedTrajectory> kept;
    std::size_t total = 0;
    std::size_t dropped = 0;
    bool empty_warning = false; // nothing survived; not an error
};

inline FilterResult filter_safe(const std::vector<AnnotatedTrajectory>& dataset, CostBudget kappa) {
    FilterResult out;
    out.total = dataset.size();
    for (const AnnotatedTrajectory& at : dataset) {
        if (at.total_cost <= kappa.kappa) { // inclusive
            out.kept.push_back(at);
        }
    }
    out.dropped = out.total - out.kept.size();
    out.empty_warning = out.kept.empty();
    return out;
}

// ---------------------------------------------------------------------------
// CTG realignment
// ---------------------------------------------------------------------------

enum class RealignStrategy { shift, avg, rand, scale };

enum class RandMode { discrete, continuous };

inline std::string to_string(RealignStrategy s) {
    switch (s) {
        case RealignStrategy::shift: return "shift";
        case RealignStrategy::avg: return "avg";
        case RealignStrategy::rand: return "rand";
        case RealignStrategy::scale: return "scale";
    }
    return "?";
}

inline RealignStrategy realign_strategy_from_string(const std::string& s) {
    if (s == "shift") return RealignStrategy::shift;
    if (s == "avg") return RealignStrategy::avg;
    if (s == "rand") return RealignStrategy::rand;
    if (s == "scale") return RealignStrategy::scale;
    fail("unknown realignment strategy '", s, "' (expected shift|avg|rand|scale)");
}

struct RealignmentSpec {
    RealignStrategy strategy = RealignStrategy::shift;
    CostBudget kappa;
    RandMode rand_mode = RandMode::discrete; // Rand only
    std::uint64_t rng_seed = 0;              // Rand only

    explicit RealignmentSpec(RealignStrategy s, CostBudget k) : strategy(s), kappa(k) {}

    double offset(double total_cost) const { return kappa.kappa - total_cost; }
    double scale(double total_cost) const {
        require(total_cost > 0.0, "Scale realignment inapplicable: C(tau) = ", total_cost,
                " (division by zero)");
        return kappa.kappa / total_cost;
    }
};

struct RealignStats {
    std::size_t rand_residual_to_last = 0;    // leftover smaller than one increment
    std::size_t rand_insufficient_eligible = 0;
};

namespace detail {

inline std::vector<double> suffix_sums(const std::vector<double>& xs) {
    std::vector<double> out(xs.size());
    double acc = 0.0;
    for (std::size_t i = xs.size(); i-- > 0;) {
        acc += xs[i];
        out[i] = acc;
    }
    return out;
}

// Rand reallocation over per-step costs. Eligible steps are sampled uniformly
// without replacement; leftover budget below one increment lands on the last
// step, as does any budget left when eligible steps run out.
inline std::vector<double> rand_reallocate(const std::vector<double>& costs, double delta,
                                           double kappa, RandMode mode, Rng rng,
                                           RealignStats* stats) {
    std::vector<double> c = costs;
    const std::size_t h = c.size();
    double remaining = delta;
    const double tol = 1e-12;

    std::vector<std::size_t> eligible;
    const double per_step = kappa / static_cast<double>(h);
    for (std::size_t t = 0; t < h; ++t) {
        const bool ok = (mode == RandMode::discrete) ? (c[t] == 0.0) : (c[t] < per_step);
        if (ok) {
            eligible.push_back(t);
        }
    }
    rng.shuffle(eligible);

    for (std::size_t t : eligible) {
        if (remaining <= tol) {
            break;
        }
        const double inc = (mode == RandMode::discrete) ? 1.0 : (per_step - c[t]);
        if (inc > remaining + tol) {
            continue; // full increment no longer fits; residual goes to the last step
        }
        c[t] += inc;
        remaining -= inc;
    }

    if (remaining > tol) {
        c.back() += remaining;
        if (stats != nullptr) {
            // A leftover of a full increment or more means we ran out of
            // eligible steps; anything smaller is the normal sub-increment
            // residual.
            if (mode == RandMode::discrete && remaining >= 1.0 - tol) {
                ++stats->rand_insufficient_eligible;
            } else {
                ++stats->rand_residual_to_last;
            }
        }
    }
    return c;
}

} // namespace detail

// Rewrites the CTG sequence of one admitted trajectory so ctg'[0] = kappa.
// States, actions, rewards, and rtg are carried over untouched.
inline AnnotatedTrajectory realign(const AnnotatedTrajectory& at, const RealignmentSpec& spec,
                                   RealignStats* stats = nullptr) {
    const double kappa = spec.kappa.kappa;
    const double delta = spec.offset(at.total_cost);
    require(delta >= -1e-9, "realign: C(tau) = ", at.total_cost, " exceeds kappa = ", kappa,
            " (filtering must run first)");

    AnnotatedTrajectory out = at;
    const std::size_t h = at.horizon();

    switch (spec.strategy) {
        case RealignStrategy::shift: {
            for (std::size_t t = 0; t < h; ++t) {
                out.ctg[t] = at.ctg[t] + delta;
            }
            break;
        }
        case RealignStrategy::avg: {
            std::vector<double> c(h);
            for (std::size_t t = 0; t < h; ++t) {
                c[t] = at.traj.transitions()[t].cost + delta / static_cast<double>(h);
            }
            out.ctg = detail::suffix_sums(c);
            break;
        }
        case RealignStrategy::rand: {
            std::vector<double> c(h);
            for (std::size_t t = 0; t < h; ++t) {
                c[t] = at.traj.transitions()[t].cost;
            }
            c = detail::rand_reallocate(c, delta, kappa, spec.rand_mode, Rng(spec.rng_seed), stats);
            out.ctg = detail::suffix_sums(c);
            break;
        }
        case RealignStrategy::scale: {
            const double alpha = spec.scale(at.total_cost);
            for (std::size_t t = 0; t < h; ++t) {
                out.ctg[t] = alpha * at.ctg[t];
            }
            break;
        }
    }

    require(std::abs(out.ctg[0] - kappa) <= 1e-9, "realign(", to_string(spec.strategy),
            "): ctg'[0] = ", out.ctg[0], " misses kappa = ", kappa);
    return out;
}

// Whole-dataset realignment with stable output order; per-trajectory Rand
// streams are derived from (spec.rng_seed, index) so any parallel schedule
// matches the sequential result.
inline std::vector<AnnotatedTrajectory> realign_dataset(const std::vector<AnnotatedTrajectory>& dataset,
                                                        const RealignmentSpec& spec,
                                                        RealignStats* stats = nullptr) {
    std::vector<AnnotatedTrajectory> out;
    out.reserve(dataset.size());
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        RealignmentSpec per = spec;
        per.rng_seed = Rng::derive(spec.rng_seed, i).next_u64();
        out.push_back(realign(dataset[i], per, stats));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Multi-target preparation: filter + realign per kappa, tag, concatenate
// ---------------------------------------------------------------------------

struct MultiTargetResult {
    std::vector<AnnotatedTrajectory> dataset;
    std::vector<double> skipped_kappas; // produced an empty filtered set
};

inline MultiTargetResult prepare_multi_target(const std::vector<AnnotatedTrajectory>& dataset,
                                              const std::vector<double>& kappas,
                                              RealignStrategy strategy,
                                              RandMode rand_mode = RandMode::discrete,
                                              std::uint64_t rng_seed = 0,
                                              RealignStats* stats = nullptr) {
    require(!kappas.empty(), "prepare_multi_target: empty kappa list");
    MultiTargetResult out;
    for (std::size_t k = 0; k < kappas.size(); ++k) {
        CostBudget budget(kappas[k]);
        FilterResult filtered = filter_safe(dataset, budget);
        if (filtered.kept.empty()) {
            out.skipped_kappas.push_back(kappas[k]);
            continue;
        }
        RealignmentSpec spec(strategy, budget);
        spec.rand_mode = rand_mode;
        spec.rng_seed = Rng::derive(rng_seed, k).next_u64();
        std::vector<AnnotatedTrajectory> realigned = realign_dataset(filtered.kept, spec, stats);
        for (AnnotatedTrajectory& at : realigned) {
            at.kappa_tag = kappas[k];
            out.dataset.push_back(std::move(at));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Subsampling (data-scarcity protocol)
// ---------------------------------------------------------------------------

inline std::vector<AnnotatedTrajectory> subsample(const std::vector<AnnotatedTrajectory>& dataset,
                                                  double fraction, std::uint64_t seed) {
    require(fraction > 0.0 && fraction <= 1.0, "subsample: fraction ", fraction,
            " outside (0, 1]");
    if (fraction == 1.0) {
        return dataset;
    }
    const auto n = dataset.size();
    const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
    Rng rng(seed);
    std::vector<AnnotatedTrajectory> out;
    out.reserve(k);
    for (std::size_t idx : rng.sample_indices(n, std::min(k, n))) {
        out.push_back(dataset[idx]);
    }
    return out;
}

} // namespace b2r
