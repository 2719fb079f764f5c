#pragma once

// Post-hoc analysis: how much Q and A move between consecutive policies, and
// score summaries with the one-standard-error comparison rule.

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dae/mdp.hpp"
#include "dae/mdp_io.hpp"

namespace dae {

/// Quantile by linear interpolation between order statistics (q in [0, 1]).
inline double quantile(std::vector<double> xs, double q) {
    if (xs.empty()) throw std::invalid_argument("quantile: empty sample");
    if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("quantile: q must lie in [0, 1]");
    std::sort(xs.begin(), xs.end());
    const double pos = q * static_cast<double>(xs.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, xs.size() - 1);
    return xs[lo] + (pos - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
}

using StateAction = std::pair<std::size_t, std::size_t>;

/// Every (state, action) pair of the non-terminal states.
inline std::vector<StateAction> non_terminal_pairs(const FiniteMdp& mdp) {
    std::vector<StateAction> out;
    for (std::size_t s = 0; s < mdp.n_states(); ++s)
        if (!mdp.is_terminal(s))
            for (std::size_t a = 0; a < mdp.n_actions(); ++a) out.emplace_back(s, a);
    return out;
}

struct VariationRow {
    std::size_t update_index = 0;  // change from snapshot i-1 to snapshot i
    double dq_median = 0.0, dq_q1 = 0.0, dq_q3 = 0.0;
    double da_median = 0.0, da_q1 = 0.0, da_q3 = 0.0;
};

struct VariationReport {
    std::vector<VariationRow> rows;

    bool advantage_more_stable() const {
        return std::all_of(rows.begin(), rows.end(), [](const auto& r) { return r.da_median <= r.dq_median; });
    }
};

/// |f^{pi_i} - f^{pi_{i-1}}| for f in {Q, A} on the probe pairs, by exact
/// policy evaluation, summarised per update as median and quartiles.
inline VariationReport variation_study(const FiniteMdp& mdp, const std::vector<TabularPolicy>& snapshots,
                                       const std::vector<StateAction>& probes) {
    if (snapshots.size() < 2) throw std::invalid_argument("variation_study: need at least 2 policy snapshots");
    if (probes.empty()) throw std::invalid_argument("variation_study: empty probe set");
    for (const auto& [s, a] : probes)
        if (s >= mdp.n_states() || a >= mdp.n_actions())
            throw std::invalid_argument("variation_study: probe pair out of range");
    std::vector<DpSolution> sols;
    sols.reserve(snapshots.size());
    for (const auto& pi : snapshots) sols.push_back(solve_policy(mdp, pi));
    VariationReport report;
    for (std::size_t i = 1; i < sols.size(); ++i) {
        std::vector<double> dq, da;
        for (const auto& [s, a] : probes) {
            dq.push_back(std::abs(sols[i].q(s, a) - sols[i - 1].q(s, a)));
            da.push_back(std::abs(sols[i].adv(s, a) - sols[i - 1].adv(s, a)));
        }
        report.rows.push_back({i, quantile(dq, 0.5), quantile(dq, 0.25), quantile(dq, 0.75), quantile(da, 0.5),
                               quantile(da, 0.25), quantile(da, 0.75)});
    }
    return report;
}

inline void write_variation_csv(std::ostream& os, const VariationReport& report) {
    os << "update_index,dq_median,dq_q1,dq_q3,da_median,da_q1,da_q3\n";
    for (const auto& r : report.rows)
        os << r.update_index << ',' << format_double(r.dq_median) << ',' << format_double(r.dq_q1) << ','
           << format_double(r.dq_q3) << ',' << format_double(r.da_median) << ',' << format_double(r.da_q1) << ','
           << format_double(r.da_q3) << '\n';
}

struct ScoreSummary {
    double overall = 0.0;  // mean over all episodes
    double last = 0.0;     // mean over the final min(100, n) episodes
};

inline ScoreSummary summarize_scores(const std::vector<double>& returns, std::size_t last_window = 100) {
    if (returns.empty()) throw std::invalid_argument("summarize_scores: no episodes");
    double total = 0.0;
    for (double g : returns) total += g;
    const std::size_t k = std::min(last_window, returns.size());
    double tail = 0.0;
    for (std::size_t i = returns.size() - k; i < returns.size(); ++i) tail += returns[i];
    return {total / static_cast<double>(returns.size()), tail / static_cast<double>(k)};
}

struct MeanSe {
    double mean = 0.0;
    double se = std::numeric_limits<double>::quiet_NaN();  // NaN with fewer than 2 samples
    std::size_t n = 0;
};

inline MeanSe mean_se(const std::vector<double>& xs) {
    if (xs.empty()) throw std::invalid_argument("mean_se: empty sample");
    MeanSe out;
    out.n = xs.size();
    for (double x : xs) out.mean += x;
    out.mean /= static_cast<double>(xs.size());
    if (xs.size() >= 2) {
        double ss = 0.0;
        for (double x : xs) ss += (x - out.mean) * (x - out.mean);
        out.se = std::sqrt(ss / static_cast<double>(xs.size() - 1) / static_cast<double>(xs.size()));
    }
    return out;
}

enum class Verdict { FirstBetter, SecondBetter, Similar, Undefined };

inline std::string verdict_name(Verdict v, const std::string& first, const std::string& second) {
    switch (v) {
        case Verdict::FirstBetter: return first;
        case Verdict::SecondBetter: return second;
        case Verdict::Similar: return "Similar";
        case Verdict::Undefined: return "undefined (standard error needs >= 2 seeds)";
    }
    return "?";
}

/// Higher is better. Overlapping mean +- 1 SE intervals count as similar.
inline Verdict compare_scores(const MeanSe& a, const MeanSe& b) {
    if (std::isnan(a.se) || std::isnan(b.se)) return Verdict::Undefined;
    if (a.mean - a.se <= b.mean + b.se && b.mean - b.se <= a.mean + a.se) return Verdict::Similar;
    return a.mean > b.mean ? Verdict::FirstBetter : Verdict::SecondBetter;
}

}  // namespace dae
