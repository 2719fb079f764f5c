#pragma once

// Randomised verification suites run by `dae_cli verify`. Each suite draws
// small episodic MDPs and policies from a seeded stream, compares the exact
// minimisers and identities against dynamic programming, and keeps the
// serialised MDP of the worst instance for replay.

#include <cmath>
#include <string>
#include <vector>

#include "dae/envs.hpp"
#include "dae/estimators.hpp"
#include "dae/mdp.hpp"
#include "dae/mdp_io.hpp"
#include "dae/theorems.hpp"

namespace dae {

struct InstanceResult {
    std::size_t index = 0;
    double max_error = 0.0;
    std::string description;
    std::string mdp_text;
};

struct SuiteReport {
    std::string name;
    double tolerance = 0.0;
    std::vector<InstanceResult> instances;

    double max_error() const {
        double m = 0.0;
        for (const auto& r : instances) m = std::max(m, r.max_error);
        return m;
    }
    bool passed() const {
        for (const auto& r : instances)
            if (!(r.max_error <= tolerance)) return false;
        return !instances.empty();
    }
    const InstanceResult* worst() const {
        const InstanceResult* w = nullptr;
        for (const auto& r : instances)
            if (!w || !(r.max_error <= w->max_error)) w = &r;
        return w;
    }
};

namespace detail {

struct VerifyInstance {
    FiniteMdp mdp;
    std::vector<TabularPolicy> policies;
    std::size_t horizon;
    std::string description;
};

inline TabularPolicy draw_policy(std::size_t S, std::size_t A, CounterRng& rng, bool sparse) {
    Matrix logits(S, A);
    for (std::size_t s = 0; s < S; ++s) {
        for (std::size_t a = 0; a < A; ++a) logits(s, a) = rng.normal();
        if (sparse)
            for (std::size_t a = 1; a < A; ++a)
                if (rng.uniform() < 0.3) logits(s, a) = -std::numeric_limits<double>::infinity();
    }
    return TabularPolicy(logits);
}

/// Episodic MDP with 2..5 states (terminal included), 2..3 actions, a
/// horizon in 1..10 and `n_policies` random policies, some with zeros.
inline VerifyInstance draw_instance(std::uint64_t seed, std::size_t index, std::size_t n_policies) {
    CounterRng rng(stream_key(seed, {0x766572ULL, index}));
    const std::size_t S = 2 + static_cast<std::size_t>(rng.uniform() * 4.0);
    const std::size_t A = 2 + static_cast<std::size_t>(rng.uniform() * 2.0);
    const std::size_t branching = std::min<std::size_t>(S, 2);
    const double gammas[] = {0.8, 0.9, 0.99, 1.0};
    const double gamma = gammas[rng.next_u64() % 4];
    FiniteMdp mdp = build_random({S, A, branching, gamma, rng.next_u64(), true});
    const std::size_t horizon = 1 + static_cast<std::size_t>(rng.uniform() * 10.0);
    std::vector<TabularPolicy> policies;
    for (std::size_t k = 0; k < n_policies; ++k) policies.push_back(draw_policy(S, A, rng, k % 2 == 1));
    return {std::move(mdp), std::move(policies), horizon,
            std::to_string(S) + " states, " + std::to_string(A) + " actions, gamma " + format_double(gamma) +
                ", horizon " + std::to_string(horizon)};
}

inline double max_error_on(const Matrix& got, const Matrix& want, const BoolTable& mask) {
    double m = 0.0;
    for (Eigen::Index s = 0; s < got.rows(); ++s)
        for (Eigen::Index a = 0; a < got.cols(); ++a)
            if (mask(s, a)) {
                const double e = std::abs(got(s, a) - want(s, a));
                m = std::isnan(e) ? std::numeric_limits<double>::infinity() : std::max(m, e);
            }
    return m;
}

inline Matrix random_centered(const TabularPolicy& pi, CounterRng& rng) {
    Matrix f(pi.n_states(), pi.n_actions());
    for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = rng.normal();
    return center_rows(f, pi.probs());
}

}  // namespace detail

/// Direct-advantage minimiser vs the true advantage on reachable pairs.
inline SuiteReport verify_theorem1(std::size_t instances, std::uint64_t seed, std::size_t policies = 5) {
    SuiteReport rep{"theorem1", 1e-6, {}};
    for (std::size_t i = 0; i < instances; ++i) {
        const auto inst = detail::draw_instance(seed, i, policies);
        double err = 0.0;
        for (const auto& pi : inst.policies) {
            const std::size_t t = inst.horizon - 1;
            const auto sol = solve_theorem1(inst.mdp, pi, t);
            const BoolTable mask = reachable_within(inst.mdp, pi, t);
            err = std::max(err, detail::max_error_on(sol.advantage, solve_policy(inst.mdp, pi).adv, mask));
        }
        rep.instances.push_back({i, err, inst.description, to_text(inst.mdp)});
    }
    return rep;
}

/// Bootstrapped minimiser vs the n-step closed forms for arbitrary targets,
/// and vs (A, V) when the target is the true value.
inline SuiteReport verify_theorem2(std::size_t instances, std::uint64_t seed, std::size_t policies = 5) {
    SuiteReport rep{"theorem2", 1e-6, {}};
    for (std::size_t i = 0; i < instances; ++i) {
        const auto inst = detail::draw_instance(seed, i, policies);
        CounterRng rng(stream_key(seed, {0x7461726765ULL, i}));
        const FiniteMdp& mdp = inst.mdp;
        const std::size_t t = inst.horizon;
        const double g = mdp.discount();
        double err = 0.0;
        for (const auto& pi : inst.policies) {
            Vector u(mdp.n_states());
            for (auto& x : u) x = 3.0 * rng.normal();
            for (std::size_t s = 0; s < mdp.n_states(); ++s)
                if (mdp.is_terminal(s)) u[s] = 0.0;
            const BoolTable mask = reachable_within(mdp, pi, t - 1);
            auto compare = [&](const ConstrainedMinimizer& sol, const Vector& v, const Matrix& adv) {
                for (std::size_t s = 0; s < mdp.n_states(); ++s)
                    if (sol.value_defined[s]) err = std::max(err, std::abs(sol.value[s] - v[s]));
                err = std::max(err, detail::max_error_on(sol.advantage, adv, mask));
            };
            compare(solve_theorem2(mdp, pi, u, t), nstep_value_closed_form(mdp, pi, u, t, g),
                    nstep_advantage_closed_form(mdp, pi, u, t, g));
            const DpSolution dp = solve_policy(mdp, pi);
            compare(solve_theorem2(mdp, pi, dp.v, t), dp.v, dp.adv);
        }
        rep.instances.push_back({i, err, inst.description, to_text(mdp)});
    }
    return rep;
}

/// Expected return with rewards r - f for a random pi-centered f equals the
/// expected return with r.
inline SuiteReport verify_shaping(std::size_t instances, std::uint64_t seed) {
    SuiteReport rep{"shaping", 1e-9, {}};
    for (std::size_t i = 0; i < instances; ++i) {
        const auto inst = detail::draw_instance(seed, i, 1);
        CounterRng rng(stream_key(seed, {0x7368617065ULL, i}));
        const auto& pi = inst.policies.front();
        const FiniteMdp& mdp = inst.mdp;
        Matrix f = detail::random_centered(pi, rng);
        for (std::size_t s = 0; s < mdp.n_states(); ++s)
            if (mdp.is_terminal(s)) f.row(static_cast<Eigen::Index>(s)).setZero();
        const double base = mdp.initial_dist().dot(solve_policy(mdp, pi).v);
        const double shaped = expected_table_return(mdp, pi, mdp.reward() - f, mdp.discount());
        rep.instances.push_back({i, std::abs(shaped - base), inst.description, to_text(mdp)});
    }
    return rep;
}

/// With action-independent transitions the advantage is the centered reward.
inline SuiteReport verify_locality(std::size_t instances, std::uint64_t seed) {
    SuiteReport rep{"locality", 1e-12, {}};
    for (std::size_t i = 0; i < instances; ++i) {
        CounterRng rng(stream_key(seed, {0x6c6f63ULL, i}));
        ChainEnvSpec spec;
        spec.n_states = 2 + static_cast<std::size_t>(rng.uniform() * 30.0);
        spec.reward_swap_seed = rng.next_u64();
        spec.discount = rng.uniform() < 0.5 ? 1.0 : 0.9;
        const ChainEnv env = build_chain(spec);
        Matrix R = env.mdp.reward();
        for (std::size_t s = 0; s < spec.n_states; ++s)
            for (Eigen::Index a = 0; a < 2; ++a) R(static_cast<Eigen::Index>(s), a) = 2.0 * rng.uniform() - 1.0;
        const FiniteMdp mdp(env.mdp.n_states(), 2, env.mdp.transition(), R, spec.discount, env.mdp.initial_dist(),
                            env.mdp.terminal_mask());
        const auto pi = detail::draw_policy(mdp.n_states(), 2, rng, false);
        const Matrix centered = center_rows(R, pi.probs());
        const Matrix adv = solve_policy(mdp, pi).adv;
        double err = 0.0;
        for (std::size_t s = 0; s < spec.n_states; ++s)
            for (Eigen::Index a = 0; a < 2; ++a)
                err = std::max(err, std::abs(adv(static_cast<Eigen::Index>(s), a) - centered(static_cast<Eigen::Index>(s), a)));
        rep.instances.push_back({i, err, "chain of " + std::to_string(spec.n_states), to_text(mdp)});
    }
    return rep;
}

}  // namespace dae
