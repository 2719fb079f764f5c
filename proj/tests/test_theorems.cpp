#include <gtest/gtest.h>

#include <random>

#include "dae/envs.hpp"
#include "dae/theorems.hpp"
#include "oracles.hpp"

using namespace dae;

namespace {

double max_defined_error(const ConstrainedMinimizer& m, const Matrix& truth, const BoolTable& mask) {
    double err = 0.0;
    for (Eigen::Index s = 0; s < truth.rows(); ++s)
        for (Eigen::Index a = 0; a < truth.cols(); ++a)
            if (mask(s, a)) {
                EXPECT_TRUE(m.advantage_defined(s, a)) << "pair (" << s << ", " << a << ")";
                err = std::max(err, std::abs(m.advantage(s, a) - truth(s, a)));
            }
    return err;
}

// E over enumerated paths of the Theorem-2 residual squared, for tabular f and V.
double enumerated_bootstrap_objective(const FiniteMdp& mdp, const std::vector<oracle::Path>& paths, const Matrix& f,
                                      const Vector& v, const Vector& u, std::size_t t, double g) {
    double total = 0.0;
    for (const auto& p : paths) {
        const std::size_t n = p.actions.size();
        double y = 0.0, disc = 1.0;
        for (std::size_t k = 0; k < n; ++k, disc *= g) y += disc * (p.rewards[k] - f(p.states[k], p.actions[k]));
        if (n == t) y += disc * u[p.states[n]];
        (void)mdp;
        total += p.prob * std::pow(y - v[p.states[0]], 2);
    }
    return total;
}

Matrix random_centered(const TabularPolicy& pi, std::mt19937_64& gen) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix d(pi.n_states(), pi.n_actions());
    for (Eigen::Index s = 0; s < d.rows(); ++s) {
        for (Eigen::Index a = 0; a < d.cols(); ++a) d(s, a) = normal(gen);
        d.row(s).array() -= d.row(s).dot(pi.probs().row(s));
    }
    return d;
}

}  // namespace

TEST(Theorem1, ChainOfEightUniformPolicyRecoversAdvantage) {
    ChainEnvSpec spec;
    spec.n_states = 8;
    const ChainEnv env = build_chain(spec);
    const auto pi = TabularPolicy::uniform(env.mdp.n_states(), 2);
    const auto sol = solve_theorem1(env.mdp, pi, 7);
    const auto dp = solve_policy(env.mdp, pi);
    EXPECT_LT(max_defined_error(sol, dp.adv, reachable_within(env.mdp, pi, 7)), 1e-8);
}

TEST(Theorem1, CounterexampleAtHorizonOne) {
    using C = Counterexample;
    const FiniteMdp mdp = build_counterexample();
    std::mt19937_64 gen(11);
    for (int trial = 0; trial < 10; ++trial) {
        const auto pi = oracle::random_policy(4, 2, gen);
        const auto sol = solve_theorem1(mdp, pi, 1);
        const double pu = pi.prob(C::kStart, C::kActionUp);
        EXPECT_NEAR(sol.advantage(C::kStart, C::kActionUp), 1.0 - pu, 1e-10);
        EXPECT_NEAR(sol.advantage(C::kStart, C::kActionDown), -pu, 1e-10);
        for (std::size_t a = 0; a < 2; ++a) {
            EXPECT_NEAR(sol.advantage(C::kUp, a), 0.0, 1e-10);
            EXPECT_NEAR(sol.advantage(C::kDown, a), 0.0, 1e-10);
        }
        // Not reachable within one step.
        EXPECT_FALSE(sol.advantage_defined(C::kTerminal, 0));
    }
}

TEST(Theorem1, RandomEpisodicMdpsMatchDp) {
    std::mt19937_64 gen(3);
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        const FiniteMdp mdp = build_random({3 + seed % 3, 2 + seed % 2, 2, 0.9, seed, true});
        for (int k = 0; k < 5; ++k) {
            const auto pi = oracle::random_policy(mdp.n_states(), mdp.n_actions(), gen, k % 2 == 1);
            const auto [v, q] = oracle::value_iteration(mdp, pi, mdp.discount(), 3000);
            Matrix adv = q.colwise() - v;
            for (std::size_t t : {0u, 1u, 3u, 6u}) {
                const auto sol = solve_theorem1(mdp, pi, t);
                EXPECT_LT(max_defined_error(sol, adv, reachable_within(mdp, pi, t)), 1e-6)
                    << "seed " << seed << " t " << t;
            }
        }
    }
}

TEST(Theorem1, UndefinedOutsideReachableSet) {
    std::mt19937_64 gen(5);
    ChainEnvSpec spec;
    spec.n_states = 6;
    const ChainEnv env = build_chain(spec);
    Matrix logits = Matrix::Zero(7, 2);
    logits(2, 1) = -std::numeric_limits<double>::infinity();
    const TabularPolicy pi(logits);
    const auto sol = solve_theorem1(env.mdp, pi, 2);
    EXPECT_TRUE(sol.advantage_defined(2, 0));
    EXPECT_FALSE(sol.advantage_defined(2, 1));
    EXPECT_TRUE(std::isnan(sol.advantage(2, 1)));
    EXPECT_FALSE(sol.advantage_defined(3, 0));
    EXPECT_TRUE(std::isnan(sol.advantage(5, 1)));
}

TEST(Theorem1, EnumeratedObjectiveIsStationaryAtSolution) {
    // Finite-horizon MDP, so the enumeration covers complete episodes.
    std::mt19937_64 gen(21);
    for (int trial = 0; trial < 4; ++trial) {
        const FiniteMdp mdp = oracle::layered_mdp(3, 2, 2, 0.8, gen);
        const auto pi = oracle::random_policy(mdp.n_states(), 2, gen);
        const auto paths = oracle::enumerate_paths(mdp, pi, 10);
        const std::size_t t = 1;
        const auto sol = solve_theorem1(mdp, pi, t);
        Matrix f = sol.advantage;
        for (Eigen::Index s = 0; s < f.rows(); ++s)
            for (Eigen::Index a = 0; a < f.cols(); ++a)
                if (!sol.advantage_defined(s, a)) f(s, a) = 0.0;
        auto objective = [&](const Matrix& g) {
            double total = 0.0;
            for (const auto& p : paths) {
                double y = 0.0, disc = 1.0;
                for (std::size_t k = 0; k < p.actions.size(); ++k, disc *= 0.8) {
                    y += disc * p.rewards[k];
                    if (k <= t) y -= disc * g(p.states[k], p.actions[k]);
                }
                total += p.prob * y * y;
            }
            return total;
        };
        for (int dir = 0; dir < 5; ++dir) {
            const Matrix d = random_centered(pi, gen);
            const double h = 1e-4;
            const double slope = (objective(f + h * d) - objective(f - h * d)) / (2 * h);
            EXPECT_NEAR(slope, 0.0, 1e-7);
            EXPECT_GE(objective(f + 0.1 * d), objective(f) - 1e-12);
        }
    }
}

TEST(Theorem2, MatchesClosedFormsForArbitraryTargets) {
    std::mt19937_64 gen(8);
    std::normal_distribution<double> normal(0.0, 2.0);
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        const FiniteMdp mdp = build_random({4, 2, 2, 0.85, seed, seed % 2 == 0});
        const auto pi = oracle::random_policy(4, 2, gen);
        Vector u(4);
        for (auto& x : u) x = normal(gen);
        if (mdp.has_terminal()) u[3] = 0.0;
        for (std::size_t t : {1u, 2u, 4u}) {
            const auto sol = solve_theorem2(mdp, pi, u, t);
            const Vector v9 = nstep_value_closed_form(mdp, pi, u, t, mdp.discount());
            const Matrix a10 = nstep_advantage_closed_form(mdp, pi, u, t, mdp.discount());
            for (std::size_t s = 0; s < 4; ++s) {
                if (sol.value_defined[s]) {
                    EXPECT_NEAR(sol.value[s], v9[s], 1e-8);
                } else {
                    EXPECT_EQ(mdp.initial_dist()[s], 0.0);
                }
            }
            const BoolTable mask = reachable_within(mdp, pi, t - 1);
            EXPECT_LT(max_defined_error(sol, a10, mask), 1e-8) << "seed " << seed << " t " << t;
        }
    }
}

TEST(Theorem2, ExactTargetGivesTrueValueAndAdvantage) {
    std::mt19937_64 gen(9);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const FiniteMdp mdp = build_random({5, 3, 3, 0.9, seed, true});
        const auto pi = oracle::random_policy(5, 3, gen);
        const auto [v, q] = oracle::value_iteration(mdp, pi, 0.9, 3000);
        const Matrix adv = q.colwise() - v;
        for (std::size_t t : {1u, 3u}) {
            const auto sol = solve_theorem2(mdp, pi, v, t);
            for (std::size_t s = 0; s < 5; ++s)
                if (sol.value_defined[s]) EXPECT_NEAR(sol.value[s], v[s], 1e-8);
            EXPECT_LT(max_defined_error(sol, adv, reachable_within(mdp, pi, t - 1)), 1e-8);
        }
    }
}

TEST(Theorem2, OneStepValueIsTdTarget) {
    const FiniteMdp mdp = build_random({4, 2, 3, 0.7, 4, false});
    std::mt19937_64 gen(1);
    const auto pi = oracle::random_policy(4, 2, gen);
    const Vector u = Vector::LinSpaced(4, -1.0, 2.0);
    const auto sol = solve_theorem2(mdp, pi, u, 1);
    for (std::size_t s = 0; s < 4; ++s) {
        if (!sol.value_defined[s]) continue;
        double expect = 0.0;
        for (std::size_t a = 0; a < 2; ++a) {
            double next = 0.0;
            for (std::size_t n = 0; n < 4; ++n) next += mdp.p(s, a, n) * u[n];
            expect += pi.prob(s, a) * (mdp.r(s, a) + 0.7 * next);
        }
        EXPECT_NEAR(sol.value[s], expect, 1e-10);
    }
}

TEST(Theorem2, EqualWeightsAverageTheTwoBrackets) {
    // Two states that swap uniformly, uniform start: p(s_t = s) = 1/2 for all t.
    std::vector<double> P(2 * 2 * 2, 0.5);
    Matrix R(2, 2);
    R << 1.0, -0.5, 0.25, 2.0;
    Vector mu(2);
    mu << 0.5, 0.5;
    const FiniteMdp mdp(2, 2, P, R, 1.0, mu, {false, false});
    Matrix logits(2, 2);
    logits << 0.3, -0.2, 1.0, 0.0;
    const TabularPolicy pi(logits);
    Vector u(2);
    u << 0.7, -1.3;
    const auto bk = nstep_backups(mdp, pi, u, 2, 1.0);
    const Matrix bracket_far = bk.q[1].colwise() - bk.v[2];
    const Matrix bracket_near = bk.q[0].colwise() - bk.v[1];
    const auto sol = solve_theorem2(mdp, pi, u, 2, 1.0);
    for (Eigen::Index s = 0; s < 2; ++s)
        for (Eigen::Index a = 0; a < 2; ++a)
            EXPECT_NEAR(sol.advantage(s, a), 0.5 * (bracket_far(s, a) + bracket_near(s, a)), 1e-10);
}

TEST(Theorem2, EnumeratedObjectiveIsStationaryAtSolution) {
    std::mt19937_64 gen(33);
    const FiniteMdp mdp = build_random({4, 2, 2, 0.9, 17, false});
    const auto pi = oracle::random_policy(4, 2, gen);
    const Vector u = Vector::LinSpaced(4, 0.5, -0.5);
    const std::size_t t = 3;
    const auto paths = oracle::enumerate_paths(mdp, pi, t);
    const auto sol = solve_theorem2(mdp, pi, u, t);
    Matrix f = sol.advantage;
    Vector v = sol.value;
    for (Eigen::Index i = 0; i < f.size(); ++i)
        if (std::isnan(f.data()[i])) f.data()[i] = 0.0;
    for (Eigen::Index i = 0; i < v.size(); ++i)
        if (std::isnan(v[i])) v[i] = 0.0;
    const double h = 1e-4;
    for (int dir = 0; dir < 5; ++dir) {
        const Matrix d = random_centered(pi, gen);
        const double slope = (enumerated_bootstrap_objective(mdp, paths, f + h * d, v, u, t, 0.9) -
                              enumerated_bootstrap_objective(mdp, paths, f - h * d, v, u, t, 0.9)) /
                             (2 * h);
        EXPECT_NEAR(slope, 0.0, 1e-7);
    }
    for (Eigen::Index s = 0; s < 4; ++s) {
        Vector e = Vector::Zero(4);
        e[s] = 1.0;
        const double slope = (enumerated_bootstrap_objective(mdp, paths, f, v + h * e, u, t, 0.9) -
                              enumerated_bootstrap_objective(mdp, paths, f, v - h * e, u, t, 0.9)) /
                             (2 * h);
        EXPECT_NEAR(slope, 0.0, 1e-7);
    }
}

TEST(Shaping, CenteredShapingPreservesEnumeratedReturn) {
    std::mt19937_64 gen(4);
    for (int trial = 0; trial < 5; ++trial) {
        const FiniteMdp mdp = oracle::layered_mdp(4, 2, 3, 0.95, gen);
        const auto pi = oracle::random_policy(mdp.n_states(), 3, gen);
        Matrix shaping = random_centered(pi, gen);
        shaping.row(mdp.n_states() - 1).setZero();
        double g = 0.0, g_shaped = 0.0;
        for (const auto& p : oracle::enumerate_paths(mdp, pi, 10)) {
            double disc = 1.0;
            for (std::size_t k = 0; k < p.actions.size(); ++k, disc *= 0.95) {
                g += p.prob * disc * p.rewards[k];
                g_shaped += p.prob * disc * (p.rewards[k] - shaping(p.states[k], p.actions[k]));
            }
        }
        EXPECT_NEAR(g, g_shaped, 1e-12);
        const Matrix shaped = mdp.reward() - shaping;
        EXPECT_NEAR(expected_table_return(mdp, pi, shaped, 0.95), g, 1e-12);
    }
}

TEST(Shaping, SeriesReturnMatchesDpOnInfiniteHorizon) {
    std::mt19937_64 gen(6);
    const FiniteMdp mdp = build_random({5, 2, 3, 0.9, 2, false});
    const auto pi = oracle::random_policy(5, 2, gen);
    const auto dp = solve_policy(mdp, pi);
    const double expected = mdp.initial_dist().dot(dp.v);
    EXPECT_NEAR(expected_table_return(mdp, pi, mdp.reward(), 0.9), expected, 1e-11);
    EXPECT_NEAR(expected_table_return(mdp, pi, mdp.reward() - random_centered(pi, gen), 0.9), expected, 1e-11);
}

TEST(ClosedForms, ValueBackupMatchesPathEnumeration) {
    std::mt19937_64 gen(12);
    const FiniteMdp mdp = build_random({3, 2, 2, 0.8, 5, false});
    const auto pi = oracle::random_policy(3, 2, gen);
    const Vector u = Vector::LinSpaced(3, 1.0, 3.0);
    const std::size_t t = 3;
    const Vector closed = nstep_value_closed_form(mdp, pi, u, t, 0.8);
    for (std::size_t s0 = 0; s0 < 3; ++s0) {
        Vector mu = Vector::Zero(3);
        mu[s0] = 1.0;
        std::vector<double> P(mdp.transition());
        const FiniteMdp from_s0(3, 2, P, mdp.reward(), 0.8, mu, {false, false, false});
        double total = 0.0;
        for (const auto& p : oracle::enumerate_paths(from_s0, pi, t)) {
            double y = 0.0, disc = 1.0;
            for (double r : p.rewards) y += disc * r, disc *= 0.8;
            total += p.prob * (y + disc * u[p.states.back()]);
        }
        EXPECT_NEAR(closed[s0], total, 1e-12);
    }
}
