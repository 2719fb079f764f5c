#pragma once

// Independent reference computations shared by the tests. Nothing here calls
// the library's solvers; trajectories are enumerated path by path.

#include <functional>
#include <random>
#include <vector>

#include "dae/mdp.hpp"

namespace oracle {

using dae::FiniteMdp;
using dae::Matrix;
using dae::TabularPolicy;
using dae::Vector;

struct Path {
    double prob = 1.0;
    std::vector<std::size_t> states;   // s_0 .. s_n (s_n may be terminal)
    std::vector<std::size_t> actions;  // a_0 .. a_{n-1}
    std::vector<double> rewards;
    bool ended = false;                // reached a terminal state
};

/// Every path of at most `depth` actions with positive probability. A path
/// stops early when it enters a terminal state.
inline std::vector<Path> enumerate_paths(const FiniteMdp& mdp, const TabularPolicy& pi, std::size_t depth) {
    std::vector<Path> out;
    std::function<void(Path&)> rec = [&](Path& p) {
        const std::size_t s = p.states.back();
        if (mdp.is_terminal(s)) {
            p.ended = true;
            out.push_back(p);
            p.ended = false;
            return;
        }
        if (p.actions.size() == depth) {
            out.push_back(p);
            return;
        }
        for (std::size_t a = 0; a < mdp.n_actions(); ++a) {
            const double pa = pi.prob(s, a);
            if (pa == 0.0) continue;
            for (std::size_t n = 0; n < mdp.n_states(); ++n) {
                const double pn = mdp.p(s, a, n);
                if (pn == 0.0) continue;
                Path q = p;
                q.prob *= pa * pn;
                q.states.push_back(n);
                q.actions.push_back(a);
                q.rewards.push_back(mdp.r(s, a));
                rec(q);
            }
        }
    };
    for (std::size_t s = 0; s < mdp.n_states(); ++s) {
        if (mdp.initial_dist()[s] == 0.0) continue;
        Path p;
        p.prob = mdp.initial_dist()[s];
        p.states = {s};
        rec(p);
    }
    return out;
}

/// Layered episodic MDP: `layers` layers of `width` states, then one terminal
/// state. Every action moves to a random distribution over the next layer, so
/// each episode lasts exactly `layers` steps.
inline FiniteMdp layered_mdp(std::size_t layers, std::size_t width, std::size_t actions, double gamma,
                             std::mt19937_64& gen) {
    const std::size_t S = layers * width + 1, term = S - 1;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<double> P(S * actions * S, 0.0);
    Matrix R = Matrix::Zero(S, actions);
    for (std::size_t l = 0; l < layers; ++l)
        for (std::size_t i = 0; i < width; ++i) {
            const std::size_t s = l * width + i;
            for (std::size_t a = 0; a < actions; ++a) {
                R(s, a) = 2.0 * unit(gen) - 1.0;
                double* row = P.data() + (s * actions + a) * S;
                if (l + 1 == layers) {
                    row[term] = 1.0;
                    continue;
                }
                double total = 0.0;
                for (std::size_t j = 0; j < width; ++j) total += (row[(l + 1) * width + j] = 0.2 + unit(gen));
                for (std::size_t j = 0; j < width; ++j) row[(l + 1) * width + j] /= total;
                double sum = 0.0;
                for (std::size_t j = 0; j < width; ++j) sum += row[(l + 1) * width + j];
                row[(l + 1) * width] += 1.0 - sum;
            }
        }
    for (std::size_t a = 0; a < actions; ++a) P[(term * actions + a) * S + term] = 1.0;
    Vector mu = Vector::Zero(S);
    double total = 0.0;
    for (std::size_t i = 0; i < width; ++i) total += (mu[i] = 0.2 + unit(gen));
    mu /= total;
    mu[0] += 1.0 - mu.sum();
    std::vector<bool> terminal(S, false);
    terminal[term] = true;
    return {S, actions, std::move(P), std::move(R), gamma, std::move(mu), std::move(terminal)};
}

/// Random softmax policy; with `sparse`, some actions get probability 0 (one always survives).
inline TabularPolicy random_policy(std::size_t S, std::size_t A, std::mt19937_64& gen, bool sparse = false) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::bernoulli_distribution drop(0.3);
    Matrix logits(S, A);
    for (std::size_t s = 0; s < S; ++s) {
        for (std::size_t a = 0; a < A; ++a) logits(s, a) = normal(gen);
        if (sparse)
            for (std::size_t a = 1; a < A; ++a)
                if (drop(gen)) logits(s, a) = -std::numeric_limits<double>::infinity();
    }
    return TabularPolicy(logits);
}

/// V and Q by plain value iteration, independent of the library's linear solve.
inline std::pair<Vector, Matrix> value_iteration(const FiniteMdp& mdp, const TabularPolicy& pi, double gamma,
                                                 std::size_t sweeps) {
    const std::size_t S = mdp.n_states(), A = mdp.n_actions();
    Vector v = Vector::Zero(S);
    Matrix q = Matrix::Zero(S, A);
    for (std::size_t it = 0; it < sweeps; ++it) {
        for (std::size_t s = 0; s < S; ++s)
            for (std::size_t a = 0; a < A; ++a) {
                double acc = mdp.r(s, a);
                for (std::size_t n = 0; n < S; ++n) acc += gamma * mdp.p(s, a, n) * v[n];
                q(s, a) = mdp.is_terminal(s) ? 0.0 : acc;
            }
        for (std::size_t s = 0; s < S; ++s) {
            double acc = 0.0;
            for (std::size_t a = 0; a < A; ++a) acc += pi.prob(s, a) * q(s, a);
            v[s] = acc;
        }
    }
    return {v, q};
}

}  // namespace oracle
