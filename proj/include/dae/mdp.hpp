#pragma once

// Finite MDPs, tabular policies, exact policy evaluation and sampling.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dae/rng.hpp"

namespace dae {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using BoolTable = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// Tabular discounted MDP with deterministic expected rewards r(s, a).
///
/// Episode termination is encoded by absorbing states: a terminal state
/// self-loops with probability 1 and pays 0 for every action. A discount of
/// exactly 1 is accepted so that episodic tasks can be evaluated undiscounted;
/// solvers reject it when the policy does not terminate almost surely.
class FiniteMdp {
public:
    static constexpr double kProbTol = 1e-12;

    FiniteMdp(std::size_t n_states, std::size_t n_actions, std::vector<double> transition,
              Matrix reward, double discount, Vector initial_dist, std::vector<bool> terminal)
        : n_states_(n_states), n_actions_(n_actions), transition_(std::move(transition)),
          reward_(std::move(reward)), discount_(discount), initial_(std::move(initial_dist)),
          terminal_(std::move(terminal)) {
        validate();
    }

    std::size_t n_states() const noexcept { return n_states_; }
    std::size_t n_actions() const noexcept { return n_actions_; }
    std::size_t n_pairs() const noexcept { return n_states_ * n_actions_; }
    double discount() const noexcept { return discount_; }

    double p(std::size_t s, std::size_t a, std::size_t next) const {
        return transition_[(s * n_actions_ + a) * n_states_ + next];
    }
    std::span<const double> transition_row(std::size_t s, std::size_t a) const {
        return {transition_.data() + (s * n_actions_ + a) * n_states_, n_states_};
    }
    const std::vector<double>& transition() const noexcept { return transition_; }

    double r(std::size_t s, std::size_t a) const { return reward_(s, a); }
    const Matrix& reward() const noexcept { return reward_; }
    const Vector& initial_dist() const noexcept { return initial_; }
    bool is_terminal(std::size_t s) const { return terminal_[s]; }
    const std::vector<bool>& terminal_mask() const noexcept { return terminal_; }
    bool has_terminal() const {
        return std::find(terminal_.begin(), terminal_.end(), true) != terminal_.end();
    }

    /// Copy with a different discount factor.
    FiniteMdp with_discount(double discount) const {
        return {n_states_, n_actions_, transition_, reward_, discount, initial_, terminal_};
    }

    /// True when P(.|s, a) is the same row for every action at every state.
    bool action_independent_transitions() const {
        for (std::size_t s = 0; s < n_states_; ++s)
            for (std::size_t a = 1; a < n_actions_; ++a)
                for (std::size_t n = 0; n < n_states_; ++n)
                    if (p(s, a, n) != p(s, 0, n)) return false;
        return true;
    }

private:
    void validate() const {
        if (n_states_ == 0 || n_actions_ == 0)
            throw std::invalid_argument("FiniteMdp: need at least one state and one action");
        if (transition_.size() != n_states_ * n_actions_ * n_states_)
            throw std::invalid_argument("FiniteMdp: transition tensor has wrong size");
        if (static_cast<std::size_t>(reward_.rows()) != n_states_ ||
            static_cast<std::size_t>(reward_.cols()) != n_actions_)
            throw std::invalid_argument("FiniteMdp: reward table has wrong shape");
        if (static_cast<std::size_t>(initial_.size()) != n_states_ || terminal_.size() != n_states_)
            throw std::invalid_argument("FiniteMdp: initial distribution / terminal mask has wrong size");
        if (!(discount_ >= 0.0 && discount_ <= 1.0))
            throw std::invalid_argument("FiniteMdp: discount must lie in [0, 1]");
        if (!reward_.allFinite()) throw std::invalid_argument("FiniteMdp: non-finite reward");
        for (std::size_t s = 0; s < n_states_; ++s) {
            for (std::size_t a = 0; a < n_actions_; ++a) {
                double sum = 0.0;
                for (double q : transition_row(s, a)) {
                    if (!(q >= 0.0) || !std::isfinite(q))
                        throw std::invalid_argument("FiniteMdp: negative or non-finite transition probability");
                    sum += q;
                }
                if (std::abs(sum - 1.0) > kProbTol)
                    throw std::invalid_argument("FiniteMdp: transition row (" + std::to_string(s) + ", " +
                                                std::to_string(a) + ") does not sum to 1");
                if (terminal_[s] && (p(s, a, s) != 1.0 || reward_(s, a) != 0.0))
                    throw std::invalid_argument("FiniteMdp: terminal state " + std::to_string(s) +
                                                " must self-loop with reward 0");
            }
        }
        if ((initial_.array() < 0.0).any() || std::abs(initial_.sum() - 1.0) > kProbTol)
            throw std::invalid_argument("FiniteMdp: initial distribution is not a distribution");
    }

    std::size_t n_states_;
    std::size_t n_actions_;
    std::vector<double> transition_;  // [s][a][s']
    Matrix reward_;                   // [s][a]
    double discount_;
    Vector initial_;
    std::vector<bool> terminal_;
};

/// Row-wise softmax of a logit table. Entries equal to -inf give probability 0.
inline Matrix softmax_rows(const Matrix& logits) {
    Matrix probs(logits.rows(), logits.cols());
    for (Eigen::Index s = 0; s < logits.rows(); ++s) {
        const double m = logits.row(s).maxCoeff();
        if (!std::isfinite(m)) throw std::invalid_argument("softmax_rows: row without finite logit");
        probs.row(s) = (logits.row(s).array() - m).exp();
        probs.row(s) /= probs.row(s).sum();
    }
    return probs;
}

/// Stochastic policy over a finite MDP, stored as logits.
class TabularPolicy {
public:
    explicit TabularPolicy(Matrix logits) : logits_(std::move(logits)), probs_(softmax_rows(logits_)) {}

    static TabularPolicy uniform(std::size_t n_states, std::size_t n_actions) {
        return TabularPolicy(Matrix::Zero(n_states, n_actions));
    }

    /// Policy with the given action probabilities (zeros become -inf logits).
    static TabularPolicy from_probabilities(const Matrix& probs) {
        Matrix logits(probs.rows(), probs.cols());
        for (Eigen::Index i = 0; i < probs.size(); ++i)
            logits.data()[i] = probs.data()[i] > 0.0 ? std::log(probs.data()[i])
                                                     : -std::numeric_limits<double>::infinity();
        return TabularPolicy(std::move(logits));
    }

    std::size_t n_states() const noexcept { return static_cast<std::size_t>(logits_.rows()); }
    std::size_t n_actions() const noexcept { return static_cast<std::size_t>(logits_.cols()); }
    const Matrix& logits() const noexcept { return logits_; }
    const Matrix& probs() const noexcept { return probs_; }
    double prob(std::size_t s, std::size_t a) const { return probs_(s, a); }

private:
    Matrix logits_;
    Matrix probs_;
};

struct Step {
    std::size_t state;
    std::size_t action;
    double reward;
};

/// Sampled trajectory. `bootstrap_state` is set iff the rollout was truncated
/// before reaching a terminal state.
struct Trajectory {
    std::vector<Step> steps;
    std::optional<std::size_t> bootstrap_state;
    std::uint64_t seed = 0;

    std::size_t size() const noexcept { return steps.size(); }
    bool terminated() const noexcept { return !bootstrap_state.has_value(); }
    double undiscounted_return() const {
        double g = 0.0;
        for (const auto& st : steps) g += st.reward;
        return g;
    }
};

/// Exact evaluation of a policy: V, Q, A = Q - V and the discounted occupancy.
struct DpSolution {
    Vector v;
    Matrix q;
    Matrix adv;
    Vector occupancy;
    double bellman_residual = 0.0;
};

namespace detail {

inline void check_shapes(const FiniteMdp& mdp, const TabularPolicy& policy) {
    if (policy.n_states() != mdp.n_states() || policy.n_actions() != mdp.n_actions())
        throw std::invalid_argument("policy shape does not match the MDP");
}

}  // namespace detail

/// State-to-state transition matrix under the policy.
inline Matrix policy_transition(const FiniteMdp& mdp, const TabularPolicy& policy) {
    detail::check_shapes(mdp, policy);
    const std::size_t S = mdp.n_states(), A = mdp.n_actions();
    Matrix P = Matrix::Zero(S, S);
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t a = 0; a < A; ++a) {
            const double pa = policy.prob(s, a);
            if (pa == 0.0) continue;
            auto row = mdp.transition_row(s, a);
            for (std::size_t n = 0; n < S; ++n) P(s, n) += pa * row[n];
        }
    return P;
}

inline Vector policy_reward(const FiniteMdp& mdp, const TabularPolicy& policy) {
    detail::check_shapes(mdp, policy);
    return (mdp.reward().array() * policy.probs().array()).rowwise().sum();
}

/// Expected next-state value for each (s, a): out(s, a) = sum_s' P(s'|s,a) v(s').
inline Matrix expected_next(const FiniteMdp& mdp, const Vector& v) {
    const std::size_t S = mdp.n_states(), A = mdp.n_actions();
    Matrix out(S, A);
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t a = 0; a < A; ++a) {
            auto row = mdp.transition_row(s, a);
            double acc = 0.0;
            for (std::size_t n = 0; n < S; ++n) acc += row[n] * v[n];
            out(s, a) = acc;
        }
    return out;
}

/// True iff every non-terminal state reaches a terminal state with
/// probability 1 under the policy (equivalently: has a positive-probability
/// path to one). Requires at least one terminal state.
inline bool terminates_almost_surely(const FiniteMdp& mdp, const TabularPolicy& policy) {
    if (!mdp.has_terminal()) return false;
    const std::size_t S = mdp.n_states();
    const Matrix P = policy_transition(mdp, policy);
    std::vector<bool> reaches(S, false);
    for (std::size_t s = 0; s < S; ++s) reaches[s] = mdp.is_terminal(s);
    for (bool changed = true; changed;) {
        changed = false;
        for (std::size_t s = 0; s < S; ++s) {
            if (reaches[s]) continue;
            for (std::size_t n = 0; n < S; ++n)
                if (P(s, n) > 0.0 && reaches[n]) {
                    reaches[s] = changed = true;
                    break;
                }
        }
    }
    return std::all_of(reaches.begin(), reaches.end(), [](bool b) { return b; });
}

namespace detail {

inline std::vector<std::size_t> non_terminal_states(const FiniteMdp& mdp) {
    std::vector<std::size_t> idx;
    for (std::size_t s = 0; s < mdp.n_states(); ++s)
        if (!mdp.is_terminal(s)) idx.push_back(s);
    return idx;
}

/// Solves V = r_pi + gamma P_pi V with V = 0 on terminal states.
inline Vector evaluate_values(const FiniteMdp& mdp, const Matrix& P, const Vector& r_pi, double gamma,
                              double tol) {
    const std::size_t S = mdp.n_states();
    constexpr std::size_t kDirectLimit = 10000;
    constexpr int kMaxIterations = 1000000;
    Vector v = Vector::Zero(S);
    const auto live = non_terminal_states(mdp);
    if (live.empty()) return v;
    const Eigen::Index n = static_cast<Eigen::Index>(live.size());
    if (S <= kDirectLimit) {
        Matrix system(n, n);
        Vector rhs(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            rhs[i] = r_pi[live[i]];
            for (Eigen::Index j = 0; j < n; ++j)
                system(i, j) = (i == j ? 1.0 : 0.0) - gamma * P(live[i], live[j]);
        }
        Eigen::PartialPivLU<Matrix> lu(system);
        Vector x = lu.solve(rhs);
        // One step of iterative refinement.
        x += lu.solve(rhs - system * x);
        for (Eigen::Index i = 0; i < n; ++i) v[live[i]] = x[i];
        if (!v.allFinite()) throw std::domain_error("policy evaluation diverged (singular Bellman system)");
        return v;
    }
    for (int it = 0; it < kMaxIterations; ++it) {
        Vector next = r_pi + gamma * (P * v);
        for (std::size_t s = 0; s < S; ++s)
            if (mdp.is_terminal(s)) next[s] = 0.0;
        const double delta = (next - v).cwiseAbs().maxCoeff();
        v.swap(next);
        if (!v.allFinite()) break;
        if (delta <= tol * (1.0 - std::min(gamma, 1.0 - 1e-12))) return v;
    }
    throw std::domain_error("policy evaluation did not converge within the iteration cap");
}

}  // namespace detail

/// Discounted state occupancy d = mu + gamma P_pi^T d. With gamma = 1 the
/// absorbing terminal states get +inf when reached with positive probability.
inline Vector occupancy(const FiniteMdp& mdp, const TabularPolicy& policy, double gamma) {
    const std::size_t S = mdp.n_states();
    const Matrix P = policy_transition(mdp, policy);
    const Vector& mu = mdp.initial_dist();
    if (gamma < 1.0) {
        Matrix system = Matrix::Identity(S, S) - gamma * P.transpose();
        return system.partialPivLu().solve(mu);
    }
    if (!terminates_almost_surely(mdp, policy))
        throw std::invalid_argument("undiscounted occupancy requires an episodic MDP under this policy");
    const auto live = detail::non_terminal_states(mdp);
    const Eigen::Index n = static_cast<Eigen::Index>(live.size());
    Matrix system(n, n);
    Vector rhs(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        rhs[i] = mu[live[i]];
        for (Eigen::Index j = 0; j < n; ++j) system(i, j) = (i == j ? 1.0 : 0.0) - P(live[j], live[i]);
    }
    const Vector x = n > 0 ? Vector(system.partialPivLu().solve(rhs)) : Vector();
    Vector d = Vector::Zero(S);
    for (Eigen::Index i = 0; i < n; ++i) d[live[i]] = x[i];
    for (std::size_t s = 0; s < S; ++s) {
        if (!mdp.is_terminal(s)) continue;
        double inflow = mu[s];
        for (Eigen::Index i = 0; i < n; ++i) inflow += x[i] * P(live[i], s);
        d[s] = inflow > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
    }
    return d;
}

/// Exact V, Q, A and occupancy for (mdp, policy) under the given discount.
inline DpSolution solve_policy(const FiniteMdp& mdp, const TabularPolicy& policy, double gamma,
                               double tol) {
    if (!(tol > 0.0)) throw std::invalid_argument("solve_policy: tolerance must be positive");
    detail::check_shapes(mdp, policy);
    if (gamma >= 1.0 && !terminates_almost_surely(mdp, policy))
        throw std::invalid_argument("undiscounted evaluation requires an episodic MDP under this policy");
    const Matrix P = policy_transition(mdp, policy);
    const Vector r_pi = policy_reward(mdp, policy);

    DpSolution sol;
    const Vector v0 = detail::evaluate_values(mdp, P, r_pi, gamma, tol);
    sol.q = mdp.reward() + gamma * expected_next(mdp, v0);
    sol.v = (sol.q.array() * policy.probs().array()).rowwise().sum();
    sol.adv = sol.q.colwise() - sol.v;
    sol.occupancy = occupancy(mdp, policy, gamma);

    Vector backup = r_pi + gamma * (P * sol.v);
    for (std::size_t s = 0; s < mdp.n_states(); ++s)
        if (mdp.is_terminal(s)) backup[s] = 0.0;
    sol.bellman_residual = (backup - sol.v).cwiseAbs().maxCoeff();
    if (!(sol.bellman_residual <= tol))
        throw std::domain_error("solve_policy: Bellman residual " + std::to_string(sol.bellman_residual) +
                                " exceeds tolerance");
    return sol;
}

inline DpSolution solve_policy(const FiniteMdp& mdp, const TabularPolicy& policy, double tol = 1e-10) {
    return solve_policy(mdp, policy, mdp.discount(), tol);
}

/// sum_s mu(s) V(s), undiscounted (gamma = 1) or with the MDP's discount.
inline double expected_return(const FiniteMdp& mdp, const TabularPolicy& policy, bool undiscounted) {
    if (undiscounted && !terminates_almost_surely(mdp, policy))
        throw std::invalid_argument("expected_return: undiscounted return requested on a non-episodic MDP");
    const DpSolution sol = solve_policy(mdp, policy, undiscounted ? 1.0 : mdp.discount(), 1e-10);
    return mdp.initial_dist().dot(sol.v);
}

/// (s, a) is marked iff p(s_k = s, a_k = a) > 0 for some 0 <= k <= t.
inline BoolTable reachable_within(const FiniteMdp& mdp, const TabularPolicy& policy, std::size_t t) {
    detail::check_shapes(mdp, policy);
    const std::size_t S = mdp.n_states(), A = mdp.n_actions();
    // States reachable within k steps: R_k = R_0 u succ(R_{k-1}), monotone in k.
    std::vector<bool> within(S);
    for (std::size_t s = 0; s < S; ++s) within[s] = mdp.initial_dist()[s] > 0.0;
    for (std::size_t k = 1; k <= t; ++k) {
        std::vector<bool> next = within;
        for (std::size_t s = 0; s < S; ++s) {
            if (!within[s]) continue;
            for (std::size_t a = 0; a < A; ++a) {
                if (policy.prob(s, a) <= 0.0) continue;
                auto row = mdp.transition_row(s, a);
                for (std::size_t n = 0; n < S; ++n)
                    if (row[n] > 0.0) next[n] = true;
            }
        }
        if (next == within) break;
        within.swap(next);
    }
    BoolTable pairs = BoolTable::Constant(S, A, false);
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t a = 0; a < A; ++a) pairs(s, a) = within[s] && policy.prob(s, a) > 0.0;
    return pairs;
}

/// Distribution of s_t for t = 0..horizon (row t).
inline Matrix state_distributions(const FiniteMdp& mdp, const TabularPolicy& policy, std::size_t horizon) {
    const Matrix P = policy_transition(mdp, policy);
    Matrix dist(horizon + 1, mdp.n_states());
    dist.row(0) = mdp.initial_dist().transpose();
    for (std::size_t t = 1; t <= horizon; ++t) dist.row(t) = dist.row(t - 1) * P;
    return dist;
}

/// Rolls out at most `max_steps` steps from `start`, drawing from `rng`.
/// Starting in a terminal state yields a single zero-reward self-loop step.
inline Trajectory rollout(const FiniteMdp& mdp, const TabularPolicy& policy, std::size_t start,
                         std::size_t max_steps, CounterRng& rng) {
    if (max_steps == 0) throw std::invalid_argument("rollout: max_steps must be >= 1");
    detail::check_shapes(mdp, policy);
    Trajectory traj;
    traj.seed = rng.key();
    std::size_t s = start;
    const std::size_t A = mdp.n_actions();
    for (std::size_t k = 0; k < max_steps; ++k) {
        std::vector<double> pa(A);
        for (std::size_t a = 0; a < A; ++a) pa[a] = policy.prob(s, a);
        const std::size_t a = rng.categorical(pa);
        traj.steps.push_back({s, a, mdp.r(s, a)});
        if (mdp.is_terminal(s)) return traj;
        const std::size_t next = rng.categorical(mdp.transition_row(s, a));
        if (mdp.is_terminal(next)) return traj;
        s = next;
    }
    traj.bootstrap_state = s;
    return traj;
}

/// Samples one trajectory from the initial distribution. Deterministic in `seed`.
inline Trajectory sample_trajectory(const FiniteMdp& mdp, const TabularPolicy& policy, std::size_t max_steps,
                                    std::uint64_t seed) {
    CounterRng rng(stream_key(seed, {0x7472616aULL}));
    std::vector<double> mu(mdp.initial_dist().data(), mdp.initial_dist().data() + mdp.n_states());
    const std::size_t start = rng.categorical(mu);
    Trajectory traj = rollout(mdp, policy, start, max_steps, rng);
    traj.seed = seed;
    return traj;
}

}  // namespace dae
