#pragma once

// Exact minimizers of the direct-advantage objectives over tabular
// pi-centered functions, solved as equality-constrained quadratic programs
// (one Lagrange multiplier per state), together with the closed-form n-step
// value and advantage expressions they are checked against.
//
// All expectations are exact: they are sums over trajectory prefixes weighted
// by their probabilities, aggregated through the Markov chain on
// (state, action) pairs rather than enumerated path by path.

#include <cmath>
#include <limits>
#include <vector>

#include "dae/mdp.hpp"

namespace dae {

/// Markov chain induced on (state, action) pairs by an MDP and a policy.
/// Pair index is s * n_actions + a.
class PairChain {
public:
    PairChain(const FiniteMdp& mdp, const TabularPolicy& policy, double gamma)
        : mdp_(mdp), policy_(policy), gamma_(gamma), S_(mdp.n_states()), A_(mdp.n_actions()) {
        detail::check_shapes(mdp, policy);
        const Eigen::Index n = static_cast<Eigen::Index>(S_ * A_);
        step_ = Matrix::Zero(n, n);
        start_ = Matrix::Zero(static_cast<Eigen::Index>(S_), n);
        reward_ = Vector(n);
        for (std::size_t s = 0; s < S_; ++s)
            for (std::size_t a = 0; a < A_; ++a) {
                const auto x = index(s, a);
                reward_[x] = mdp.r(s, a);
                start_(static_cast<Eigen::Index>(s), x) = policy.prob(s, a);
                auto row = mdp.transition_row(s, a);
                for (std::size_t n2 = 0; n2 < S_; ++n2) {
                    if (row[n2] == 0.0) continue;
                    for (std::size_t a2 = 0; a2 < A_; ++a2) step_(x, index(n2, a2)) += row[n2] * policy.prob(n2, a2);
                }
            }
        initial_ = start_.transpose() * mdp.initial_dist();
    }

    Eigen::Index index(std::size_t s, std::size_t a) const { return static_cast<Eigen::Index>(s * A_ + a); }
    std::size_t n_pairs() const noexcept { return S_ * A_; }
    double gamma() const noexcept { return gamma_; }

    /// M[x][y] = P(s'|x) pi(a'|s') for y = (s', a').
    const Matrix& step() const noexcept { return step_; }
    /// Row s: distribution of the pair at a step where the state is s.
    const Matrix& start_rows() const noexcept { return start_; }
    /// Distribution of (s_0, a_0).
    const Vector& initial() const noexcept { return initial_; }
    const Vector& reward() const noexcept { return reward_; }

    /// M^0 .. M^k.
    std::vector<Matrix> powers(std::size_t k) const {
        std::vector<Matrix> out;
        out.reserve(k + 1);
        out.push_back(Matrix::Identity(step_.rows(), step_.cols()));
        for (std::size_t i = 1; i <= k; ++i) out.push_back(out.back() * step_);
        return out;
    }

    /// Rows p_0 .. p_k of pair marginals p_k(x) = p(s_k = s, a_k = a).
    Matrix marginals(std::size_t k) const {
        Matrix out(static_cast<Eigen::Index>(k + 1), step_.rows());
        out.row(0) = initial_.transpose();
        for (std::size_t i = 1; i <= k; ++i) out.row(static_cast<Eigen::Index>(i)) = out.row(static_cast<Eigen::Index>(i - 1)) * step_;
        return out;
    }

    /// E[sum_{j>=0} gamma^j r_j | x_0 = x] solved on the pair chain. Terminal
    /// pairs are absorbing with zero reward and get 0.
    Vector action_values() const {
        std::vector<Eigen::Index> live;
        for (std::size_t s = 0; s < S_; ++s)
            if (!mdp_.is_terminal(s))
                for (std::size_t a = 0; a < A_; ++a) live.push_back(index(s, a));
        const Eigen::Index n = static_cast<Eigen::Index>(live.size());
        Matrix system(n, n);
        Vector rhs(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            rhs[i] = reward_[live[i]];
            for (Eigen::Index j = 0; j < n; ++j) system(i, j) = (i == j ? 1.0 : 0.0) - gamma_ * step_(live[i], live[j]);
        }
        Eigen::FullPivLU<Matrix> lu(system);
        if (n > 0 && !lu.isInvertible())
            throw std::domain_error("PairChain: returns are unbounded (policy does not terminate)");
        const Vector q = n > 0 ? Vector(lu.solve(rhs)) : Vector();
        Vector out = Vector::Zero(step_.rows());
        for (Eigen::Index i = 0; i < n; ++i) out[live[i]] = q[i];
        return out;
    }

    /// u[x] = E[U(s_{k+1}) | x_k = x].
    Vector next_state_expectation(const Vector& u_state) const {
        Vector out(step_.rows());
        for (std::size_t s = 0; s < S_; ++s)
            for (std::size_t a = 0; a < A_; ++a) {
                auto row = mdp_.transition_row(s, a);
                double acc = 0.0;
                for (std::size_t n2 = 0; n2 < S_; ++n2) acc += row[n2] * u_state[static_cast<Eigen::Index>(n2)];
                out[index(s, a)] = acc;
            }
        return out;
    }

private:
    const FiniteMdp& mdp_;
    const TabularPolicy& policy_;
    double gamma_;
    std::size_t S_, A_;
    Matrix step_;
    Matrix start_;
    Vector initial_;
    Vector reward_;
};

/// Result of a constrained least-squares solve. Coordinates the objective does
/// not determine are NaN and flagged false.
struct ConstrainedMinimizer {
    Matrix advantage;         // S x A
    BoolTable advantage_defined;
    Vector value;             // S (Theorem-2 solve only)
    std::vector<bool> value_defined;
    double kkt_residual = 0.0;
};

namespace detail {

/// H[x][y] = E[(sum_{j<=last} g^j 1{x_j = x}) (sum_{k<=last} g^k 1{x_k = y})].
inline Matrix indicator_second_moment(const Matrix& marg, const std::vector<Matrix>& pw, double g, std::size_t last) {
    const Eigen::Index n = marg.cols();
    Matrix H = Matrix::Zero(n, n);
    for (std::size_t j = 0; j <= last; ++j) {
        const double gj = std::pow(g, static_cast<double>(j));
        const Vector pj = marg.row(static_cast<Eigen::Index>(j)).transpose();
        H.diagonal() += gj * gj * pj;
        for (std::size_t k = j + 1; k <= last; ++k) {
            const double w = gj * std::pow(g, static_cast<double>(k));
            const Matrix cross = pj.asDiagonal() * pw[k - j];
            H += w * (cross + cross.transpose());
        }
    }
    return H;
}

/// Solves min z^T H z - 2 b^T z s.t. C z = 0 over the selected coordinates.
/// Returns the solution (NaN where undetermined) and the determined mask.
inline std::pair<Vector, std::vector<bool>> solve_kkt(const Matrix& H, const Vector& b, const Matrix& C,
                                                      double* residual) {
    const Eigen::Index n = H.rows(), m = C.rows();
    Matrix K = Matrix::Zero(n + m, n + m);
    K.topLeftCorner(n, n) = H;
    K.topRightCorner(n, m) = C.transpose();
    K.bottomLeftCorner(m, n) = C;
    Vector rhs = Vector::Zero(n + m);
    rhs.head(n) = b;
    Eigen::FullPivLU<Matrix> lu(K);
    const double scale = std::max(1.0, K.cwiseAbs().maxCoeff());
    lu.setThreshold(1e-11);
    std::vector<bool> defined(static_cast<std::size_t>(n), true);
    Vector sol;
    if (lu.isInvertible()) {
        sol = lu.solve(rhs);
        sol += lu.solve(rhs - K * sol);
    } else {
        sol = K.completeOrthogonalDecomposition().solve(rhs);
        const Matrix kernel = lu.kernel();
        for (Eigen::Index i = 0; i < n; ++i)
            if (kernel.row(i).cwiseAbs().maxCoeff() > 1e-8) defined[static_cast<std::size_t>(i)] = false;
    }
    if (residual) *residual = (K * sol - rhs).cwiseAbs().maxCoeff() / scale;
    Vector z = sol.head(n);
    for (Eigen::Index i = 0; i < n; ++i)
        if (!defined[static_cast<std::size_t>(i)]) z[i] = std::numeric_limits<double>::quiet_NaN();
    return {z, defined};
}

inline std::vector<Eigen::Index> selected(const BoolTable& mask) {
    std::vector<Eigen::Index> out;
    for (Eigen::Index s = 0; s < mask.rows(); ++s)
        for (Eigen::Index a = 0; a < mask.cols(); ++a)
            if (mask(s, a)) out.push_back(s * mask.cols() + a);
    return out;
}

/// One constraint row per state that owns a selected pair: sum_a pi(a|s) f(s, a) = 0.
inline Matrix centering_constraints(const std::vector<Eigen::Index>& vars, const TabularPolicy& policy) {
    const auto A = static_cast<Eigen::Index>(policy.n_actions());
    std::vector<Eigen::Index> states;
    for (auto x : vars)
        if (states.empty() || states.back() != x / A) states.push_back(x / A);
    Matrix C = Matrix::Zero(static_cast<Eigen::Index>(states.size()), static_cast<Eigen::Index>(vars.size()));
    for (std::size_t i = 0; i < vars.size(); ++i) {
        const Eigen::Index s = vars[i] / A, a = vars[i] % A;
        const auto row = std::find(states.begin(), states.end(), s) - states.begin();
        C(row, static_cast<Eigen::Index>(i)) = policy.prob(static_cast<std::size_t>(s), static_cast<std::size_t>(a));
    }
    return C;
}

}  // namespace detail

/// Exact argmin over pi-centered f of E[(G(tau) - sum_{k<=t} gamma^k f(s_k, a_k))^2],
/// on the pairs reachable within t. Other pairs are left undefined.
inline ConstrainedMinimizer solve_theorem1(const FiniteMdp& mdp, const TabularPolicy& policy, std::size_t t,
                                           double gamma) {
    const PairChain chain(mdp, policy, gamma);
    const auto pw = chain.powers(t);
    const Matrix marg = chain.marginals(t);
    const Vector q = chain.action_values();
    const Eigen::Index n = static_cast<Eigen::Index>(chain.n_pairs());

    const Matrix H = detail::indicator_second_moment(marg, pw, gamma, t);
    // b[x] = sum_k g^k E[G 1{x_k = x}]
    //      = sum_k g^k ( sum_{j<k} g^j ((p_j o r)^T M^{k-j})[x] + g^k p_k(x) q(x) ).
    Vector b = Vector::Zero(n);
    for (std::size_t k = 0; k <= t; ++k) {
        const double gk = std::pow(gamma, static_cast<double>(k));
        Vector e = gk * marg.row(static_cast<Eigen::Index>(k)).transpose().cwiseProduct(q);
        for (std::size_t j = 0; j < k; ++j) {
            const Vector pr = marg.row(static_cast<Eigen::Index>(j)).transpose().cwiseProduct(chain.reward());
            e += std::pow(gamma, static_cast<double>(j)) * (pw[k - j].transpose() * pr);
        }
        b += gk * e;
    }

    const BoolTable reach = reachable_within(mdp, policy, t);
    const auto vars = detail::selected(reach);
    Matrix Hs(static_cast<Eigen::Index>(vars.size()), static_cast<Eigen::Index>(vars.size()));
    Vector bs(static_cast<Eigen::Index>(vars.size()));
    for (std::size_t i = 0; i < vars.size(); ++i) {
        bs[static_cast<Eigen::Index>(i)] = b[vars[i]];
        for (std::size_t j = 0; j < vars.size(); ++j) Hs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = H(vars[i], vars[j]);
    }
    const Matrix C = detail::centering_constraints(vars, policy);

    ConstrainedMinimizer out;
    const auto [z, defined] = detail::solve_kkt(Hs, bs, C, &out.kkt_residual);
    const std::size_t S = mdp.n_states(), A = mdp.n_actions();
    out.advantage = Matrix::Constant(static_cast<Eigen::Index>(S), static_cast<Eigen::Index>(A), std::numeric_limits<double>::quiet_NaN());
    out.advantage_defined = BoolTable::Constant(static_cast<Eigen::Index>(S), static_cast<Eigen::Index>(A), false);
    for (std::size_t i = 0; i < vars.size(); ++i) {
        const Eigen::Index s = vars[i] / static_cast<Eigen::Index>(A), a = vars[i] % static_cast<Eigen::Index>(A);
        out.advantage(s, a) = z[static_cast<Eigen::Index>(i)];
        out.advantage_defined(s, a) = defined[i];
    }
    return out;
}

inline ConstrainedMinimizer solve_theorem1(const FiniteMdp& mdp, const TabularPolicy& policy, std::size_t t) {
    return solve_theorem1(mdp, policy, t, mdp.discount());
}

/// Exact joint argmin of
///   E[(sum_{k<t} gamma^k (r_k - f(s_k, a_k)) + gamma^t U(s_t) - V(s_0))^2]
/// over pi-centered f (pairs reachable within t-1) and V (states with p(s_0) > 0).
inline ConstrainedMinimizer solve_theorem2(const FiniteMdp& mdp, const TabularPolicy& policy, const Vector& v_target,
                                           std::size_t t, double gamma) {
    if (t < 1) throw std::invalid_argument("solve_theorem2: need t >= 1");
    if (static_cast<std::size_t>(v_target.size()) != mdp.n_states())
        throw std::invalid_argument("solve_theorem2: v_target has wrong length");
    const PairChain chain(mdp, policy, gamma);
    const auto pw = chain.powers(t);
    const Matrix marg = chain.marginals(t);
    const Vector& r = chain.reward();
    const Vector u = chain.next_state_expectation(v_target);
    const Eigen::Index n = static_cast<Eigen::Index>(chain.n_pairs());
    const std::size_t S = mdp.n_states(), A = mdp.n_actions();
    const Vector& mu = mdp.initial_dist();
    auto g = [gamma](std::size_t k) { return std::pow(gamma, static_cast<double>(k)); };

    const Matrix Hzz = detail::indicator_second_moment(marg, pw, gamma, t - 1);

    // Hzv[x][s] = sum_{k<t} g^k mu(s) (start_s M^k)[x]
    Matrix Hzv = Matrix::Zero(n, static_cast<Eigen::Index>(S));
    for (std::size_t k = 0; k < t; ++k) Hzv += g(k) * (chain.start_rows() * pw[k]).transpose() * mu.asDiagonal();

    // E[Y 1{x_k = x}] with Y = sum_{j<t} g^j r_j + g^t U(s_t).
    Vector bz = Vector::Zero(n);
    for (std::size_t k = 0; k < t; ++k) {
        const Vector pk = marg.row(static_cast<Eigen::Index>(k)).transpose();
        Vector e = g(t) * pk.cwiseProduct(pw[t - k - 1] * u);
        for (std::size_t j = 0; j < t; ++j) {
            if (j < k) {
                const Vector pr = marg.row(static_cast<Eigen::Index>(j)).transpose().cwiseProduct(r);
                e += g(j) * (pw[k - j].transpose() * pr);
            } else {
                e += g(j) * pk.cwiseProduct(pw[j - k] * r);
            }
        }
        bz += g(k) * e;
    }
    // E[Y 1{s_0 = s}] = mu(s) E[Y | s_0 = s]
    Vector bv = Vector::Zero(static_cast<Eigen::Index>(S));
    {
        Vector per_pair = g(t) * (pw[t - 1] * u);
        for (std::size_t j = 0; j < t; ++j) per_pair += g(j) * (pw[j] * r);
        bv = mu.cwiseProduct(chain.start_rows() * per_pair);
    }

    const BoolTable reach = reachable_within(mdp, policy, t - 1);
    const auto fvars = detail::selected(reach);
    std::vector<Eigen::Index> vvars;
    for (std::size_t s = 0; s < S; ++s)
        if (mu[static_cast<Eigen::Index>(s)] > 0.0) vvars.push_back(static_cast<Eigen::Index>(s));
    const Eigen::Index nf = static_cast<Eigen::Index>(fvars.size()), nv = static_cast<Eigen::Index>(vvars.size());

    Matrix H = Matrix::Zero(nf + nv, nf + nv);
    Vector b(nf + nv);
    for (Eigen::Index i = 0; i < nf; ++i) {
        b[i] = bz[fvars[static_cast<std::size_t>(i)]];
        for (Eigen::Index j = 0; j < nf; ++j) H(i, j) = Hzz(fvars[static_cast<std::size_t>(i)], fvars[static_cast<std::size_t>(j)]);
        for (Eigen::Index j = 0; j < nv; ++j) {
            H(i, nf + j) = Hzv(fvars[static_cast<std::size_t>(i)], vvars[static_cast<std::size_t>(j)]);
            H(nf + j, i) = H(i, nf + j);
        }
    }
    for (Eigen::Index j = 0; j < nv; ++j) {
        b[nf + j] = bv[vvars[static_cast<std::size_t>(j)]];
        H(nf + j, nf + j) = mu[vvars[static_cast<std::size_t>(j)]];
    }
    const Matrix Cf = detail::centering_constraints(fvars, policy);
    Matrix C = Matrix::Zero(Cf.rows(), nf + nv);
    C.leftCols(nf) = Cf;

    ConstrainedMinimizer out;
    const auto [z, defined] = detail::solve_kkt(H, b, C, &out.kkt_residual);
    out.advantage = Matrix::Constant(static_cast<Eigen::Index>(S), static_cast<Eigen::Index>(A), std::numeric_limits<double>::quiet_NaN());
    out.advantage_defined = BoolTable::Constant(static_cast<Eigen::Index>(S), static_cast<Eigen::Index>(A), false);
    for (Eigen::Index i = 0; i < nf; ++i) {
        const Eigen::Index s = fvars[static_cast<std::size_t>(i)] / static_cast<Eigen::Index>(A);
        const Eigen::Index a = fvars[static_cast<std::size_t>(i)] % static_cast<Eigen::Index>(A);
        out.advantage(s, a) = z[i];
        out.advantage_defined(s, a) = defined[static_cast<std::size_t>(i)];
    }
    out.value = Vector::Constant(static_cast<Eigen::Index>(S), std::numeric_limits<double>::quiet_NaN());
    out.value_defined.assign(S, false);
    for (Eigen::Index j = 0; j < nv; ++j) {
        out.value[vvars[static_cast<std::size_t>(j)]] = z[nf + j];
        out.value_defined[static_cast<std::size_t>(vvars[static_cast<std::size_t>(j)])] = defined[static_cast<std::size_t>(nf + j)];
    }
    return out;
}

inline ConstrainedMinimizer solve_theorem2(const FiniteMdp& mdp, const TabularPolicy& policy, const Vector& v_target,
                                           std::size_t t) {
    return solve_theorem2(mdp, policy, v_target, t, mdp.discount());
}

/// m-step backups of U: V_0 = U, Q_m = r + gamma P V_{m-1}, V_m = sum_a pi Q_m.
/// Returns Q_1..Q_t (index m-1) and V_0..V_t.
struct NStepBackups {
    std::vector<Matrix> q;
    std::vector<Vector> v;
};

inline NStepBackups nstep_backups(const FiniteMdp& mdp, const TabularPolicy& policy, const Vector& v_target,
                                  std::size_t t, double gamma) {
    NStepBackups out;
    out.v.push_back(v_target);
    for (std::size_t m = 1; m <= t; ++m) {
        Matrix q = mdp.reward() + gamma * expected_next(mdp, out.v.back());
        Vector v = (q.array() * policy.probs().array()).rowwise().sum();
        out.q.push_back(std::move(q));
        out.v.push_back(std::move(v));
    }
    return out;
}

/// E[sum_{k<t} gamma^k r_k + gamma^t U(s_t) | s_0 = s], the t-step TD target.
inline Vector nstep_value_closed_form(const FiniteMdp& mdp, const TabularPolicy& policy, const Vector& v_target,
                                      std::size_t t, double gamma) {
    return nstep_backups(mdp, policy, v_target, t, gamma).v.back();
}

/// sum_{t'<t} w_t'(s)/W(s) (Q_{t-t'}(s, a) - V_{t-t'}(s)) with w_t'(s) = gamma^{2t'} p(s_t' = s).
/// Entries for states with W(s) = 0 are NaN.
inline Matrix nstep_advantage_closed_form(const FiniteMdp& mdp, const TabularPolicy& policy, const Vector& v_target,
                                          std::size_t t, double gamma) {
    if (t < 1) throw std::invalid_argument("nstep_advantage_closed_form: need t >= 1");
    const NStepBackups bk = nstep_backups(mdp, policy, v_target, t, gamma);
    const Matrix dist = state_distributions(mdp, policy, t - 1);
    const auto S = static_cast<Eigen::Index>(mdp.n_states()), A = static_cast<Eigen::Index>(mdp.n_actions());
    Matrix num = Matrix::Zero(S, A);
    Vector den = Vector::Zero(S);
    for (std::size_t tp = 0; tp < t; ++tp) {
        const Vector w = std::pow(gamma, 2.0 * static_cast<double>(tp)) * dist.row(static_cast<Eigen::Index>(tp)).transpose();
        const Matrix bracket = bk.q[t - tp - 1].colwise() - bk.v[t - tp];
        num += w.asDiagonal() * bracket;
        den += w;
    }
    Matrix out(S, A);
    for (Eigen::Index s = 0; s < S; ++s)
        out.row(s) = den[s] > 0.0 ? Eigen::RowVectorXd(num.row(s) / den[s])
                                  : Eigen::RowVectorXd::Constant(A, std::numeric_limits<double>::quiet_NaN());
    return out;
}

/// E[sum_k gamma^k reward_table(s_k, a_k)] by forward propagation of the pair
/// marginals until the remaining discounted mass is below `tail_tol`.
inline double expected_table_return(const FiniteMdp& mdp, const TabularPolicy& policy, const Matrix& reward_table,
                                    double gamma, double tail_tol = 1e-15, std::size_t max_steps = 1000000) {
    const PairChain chain(mdp, policy, gamma);
    Vector r(static_cast<Eigen::Index>(chain.n_pairs()));
    for (std::size_t s = 0; s < mdp.n_states(); ++s)
        for (std::size_t a = 0; a < mdp.n_actions(); ++a) r[chain.index(s, a)] = reward_table(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a));
    const double rmax = std::max(r.cwiseAbs().maxCoeff(), 1e-300);
    Eigen::RowVectorXd p = chain.initial().transpose();
    double total = 0.0, disc = 1.0;
    std::vector<bool> live(chain.n_pairs(), true);
    for (std::size_t s = 0; s < mdp.n_states(); ++s)
        if (mdp.is_terminal(s))
            for (std::size_t a = 0; a < mdp.n_actions(); ++a)
                if (r[chain.index(s, a)] == 0.0) live[static_cast<std::size_t>(chain.index(s, a))] = false;
    for (std::size_t k = 0; k < max_steps; ++k) {
        total += disc * p.dot(r);
        p = p * chain.step();
        disc *= gamma;
        double live_mass = 0.0;
        for (Eigen::Index x = 0; x < p.size(); ++x)
            if (live[static_cast<std::size_t>(x)]) live_mass += p[x];
        const double bound = gamma < 1.0 ? disc * live_mass * rmax / (1.0 - gamma) : live_mass * rmax;
        if (bound < tail_tol && (gamma < 1.0 || live_mass < tail_tol)) return total;
    }
    throw std::domain_error("expected_table_return: series did not converge");
}

}  // namespace dae
