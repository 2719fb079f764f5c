#pragma once

// Advantage and value estimators over sampled trajectories: the pi-centering
// wrapper, the direct-advantage losses (whole-trajectory and sub-trajectory
// bootstrapped forms), GAE, n-step targets and the Indirect / Duel baselines.
//
// Every loss is first computed on tables indexed by state (and action) with
// its exact gradient with respect to those tables; the model-level overloads
// then pull that gradient back through the approximator.

#include <string>
#include <vector>

#include "dae/approx.hpp"
#include "dae/mdp.hpp"

namespace dae {

/// raw - <raw, policy_row>: the unique pi-centered shift of `raw`.
inline Vector center(const Vector& raw, const Vector& policy_row) {
    if (raw.size() != policy_row.size()) throw std::invalid_argument("center: length mismatch");
    return raw.array() - raw.dot(policy_row);
}

/// Row-wise centering of an (S x A) table against the policy table.
inline Matrix center_rows(const Matrix& raw, const Matrix& probs) {
    if (raw.rows() != probs.rows() || raw.cols() != probs.cols())
        throw std::invalid_argument("center_rows: shape mismatch");
    const Vector mean = (raw.array() * probs.array()).rowwise().sum();
    return raw.colwise() - mean;
}

/// Adjoint of center_rows: maps d/dA_hat to d/draw (policy held fixed).
inline Matrix center_rows_backward(const Matrix& grad_centered, const Matrix& probs) {
    const Vector total = grad_centered.rowwise().sum();
    return grad_centered - probs.cwiseProduct(total.replicate(1, probs.cols()));
}

/// A raw per-(state, action) function together with the policy it is
/// centered against. values() satisfies sum_a pi(a|s) A_hat(s, a) = 0.
struct CenteredAdvantage {
    Matrix raw;
    Matrix probs;

    CenteredAdvantage(Matrix raw_values, const TabularPolicy& policy)
        : raw(std::move(raw_values)), probs(policy.probs()) {
        if (raw.rows() != probs.rows() || raw.cols() != probs.cols())
            throw std::invalid_argument("CenteredAdvantage: table shape does not match the policy");
    }
    CenteredAdvantage(Matrix raw_values, Matrix policy_probs) : raw(std::move(raw_values)), probs(std::move(policy_probs)) {
        if (raw.rows() != probs.rows() || raw.cols() != probs.cols())
            throw std::invalid_argument("CenteredAdvantage: table shape does not match the policy");
    }
    Matrix values() const { return center_rows(raw, probs); }
    Matrix pullback(const Matrix& grad_centered) const { return center_rows_backward(grad_centered, probs); }
};

struct GaeConfig {
    double lambda = 0.95;
    double discount = 0.99;

    void validate() const {
        if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("GaeConfig: lambda must lie in [0, 1]");
        if (!(discount >= 0.0 && discount <= 1.0)) throw std::invalid_argument("GaeConfig: discount must lie in [0, 1]");
    }
};

/// Loss value with gradients with respect to the evaluated tables.
struct TableLoss {
    double value = 0.0;
    Matrix grad_advantage;  // w.r.t. the raw (uncentered) advantage table, or Q for Indirect
    Vector grad_value;      // w.r.t. the state-value table (empty when unused)
};

/// Loss value with gradients with respect to model parameters.
struct LossReport {
    double value = 0.0;
    ParamVector grad_wrt_advantage_params;
    ParamVector grad_wrt_value_params;
};

enum class Estimator { Dae, Gae, Indirect, Duel, Mc };

inline Estimator parse_estimator(const std::string& name) {
    if (name == "dae") return Estimator::Dae;
    if (name == "gae") return Estimator::Gae;
    if (name == "indirect") return Estimator::Indirect;
    if (name == "duel") return Estimator::Duel;
    if (name == "mc") return Estimator::Mc;
    throw std::invalid_argument("unknown estimator '" + name + "' (expected dae, gae, indirect, duel or mc)");
}

inline std::string estimator_name(Estimator e) {
    switch (e) {
        case Estimator::Dae: return "dae";
        case Estimator::Gae: return "gae";
        case Estimator::Indirect: return "indirect";
        case Estimator::Duel: return "duel";
        case Estimator::Mc: return "mc";
    }
    return "?";
}

namespace detail {

inline double tail_value(const Trajectory& traj, const Vector& v_target) {
    return traj.bootstrap_state ? v_target[static_cast<Eigen::Index>(*traj.bootstrap_state)] : 0.0;
}

inline void require_nonempty(const std::vector<Trajectory>& trajs, const char* who) {
    if (trajs.empty()) throw std::invalid_argument(std::string(who) + ": no trajectories");
    for (const auto& t : trajs)
        if (t.steps.empty()) throw std::invalid_argument(std::string(who) + ": empty trajectory");
}

}  // namespace detail

/// y_t = sum_{k>=t} gamma^{k-t} r_k + gamma^{T-t} U(s_T) with U = 0 past termination.
inline Vector nstep_value_target(const Trajectory& traj, const Vector& v_target, double gamma) {
    const std::size_t T = traj.size();
    Vector y(static_cast<Eigen::Index>(T));
    double acc = detail::tail_value(traj, v_target);
    for (std::size_t t = T; t-- > 0;) {
        acc = traj.steps[t].reward + gamma * acc;
        y[static_cast<Eigen::Index>(t)] = acc;
    }
    return y;
}

/// GAE: A_t = sum_k (gamma lambda)^k delta_{t+k}, delta_t = r_t + gamma V(s_{t+1}) - V(s_t).
inline Vector gae_advantages(const Trajectory& traj, const Vector& value, const GaeConfig& cfg) {
    cfg.validate();
    const std::size_t T = traj.size();
    Vector adv(static_cast<Eigen::Index>(T));
    double next_value = detail::tail_value(traj, value);
    double acc = 0.0;
    for (std::size_t t = T; t-- > 0;) {
        const auto& st = traj.steps[t];
        const double v = value[static_cast<Eigen::Index>(st.state)];
        const double delta = st.reward + cfg.discount * next_value - v;
        acc = delta + cfg.discount * cfg.lambda * acc;
        adv[static_cast<Eigen::Index>(t)] = acc;
        next_value = v;
    }
    return adv;
}

/// Whole-trajectory loss (1/N) sum_tau (sum_t gamma^t (r_t - A_hat(s_t, a_t)))^2
/// over terminated trajectories.
inline TableLoss dae_mc_loss(const std::vector<Trajectory>& trajs, const CenteredAdvantage& advantage,
                             double gamma) {
    detail::require_nonempty(trajs, "dae_mc_loss");
    const Matrix a_hat = advantage.values();
    Matrix grad = Matrix::Zero(a_hat.rows(), a_hat.cols());
    const double inv_n = 1.0 / static_cast<double>(trajs.size());
    double loss = 0.0;
    for (const auto& traj : trajs) {
        if (!traj.terminated())
            throw std::invalid_argument("dae_mc_loss: truncated trajectory, use the bootstrapped loss instead");
        double ret = 0.0, disc = 1.0;
        for (const auto& st : traj.steps) {
            ret += disc * (st.reward - a_hat(st.state, st.action));
            disc *= gamma;
        }
        loss += inv_n * ret * ret;
        disc = 1.0;
        for (const auto& st : traj.steps) {
            grad(st.state, st.action) -= 2.0 * inv_n * disc * ret;
            disc *= gamma;
        }
    }
    return {loss, advantage.pullback(grad), Vector()};
}

/// Sub-trajectory bootstrapped loss:
///   (1/N) sum_tau sum_t' ( sum_{k>=t'} gamma^{k-t'} (r_k - A_hat_k) + gamma^{T-t'} U(s_T) - V_hat(s_t') )^2,
/// where U is the frozen target and U = 0 past termination.
inline TableLoss dae_subtraj_loss(const std::vector<Trajectory>& trajs, const CenteredAdvantage& advantage,
                                  const Vector& v_hat, const Vector& v_target, double gamma) {
    detail::require_nonempty(trajs, "dae_subtraj_loss");
    const Matrix a_hat = advantage.values();
    Matrix grad_a = Matrix::Zero(a_hat.rows(), a_hat.cols());
    Vector grad_v = Vector::Zero(v_hat.size());
    const double inv_n = 1.0 / static_cast<double>(trajs.size());
    double loss = 0.0;
    std::vector<double> resid;
    for (const auto& traj : trajs) {
        const std::size_t T = traj.size();
        resid.assign(T, 0.0);
        double acc = detail::tail_value(traj, v_target);
        for (std::size_t t = T; t-- > 0;) {
            const auto& st = traj.steps[t];
            acc = (st.reward - a_hat(st.state, st.action)) + gamma * acc;
            resid[t] = acc - v_hat[static_cast<Eigen::Index>(st.state)];
            loss += inv_n * resid[t] * resid[t];
            grad_v[static_cast<Eigen::Index>(st.state)] -= 2.0 * inv_n * resid[t];
        }
        // d/dA_hat_k = -2/N sum_{t'<=k} gamma^{k-t'} resid_t'
        double carry = 0.0;
        for (std::size_t k = 0; k < T; ++k) {
            carry = resid[k] + gamma * carry;
            const auto& st = traj.steps[k];
            grad_a(st.state, st.action) -= 2.0 * inv_n * carry;
        }
    }
    return {loss, advantage.pullback(grad_a), grad_v};
}

/// Indirect baseline: L_Q + L_V with n-step targets built from every position,
///   (1/N) sum_tau sum_t' [ (Q_hat(s_t', a_t') - y_t')^2 + (V_hat(s_t') - y_t')^2 ].
/// grad_advantage holds the gradient with respect to the Q table.
inline TableLoss indirect_baseline_losses(const std::vector<Trajectory>& trajs, const Matrix& q_hat,
                                          const Vector& v_hat, const Vector& v_target, double gamma) {
    detail::require_nonempty(trajs, "indirect_baseline_losses");
    Matrix grad_q = Matrix::Zero(q_hat.rows(), q_hat.cols());
    Vector grad_v = Vector::Zero(v_hat.size());
    const double inv_n = 1.0 / static_cast<double>(trajs.size());
    double loss = 0.0;
    for (const auto& traj : trajs) {
        const Vector y = nstep_value_target(traj, v_target, gamma);
        for (std::size_t t = 0; t < traj.size(); ++t) {
            const auto& st = traj.steps[t];
            const double eq = q_hat(st.state, st.action) - y[static_cast<Eigen::Index>(t)];
            const double ev = v_hat[static_cast<Eigen::Index>(st.state)] - y[static_cast<Eigen::Index>(t)];
            loss += inv_n * (eq * eq + ev * ev);
            grad_q(st.state, st.action) += 2.0 * inv_n * eq;
            grad_v[static_cast<Eigen::Index>(st.state)] += 2.0 * inv_n * ev;
        }
    }
    return {loss, grad_q, grad_v};
}

/// Duel baseline: (1/N) sum_tau sum_t' (V_hat(s_t') + A_hat(s_t', a_t') - y_t')^2 with
/// A_hat centered against the current policy.
inline TableLoss duel_baseline_loss(const std::vector<Trajectory>& trajs, const CenteredAdvantage& advantage,
                                    const Vector& v_hat, const Vector& v_target, double gamma) {
    detail::require_nonempty(trajs, "duel_baseline_loss");
    const Matrix a_hat = advantage.values();
    Matrix grad_a = Matrix::Zero(a_hat.rows(), a_hat.cols());
    Vector grad_v = Vector::Zero(v_hat.size());
    const double inv_n = 1.0 / static_cast<double>(trajs.size());
    double loss = 0.0;
    for (const auto& traj : trajs) {
        const Vector y = nstep_value_target(traj, v_target, gamma);
        for (std::size_t t = 0; t < traj.size(); ++t) {
            const auto& st = traj.steps[t];
            const double e = v_hat[static_cast<Eigen::Index>(st.state)] + a_hat(st.state, st.action) -
                             y[static_cast<Eigen::Index>(t)];
            loss += inv_n * e * e;
            grad_a(st.state, st.action) += 2.0 * inv_n * e;
            grad_v[static_cast<Eigen::Index>(st.state)] += 2.0 * inv_n * e;
        }
    }
    return {loss, advantage.pullback(grad_a), grad_v};
}

/// (1/N) sum_tau sum_t (V_hat(s_t) - y_t)^2 against per-step targets.
inline TableLoss value_regression_loss(const std::vector<Trajectory>& trajs, const std::vector<Vector>& targets,
                                       const Vector& v_hat) {
    detail::require_nonempty(trajs, "value_regression_loss");
    if (targets.size() != trajs.size()) throw std::invalid_argument("value_regression_loss: target count mismatch");
    Vector grad_v = Vector::Zero(v_hat.size());
    const double inv_n = 1.0 / static_cast<double>(trajs.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < trajs.size(); ++i)
        for (std::size_t t = 0; t < trajs[i].size(); ++t) {
            const auto s = static_cast<Eigen::Index>(trajs[i].steps[t].state);
            const double e = v_hat[s] - targets[i][static_cast<Eigen::Index>(t)];
            loss += inv_n * e * e;
            grad_v[s] += 2.0 * inv_n * e;
        }
    return {loss, Matrix(), grad_v};
}

// ---------------------------------------------------------------------------
// Model-level overloads. Models take one-hot state encodings; advantage and Q
// models emit one output per action, value models a single output.

namespace detail {

template <class Model>
Matrix eval_table(const Model& model, const ParamVector& params, std::size_t n_states) {
    return model.forward_batch(params, all_states(n_states)).transpose();
}

template <class Model>
ParamVector pull_table(const Model& model, const ParamVector& params, std::size_t n_states, const Matrix& grad_table) {
    return model.backward_batch(params, all_states(n_states), grad_table.transpose());
}

}  // namespace detail

template <class AdvModel>
LossReport dae_mc_loss(const std::vector<Trajectory>& trajs, const AdvModel& adv_model, const ParamVector& adv_params,
                       const TabularPolicy& policy, double gamma) {
    const std::size_t S = policy.n_states();
    const CenteredAdvantage adv(detail::eval_table(adv_model, adv_params, S), policy);
    const TableLoss tl = dae_mc_loss(trajs, adv, gamma);
    return {tl.value, detail::pull_table(adv_model, adv_params, S, tl.grad_advantage), ParamVector{}};
}

template <class AdvModel, class ValueModel>
LossReport dae_subtraj_loss(const std::vector<Trajectory>& trajs, const AdvModel& adv_model,
                            const ParamVector& adv_params, const TabularPolicy& policy, const ValueModel& v_model,
                            const ParamVector& v_params, const Vector& v_target, double gamma) {
    const std::size_t S = policy.n_states();
    const CenteredAdvantage adv(detail::eval_table(adv_model, adv_params, S), policy);
    const Vector v_hat = detail::eval_table(v_model, v_params, S).col(0);
    const TableLoss tl = dae_subtraj_loss(trajs, adv, v_hat, v_target, gamma);
    return {tl.value, detail::pull_table(adv_model, adv_params, S, tl.grad_advantage),
            detail::pull_table(v_model, v_params, S, Matrix(tl.grad_value))};
}

template <class QModel, class ValueModel>
LossReport indirect_baseline_losses(const std::vector<Trajectory>& trajs, const QModel& q_model,
                                    const ParamVector& q_params, const ValueModel& v_model,
                                    const ParamVector& v_params, const Vector& v_target, double gamma) {
    const std::size_t S = static_cast<std::size_t>(v_target.size());
    const Matrix q_hat = detail::eval_table(q_model, q_params, S);
    const Vector v_hat = detail::eval_table(v_model, v_params, S).col(0);
    const TableLoss tl = indirect_baseline_losses(trajs, q_hat, v_hat, v_target, gamma);
    return {tl.value, detail::pull_table(q_model, q_params, S, tl.grad_advantage),
            detail::pull_table(v_model, v_params, S, Matrix(tl.grad_value))};
}

template <class AdvModel, class ValueModel>
LossReport duel_baseline_loss(const std::vector<Trajectory>& trajs, const AdvModel& adv_model,
                              const ParamVector& adv_params, const TabularPolicy& policy, const ValueModel& v_model,
                              const ParamVector& v_params, const Vector& v_target, double gamma) {
    const std::size_t S = policy.n_states();
    const CenteredAdvantage adv(detail::eval_table(adv_model, adv_params, S), policy);
    const Vector v_hat = detail::eval_table(v_model, v_params, S).col(0);
    const TableLoss tl = duel_baseline_loss(trajs, adv, v_hat, v_target, gamma);
    return {tl.value, detail::pull_table(adv_model, adv_params, S, tl.grad_advantage),
            detail::pull_table(v_model, v_params, S, Matrix(tl.grad_value))};
}

}  // namespace dae
