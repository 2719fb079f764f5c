#pragma once

// Training loops: the tabular-policy actor-critic used on the chain, and PPO
// with a shared advantage/policy/value network trained by the sub-trajectory
// loss. Both are deterministic in (config, seed): every random draw comes from
// a counter-based stream keyed by seed, iteration and actor.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <filesystem>
#include <functional>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "dae/approx.hpp"
#include "dae/estimators.hpp"
#include "dae/mdp.hpp"
#include "dae/mdp_io.hpp"
#include "dae/rng.hpp"

namespace dae {

// ---------------------------------------------------------------------------
// Policy-gradient pieces

/// One sampled (state, action) pair weighted by its advantage estimate.
struct WeightedPair {
    std::size_t state;
    std::size_t action;
    double weight;
};

/// Gradient w.r.t. the logits of J = (1/N) sum_i w_i log pi(a_i|s_i).
inline Matrix policy_gradient(const TabularPolicy& policy, const std::vector<WeightedPair>& samples) {
    Matrix grad = Matrix::Zero(policy.n_states(), policy.n_actions());
    if (samples.empty()) return grad;
    const double inv_n = 1.0 / static_cast<double>(samples.size());
    for (const auto& x : samples) {
        if (!std::isfinite(x.weight)) throw std::invalid_argument("policy_gradient: non-finite advantage weight");
        grad.row(x.state) -= inv_n * x.weight * policy.probs().row(x.state);
        grad(x.state, x.action) += inv_n * x.weight;
    }
    return grad;
}

/// J itself, for reporting and finite-difference checks.
inline double policy_surrogate(const TabularPolicy& policy, const std::vector<WeightedPair>& samples) {
    if (samples.empty()) return 0.0;
    double j = 0.0;
    for (const auto& x : samples) j += x.weight * std::log(policy.prob(x.state, x.action));
    return j / static_cast<double>(samples.size());
}

/// Plain gradient ascent on J.
inline TabularPolicy policy_gradient_step(const TabularPolicy& policy, const std::vector<WeightedPair>& samples,
                                          double lr) {
    return TabularPolicy(policy.logits() + lr * policy_gradient(policy, samples));
}

/// min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A); maximised by PPO.
inline double ppo_clip_loss(double ratio, double advantage, double epsilon) {
    if (!(ratio > 0.0)) throw std::invalid_argument("ppo_clip_loss: ratio must be positive");
    return std::min(ratio * advantage, std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon) * advantage);
}

/// d/dratio of ppo_clip_loss; zero where the clipped branch is selected.
inline double ppo_clip_slope(double ratio, double advantage, double epsilon) {
    const double clipped = std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon);
    return ratio * advantage <= clipped * advantage ? advantage : 0.0;
}

/// sum_a pi(a) log pi(a) (negative entropy), with 0 log 0 = 0.
inline double entropy_term(const Eigen::Ref<const Eigen::RowVectorXd>& probs) {
    double h = 0.0;
    for (Eigen::Index a = 0; a < probs.size(); ++a)
        if (probs[a] > 0.0) h += probs[a] * std::log(probs[a]);
    return h;
}

// ---------------------------------------------------------------------------
// Metrics

struct MetricsRow {
    std::size_t iteration = 0;
    std::size_t frames = 0;
    double mse_advantage = 0.0;
    double exact_return = 0.0;
    double mean_episode_return = 0.0;
    double loss_policy = 0.0;
    double loss_value = 0.0;
    double entropy = 0.0;
};

struct EpisodeRecord {
    std::size_t iteration;
    double score;
};

struct TrainingMetrics {
    std::vector<MetricsRow> rows;
    std::vector<EpisodeRecord> episodes;
    double wall_seconds = 0.0;  // not part of the CSV, which must be reproducible

    std::vector<double> episode_returns() const {
        std::vector<double> out;
        out.reserve(episodes.size());
        for (const auto& e : episodes) out.push_back(e.score);
        return out;
    }
};

inline const char* kMetricsHeader =
    "iteration,frames,mse_advantage,exact_return,mean_episode_return,loss_policy,loss_value,entropy";

inline void write_metrics_csv(std::ostream& os, const TrainingMetrics& m) {
    os << kMetricsHeader << '\n';
    for (const auto& r : m.rows)
        os << r.iteration << ',' << r.frames << ',' << format_double(r.mse_advantage) << ','
           << format_double(r.exact_return) << ',' << format_double(r.mean_episode_return) << ','
           << format_double(r.loss_policy) << ',' << format_double(r.loss_value) << ',' << format_double(r.entropy)
           << '\n';
}

inline void write_episodes_csv(std::ostream& os, const TrainingMetrics& m) {
    os << "iteration,score\n";
    for (const auto& e : m.episodes) os << e.iteration << ',' << format_double(e.score) << '\n';
}

// ---------------------------------------------------------------------------
// Checkpoint helpers: named tables packed into one ParamVector.

namespace detail {

class Packer {
public:
    void add(const std::string& name, const Matrix& m) { items_.emplace_back(name, m); }
    void add_vector(const std::string& name, const Vector& v) { items_.emplace_back(name, Matrix(v)); }
    void add_scalar(const std::string& name, double x) { items_.emplace_back(name, Matrix::Constant(1, 1, x)); }

    ParamVector finish() const {
        std::vector<Segment> layout;
        for (const auto& [name, m] : items_)
            layout.push_back({name, 0, static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
        ParamVector p = make_params(std::move(layout));
        for (const auto& [name, m] : items_)
            if (m.size() > 0) p.block(name) = m;
        return p;
    }

private:
    std::vector<std::pair<std::string, Matrix>> items_;
};

inline Matrix metrics_table(const TrainingMetrics& m) {
    Matrix t(static_cast<Eigen::Index>(m.rows.size()), 8);
    for (std::size_t i = 0; i < m.rows.size(); ++i) {
        const auto& r = m.rows[i];
        t.row(static_cast<Eigen::Index>(i)) << static_cast<double>(r.iteration), static_cast<double>(r.frames),
            r.mse_advantage, r.exact_return, r.mean_episode_return, r.loss_policy, r.loss_value, r.entropy;
    }
    return t;
}

inline Matrix episodes_table(const TrainingMetrics& m) {
    Matrix t(static_cast<Eigen::Index>(m.episodes.size()), 2);
    for (std::size_t i = 0; i < m.episodes.size(); ++i)
        t.row(static_cast<Eigen::Index>(i)) << static_cast<double>(m.episodes[i].iteration), m.episodes[i].score;
    return t;
}

inline TrainingMetrics unpack_metrics(const ParamVector& p) {
    TrainingMetrics m;
    const Matrix rows = p.block("metrics");
    for (Eigen::Index i = 0; i < rows.rows(); ++i)
        m.rows.push_back({static_cast<std::size_t>(rows(i, 0)), static_cast<std::size_t>(rows(i, 1)), rows(i, 2),
                          rows(i, 3), rows(i, 4), rows(i, 5), rows(i, 6), rows(i, 7)});
    const Matrix eps = p.block("episodes");
    for (Eigen::Index i = 0; i < eps.rows(); ++i) m.episodes.push_back({static_cast<std::size_t>(eps(i, 0)), eps(i, 1)});
    return m;
}

inline void pack_adam(Packer& pk, const std::string& prefix, const AdamState& st) {
    pk.add_vector(prefix + ".m", st.first_moment);
    pk.add_vector(prefix + ".v", st.second_moment);
    pk.add_scalar(prefix + ".step", static_cast<double>(st.step));
}

inline void unpack_adam(const ParamVector& p, const std::string& prefix, AdamState& st) {
    st.first_moment = p.block(prefix + ".m");
    st.second_moment = p.block(prefix + ".v");
    st.step = static_cast<std::size_t>(p.block(prefix + ".step")(0, 0));
}

inline ParamVector with_values(const ParamVector& prototype, const Vector& values) {
    if (values.size() != prototype.values.size()) throw std::runtime_error("checkpoint: parameter count mismatch");
    ParamVector p = prototype;
    p.values = values;
    return p;
}

inline void save_params_file(const std::filesystem::path& path, const ParamVector& p) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    write_params(os, p);
}

inline ParamVector load_params_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    return read_params(is);
}

inline double mean_or(const std::vector<double>& xs, double fallback) {
    if (xs.empty()) return fallback;
    return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

/// Splits [0, n) into contiguous chunks and runs f(i) on up to `threads` workers.
template <class F>
void parallel_for(std::size_t n, std::size_t threads, F&& f) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) f(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t w = 0; w < threads; ++w)
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += threads) f(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

/// Mean policy entropy (positive) over the visited states.
inline double mean_entropy(const Matrix& probs, const std::vector<std::size_t>& states) {
    if (states.empty()) return 0.0;
    double h = 0.0;
    for (auto s : states) h -= entropy_term(probs.row(static_cast<Eigen::Index>(s)));
    return h / static_cast<double>(states.size());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Actor-critic with a tabular softmax policy

struct ActorCriticConfig {
    std::size_t iterations = 1000;
    std::size_t trajectories_per_iter = 4;
    std::size_t value_grads_per_iter = 4;
    std::size_t policy_grads_per_iter = 1;
    double discount = 0.99;
    double lr_value = 1e-3;
    double lr_policy = 1e-2;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-3;
    Estimator estimator = Estimator::Dae;
    double gae_lambda = 0.95;
    std::vector<std::size_t> hidden = {256, 256};
    std::size_t max_episode_steps = 100000;
    std::uint64_t seed = 0;

    void validate() const {
        if (trajectories_per_iter < 1 || value_grads_per_iter < 1 || policy_grads_per_iter < 1)
            throw std::invalid_argument("ActorCriticConfig: per-iteration counts must be >= 1");
        if (!(lr_value > 0.0) || !(lr_policy > 0.0))
            throw std::invalid_argument("ActorCriticConfig: learning rates must be positive");
        if (!(discount >= 0.0 && discount <= 1.0))
            throw std::invalid_argument("ActorCriticConfig: discount must lie in [0, 1]");
        if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0))
            throw std::invalid_argument("ActorCriticConfig: gae_lambda must lie in [0, 1]");
        if (max_episode_steps < 1) throw std::invalid_argument("ActorCriticConfig: max_episode_steps must be >= 1");
    }
};

/// The three-phase loop: sample episodes, fit the estimator, take a policy
/// gradient step weighted by the estimated advantages. The value/advantage
/// network has one output per action followed by a state-value output.
class ActorCriticTrainer {
public:
    ActorCriticTrainer(const FiniteMdp& mdp, ActorCriticConfig cfg)
        : mdp_(mdp), cfg_(std::move(cfg)), net_({mdp.n_states(), mdp.n_actions() + 1, cfg_.hidden}),
          logits_(Matrix::Zero(mdp.n_states(), mdp.n_actions())) {
        cfg_.validate();
        if (!terminates_almost_surely(mdp_, TabularPolicy(logits_)))
            throw std::invalid_argument("actor-critic training requires an episodic MDP");
        params_ = net_.init_orthogonal(cfg_.seed, std::sqrt(2.0), {{mdp.n_actions(), 0.01}, {1, 1.0}});
        value_opt_ = AdamState::for_params(params_, cfg_.lr_value, cfg_.adam_epsilon, cfg_.adam_beta1, cfg_.adam_beta2);
        policy_opt_ = {0, Vector::Zero(logits_.size()), Vector::Zero(logits_.size()), cfg_.adam_beta1,
                       cfg_.adam_beta2, cfg_.adam_epsilon, cfg_.lr_policy};
    }

    const ActorCriticConfig& config() const noexcept { return cfg_; }
    TabularPolicy policy() const { return TabularPolicy(logits_); }
    const ParamVector& params() const noexcept { return params_; }
    const TrainingMetrics& metrics() const noexcept { return metrics_; }
    std::size_t iteration() const noexcept { return iteration_; }
    bool done() const noexcept { return iteration_ >= cfg_.iterations; }

    /// Called with (iteration, policy) before each iteration's sampling.
    std::function<void(std::size_t, const TabularPolicy&)> on_policy;

    void run() {
        const auto start = std::chrono::steady_clock::now();
        while (!done()) step();
        metrics_.wall_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }

    void step() {
        const std::size_t S = mdp_.n_states(), A = mdp_.n_actions();
        const TabularPolicy pi(logits_);
        if (on_policy) on_policy(iteration_, pi);

        // (1) sample
        std::vector<Trajectory> batch;
        std::vector<double> mu(mdp_.initial_dist().data(), mdp_.initial_dist().data() + S);
        for (std::size_t j = 0; j < cfg_.trajectories_per_iter; ++j) {
            CounterRng rng(stream_key(cfg_.seed, {0x6163ULL, iteration_, j}));
            const std::size_t s0 = rng.categorical(mu);
            batch.push_back(rollout(mdp_, pi, s0, cfg_.max_episode_steps, rng));
        }
        std::size_t steps = 0;
        std::vector<double> returns;
        for (const auto& t : batch) {
            steps += t.size();
            if (t.terminated()) {
                returns.push_back(t.undiscounted_return());
                metrics_.episodes.push_back({iteration_, returns.back()});
            }
        }
        frames_ += steps;

        // (2) fit the estimator on the whole batch
        const Vector target = value_column(params_);
        double value_loss = 0.0;
        for (std::size_t k = 0; k < cfg_.value_grads_per_iter; ++k) {
            ParamVector grad = params_.zeros_like();
            value_loss = estimator_loss(batch, pi, params_, target, &grad);
            adam_step(value_opt_, params_, grad);
        }

        // (3) advantages of the sampled pairs, after the fit
        const std::vector<WeightedPair> samples = advantage_samples(batch, pi);
        const Matrix truth = solve_policy(mdp_, pi, cfg_.discount, 1e-10).adv;
        double mse = 0.0;
        std::vector<std::size_t> states;
        for (const auto& x : samples) {
            mse += std::pow(x.weight - truth(x.state, x.action), 2);
            states.push_back(x.state);
        }
        mse /= static_cast<double>(samples.size());
        const double entropy = detail::mean_entropy(pi.probs(), states);

        double surrogate = 0.0;
        for (std::size_t k = 0; k < cfg_.policy_grads_per_iter; ++k) {
            const TabularPolicy current(logits_);
            surrogate = policy_surrogate(current, samples);
            const Matrix g = policy_gradient(current, samples);
            ParamVector lp{Vector(Eigen::Map<const Vector>(logits_.data(), logits_.size())), {}};
            ParamVector lg{-Vector(Eigen::Map<const Vector>(g.data(), g.size())), {}};
            adam_step(policy_opt_, lp, lg);
            logits_ = Eigen::Map<const Matrix>(lp.values.data(), static_cast<Eigen::Index>(S), static_cast<Eigen::Index>(A));
        }

        MetricsRow row;
        row.iteration = iteration_;
        row.frames = frames_;
        row.mse_advantage = mse;
        row.exact_return = expected_return(mdp_, TabularPolicy(logits_), true);
        row.mean_episode_return =
            detail::mean_or(returns, metrics_.rows.empty() ? 0.0 : metrics_.rows.back().mean_episode_return);
        row.loss_policy = -surrogate;
        row.loss_value = value_loss;
        row.entropy = entropy;
        metrics_.rows.push_back(row);
        ++iteration_;
    }

    /// Advantage estimates of every sampled pair under the current fit.
    std::vector<WeightedPair> advantage_samples(const std::vector<Trajectory>& batch, const TabularPolicy& pi) const {
        const std::size_t A = mdp_.n_actions();
        const Matrix out = net_.forward_batch(params_, all_states(mdp_.n_states())).transpose();
        const Matrix raw = out.leftCols(static_cast<Eigen::Index>(A));
        const Vector v = out.col(static_cast<Eigen::Index>(A));
        std::vector<WeightedPair> samples;
        if (cfg_.estimator == Estimator::Gae) {
            for (const auto& t : batch) {
                const Vector adv = gae_advantages(t, v, {cfg_.gae_lambda, cfg_.discount});
                for (std::size_t k = 0; k < t.size(); ++k)
                    samples.push_back({t.steps[k].state, t.steps[k].action, adv[static_cast<Eigen::Index>(k)]});
            }
            return samples;
        }
        const Matrix table = cfg_.estimator == Estimator::Indirect ? Matrix(raw.colwise() - v)
                                                                   : CenteredAdvantage(raw, pi).values();
        for (const auto& t : batch)
            for (const auto& st : t.steps) samples.push_back({st.state, st.action, table(st.state, st.action)});
        return samples;
    }

    ParamVector checkpoint() const {
        detail::Packer pk;
        pk.add("logits", logits_);
        pk.add_vector("net", params_.values);
        detail::pack_adam(pk, "adam_net", value_opt_);
        detail::pack_adam(pk, "adam_policy", policy_opt_);
        pk.add_scalar("iteration", static_cast<double>(iteration_));
        pk.add_scalar("frames", static_cast<double>(frames_));
        pk.add_scalar("seed", static_cast<double>(cfg_.seed));
        pk.add("metrics", detail::metrics_table(metrics_));
        pk.add("episodes", detail::episodes_table(metrics_));
        return pk.finish();
    }

    void restore(const ParamVector& ck) {
        const Matrix logits = ck.block("logits");
        if (logits.rows() != logits_.rows() || logits.cols() != logits_.cols())
            throw std::runtime_error("checkpoint: policy shape does not match the environment");
        if (static_cast<std::uint64_t>(ck.block("seed")(0, 0)) != cfg_.seed)
            throw std::runtime_error("checkpoint: seed does not match the configuration");
        logits_ = logits;
        params_ = detail::with_values(params_, ck.block("net"));
        detail::unpack_adam(ck, "adam_net", value_opt_);
        detail::unpack_adam(ck, "adam_policy", policy_opt_);
        iteration_ = static_cast<std::size_t>(ck.block("iteration")(0, 0));
        frames_ = static_cast<std::size_t>(ck.block("frames")(0, 0));
        metrics_ = detail::unpack_metrics(ck);
    }

private:
    Vector value_column(const ParamVector& p) const {
        return net_.forward_batch(p, all_states(mdp_.n_states())).row(static_cast<Eigen::Index>(mdp_.n_actions())).transpose();
    }

    /// Loss of the configured estimator on the batch; writes d loss / d params into `grad`.
    double estimator_loss(const std::vector<Trajectory>& batch, const TabularPolicy& pi, const ParamVector& p,
                          const Vector& target, ParamVector* grad) const {
        const std::size_t S = mdp_.n_states(), A = mdp_.n_actions();
        const Matrix inputs = all_states(S);
        const Matrix out = net_.forward_batch(p, inputs).transpose();
        const Matrix raw = out.leftCols(static_cast<Eigen::Index>(A));
        const Vector v = out.col(static_cast<Eigen::Index>(A));
        TableLoss tl;
        switch (cfg_.estimator) {
            case Estimator::Dae:
                tl = dae_subtraj_loss(batch, CenteredAdvantage(raw, pi), v, target, cfg_.discount);
                break;
            case Estimator::Mc:
                tl = dae_mc_loss(batch, CenteredAdvantage(raw, pi), cfg_.discount);
                break;
            case Estimator::Duel:
                tl = duel_baseline_loss(batch, CenteredAdvantage(raw, pi), v, target, cfg_.discount);
                break;
            case Estimator::Indirect:
                tl = indirect_baseline_losses(batch, raw, v, target, cfg_.discount);
                break;
            case Estimator::Gae: {
                std::vector<Vector> ys;
                for (const auto& t : batch) ys.push_back(nstep_value_target(t, target, cfg_.discount));
                tl = value_regression_loss(batch, ys, v);
                break;
            }
        }
        Matrix out_grad = Matrix::Zero(static_cast<Eigen::Index>(A + 1), static_cast<Eigen::Index>(S));
        if (tl.grad_advantage.size() > 0) out_grad.topRows(static_cast<Eigen::Index>(A)) = tl.grad_advantage.transpose();
        if (tl.grad_value.size() > 0) out_grad.row(static_cast<Eigen::Index>(A)) = tl.grad_value.transpose();
        *grad = net_.backward_batch(p, inputs, out_grad);
        return tl.value;
    }

    const FiniteMdp& mdp_;
    ActorCriticConfig cfg_;
    DenseNet net_;
    ParamVector params_;
    Matrix logits_;
    AdamState value_opt_;
    AdamState policy_opt_;
    std::size_t iteration_ = 0;
    std::size_t frames_ = 0;
    TrainingMetrics metrics_;
};

inline TrainingMetrics run_actor_critic(const FiniteMdp& mdp, const ActorCriticConfig& cfg) {
    ActorCriticTrainer trainer(mdp, cfg);
    trainer.run();
    return trainer.metrics();
}


// ---------------------------------------------------------------------------
// PPO with DAE on a shared network

struct PpoConfig {
    std::size_t iterations = 200;
    std::size_t n_actors = 16;
    std::size_t n_steps = 128;
    std::size_t n_epochs = 6;
    std::size_t batch_trajectories = 2;
    double clip_epsilon = 0.1;
    double beta_v = 1.5;
    double beta_entropy = 0.01;
    double discount = 0.99;
    double learning_rate = 2.5e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-5;
    bool anneal = true;
    std::vector<std::size_t> hidden = {64, 64};
    std::size_t threads = 1;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_actors < 1 || n_steps < 1) throw std::invalid_argument("PpoConfig: n_actors and n_steps must be >= 1");
        if (!(clip_epsilon > 0.0 && clip_epsilon < 1.0))
            throw std::invalid_argument("PpoConfig: clip_epsilon must lie in (0, 1)");
        if (batch_trajectories < 1 || n_actors % batch_trajectories != 0)
            throw std::invalid_argument("PpoConfig: batch_trajectories must divide n_actors");
        if (!(learning_rate > 0.0)) throw std::invalid_argument("PpoConfig: learning_rate must be positive");
        if (!(discount >= 0.0 && discount <= 1.0)) throw std::invalid_argument("PpoConfig: discount must lie in [0, 1]");
        if (beta_v < 0.0 || beta_entropy < 0.0) throw std::invalid_argument("PpoConfig: loss weights must be >= 0");
    }
};

/// One actor's n-step segment, split at episode ends. Only the last piece can
/// be truncated, in which case it bootstraps from the frozen value snapshot.
struct ActorRollout {
    std::vector<Trajectory> pieces;
    std::vector<double> behavior_prob;  // mu(a|s) per step, in order across pieces
    std::vector<double> finished_returns;

    std::size_t n_steps() const noexcept { return behavior_prob.size(); }
};

/// Where an actor stands between iterations.
struct ActorState {
    std::size_t state = 0;
    double running_return = 0.0;
};

/// Output layout of the shared network: [raw advantage (A) | policy logits (A) | value (1)].
struct SharedHeads {
    Matrix raw_advantage;  // S x A
    Matrix logits;         // S x A
    Vector value;          // S

    static SharedHeads evaluate(const DenseNet& net, const ParamVector& params) {
        const std::size_t A = (net.output_dim() - 1) / 2;
        const Matrix out = net.forward_batch(params, all_states(net.input_dim())).transpose();
        const auto a = static_cast<Eigen::Index>(A);
        return {out.leftCols(a), out.middleCols(a, a), out.col(2 * a)};
    }
};

/// Quantities held fixed inside one PPO update: the policy the advantage head
/// is centered against, and the (gradient-stopped) advantage weighting L_pi.
struct PpoDetached {
    Matrix centering_probs;
    Matrix advantage;
};

inline PpoDetached ppo_detached(const DenseNet& net, const ParamVector& params) {
    const SharedHeads h = SharedHeads::evaluate(net, params);
    Matrix probs = softmax_rows(h.logits);
    Matrix adv = center_rows(h.raw_advantage, probs);
    return {std::move(probs), std::move(adv)};
}

struct PpoCoefficients {
    double clip_epsilon = 0.1;
    double beta_v = 1.5;
    double beta_entropy = 0.01;
    double discount = 0.99;
};

struct PpoLoss {
    double total = 0.0;
    double policy = 0.0;   // L_pi
    double value = 0.0;    // L_A
    double entropy = 0.0;  // H_pi = mean sum pi log pi
    ParamVector grad;
};

/// L_pi + beta_v L_A + beta_ent H_pi on a minibatch and its gradient. `fixed`
/// and `v_target` are treated as constants. L_A is the bootstrapped
/// sub-trajectory loss averaged per sampled step.
inline PpoLoss ppo_loss(const DenseNet& net, const ParamVector& params, const std::vector<const ActorRollout*>& batch,
                        const PpoDetached& fixed, const Vector& v_target, const PpoCoefficients& c) {
    const std::size_t A = (net.output_dim() - 1) / 2;
    const auto Ai = static_cast<Eigen::Index>(A);
    const auto S = static_cast<Eigen::Index>(net.input_dim());
    if (net.output_dim() != 2 * A + 1) throw std::invalid_argument("ppo_loss: network must have 2A+1 outputs");
    const SharedHeads heads = SharedHeads::evaluate(net, params);
    const Matrix probs = softmax_rows(heads.logits);

    std::vector<Trajectory> pieces;
    std::size_t m = 0;
    for (const auto* r : batch) {
        pieces.insert(pieces.end(), r->pieces.begin(), r->pieces.end());
        m += r->n_steps();
    }
    if (m == 0) throw std::invalid_argument("ppo_loss: empty minibatch");
    const double inv_m = 1.0 / static_cast<double>(m);

    PpoLoss out;
    Matrix g_logits = Matrix::Zero(S, Ai);
    for (const auto* r : batch) {
        std::size_t k = 0;
        for (const auto& piece : r->pieces)
            for (const auto& st : piece.steps) {
                const auto s = static_cast<Eigen::Index>(st.state);
                const auto a = static_cast<Eigen::Index>(st.action);
                const double ratio = probs(s, a) / r->behavior_prob[k++];
                const double adv = fixed.advantage(s, a);
                out.policy -= inv_m * ppo_clip_loss(ratio, adv, c.clip_epsilon);
                // d ratio / d logit_b = ratio (1[b = a] - pi_b)
                const double w = -inv_m * ppo_clip_slope(ratio, adv, c.clip_epsilon) * ratio;
                g_logits.row(s) -= w * probs.row(s);
                g_logits(s, a) += w;
                const double h = entropy_term(probs.row(s));
                out.entropy += inv_m * h;
                for (Eigen::Index b = 0; b < Ai; ++b)
                    if (probs(s, b) > 0.0)
                        g_logits(s, b) += c.beta_entropy * inv_m * probs(s, b) * (std::log(probs(s, b)) - h);
            }
    }

    const double scale = static_cast<double>(pieces.size()) * inv_m;
    const TableLoss la = dae_subtraj_loss(pieces, CenteredAdvantage(heads.raw_advantage, fixed.centering_probs),
                                          heads.value, v_target, c.discount);
    out.value = scale * la.value;
    out.total = out.policy + c.beta_v * out.value + c.beta_entropy * out.entropy;

    Matrix out_grad(2 * Ai + 1, S);
    out_grad.topRows(Ai) = (c.beta_v * scale) * la.grad_advantage.transpose();
    out_grad.middleRows(Ai, Ai) = g_logits.transpose();
    out_grad.row(2 * Ai) = (c.beta_v * scale) * la.grad_value.transpose();
    out.grad = net.backward_batch(params, all_states(static_cast<std::size_t>(S)), out_grad);
    return out;
}

/// Runs one actor for `n_steps` steps from `actor`, using the frozen
/// sampling policy. Terminated episodes reset from the initial distribution.
inline ActorRollout collect_segment(const FiniteMdp& mdp, const Matrix& probs, ActorState& actor, std::size_t n_steps,
                                    CounterRng& rng) {
    const std::size_t A = mdp.n_actions();
    std::vector<double> mu(mdp.initial_dist().data(), mdp.initial_dist().data() + mdp.n_states());
    ActorRollout out;
    Trajectory piece;
    std::vector<double> pa(A);
    for (std::size_t k = 0; k < n_steps; ++k) {
        const std::size_t s = actor.state;
        for (std::size_t a = 0; a < A; ++a) pa[a] = probs(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a));
        const std::size_t a = rng.categorical(pa);
        const double r = mdp.is_terminal(s) ? 0.0 : mdp.r(s, a);
        piece.steps.push_back({s, a, r});
        out.behavior_prob.push_back(pa[a]);
        actor.running_return += r;
        const std::size_t next = mdp.is_terminal(s) ? s : rng.categorical(mdp.transition_row(s, a));
        if (mdp.is_terminal(s) || mdp.is_terminal(next)) {
            out.pieces.push_back(std::move(piece));
            piece = Trajectory{};
            out.finished_returns.push_back(actor.running_return);
            actor.running_return = 0.0;
            actor.state = rng.categorical(mu);
        } else {
            actor.state = next;
        }
    }
    if (!piece.steps.empty()) {
        piece.bootstrap_state = actor.state;
        out.pieces.push_back(std::move(piece));
    }
    return out;
}

/// Exact return used in the metrics: undiscounted when the policy terminates
/// almost surely, discounted otherwise.
inline double exact_score(const FiniteMdp& mdp, const TabularPolicy& pi) {
    return expected_return(mdp, pi, terminates_almost_surely(mdp, pi));
}

class PpoDaeTrainer {
public:
    PpoDaeTrainer(const FiniteMdp& mdp, PpoConfig cfg)
        : mdp_(mdp), cfg_(std::move(cfg)), net_({mdp.n_states(), 2 * mdp.n_actions() + 1, cfg_.hidden}) {
        cfg_.validate();
        const std::size_t A = mdp.n_actions();
        params_ = net_.init_orthogonal(cfg_.seed, std::sqrt(2.0), {{A, 0.01}, {A, 0.01}, {1, 1.0}});
        opt_ = AdamState::for_params(params_, cfg_.learning_rate, cfg_.adam_epsilon, cfg_.adam_beta1, cfg_.adam_beta2);
        std::vector<double> mu(mdp.initial_dist().data(), mdp.initial_dist().data() + mdp.n_states());
        actors_.resize(cfg_.n_actors);
        for (std::size_t j = 0; j < cfg_.n_actors; ++j) {
            CounterRng rng(stream_key(cfg_.seed, {0x7265736574ULL, j}));
            actors_[j].state = rng.categorical(mu);
        }
    }

    const PpoConfig& config() const noexcept { return cfg_; }
    const DenseNet& net() const noexcept { return net_; }
    const ParamVector& params() const noexcept { return params_; }
    const TrainingMetrics& metrics() const noexcept { return metrics_; }
    std::size_t iteration() const noexcept { return iteration_; }
    bool done() const noexcept { return iteration_ >= cfg_.iterations; }
    TabularPolicy policy() const { return TabularPolicy(SharedHeads::evaluate(net_, params_).logits); }

    std::function<void(std::size_t, const TabularPolicy&)> on_policy;

    void run() {
        const auto start = std::chrono::steady_clock::now();
        while (!done()) step();
        metrics_.wall_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }

    void step() {
        const double frac =
            cfg_.anneal ? 1.0 - static_cast<double>(iteration_) / static_cast<double>(cfg_.iterations) : 1.0;
        opt_.learning_rate = cfg_.learning_rate * frac;
        PpoCoefficients coeffs{cfg_.clip_epsilon * frac, cfg_.beta_v, cfg_.beta_entropy, cfg_.discount};

        const SharedHeads snap = SharedHeads::evaluate(net_, params_);
        const TabularPolicy pi(snap.logits);
        if (on_policy) on_policy(iteration_, pi);
        const Vector u = snap.value;  // frozen bootstrap target U

        std::vector<ActorRollout> rollouts(cfg_.n_actors);
        detail::parallel_for(cfg_.n_actors, cfg_.threads, [&](std::size_t j) {
            CounterRng rng(stream_key(cfg_.seed, {0x726f6c6cULL, iteration_, j}));
            rollouts[j] = collect_segment(mdp_, pi.probs(), actors_[j], cfg_.n_steps, rng);
        });

        std::vector<double> finished;
        std::vector<std::size_t> states;
        const Matrix a_hat = center_rows(snap.raw_advantage, pi.probs());
        const Matrix truth = solve_policy(mdp_, pi, cfg_.discount, 1e-10).adv;
        double mse = 0.0;
        for (const auto& r : rollouts) {
            for (double g : r.finished_returns) {
                finished.push_back(g);
                metrics_.episodes.push_back({iteration_, g});
            }
            for (const auto& piece : r.pieces)
                for (const auto& st : piece.steps) {
                    states.push_back(st.state);
                    mse += std::pow(a_hat(st.state, st.action) - truth(st.state, st.action), 2);
                }
        }
        mse /= static_cast<double>(states.size());
        frames_ += states.size();

        double loss_policy = 0.0, loss_value = 0.0;
        std::size_t n_updates = 0;
        const std::size_t n_batches = cfg_.n_actors / cfg_.batch_trajectories;
        std::vector<std::size_t> order(cfg_.n_actors);
        for (std::size_t e = 0; e < cfg_.n_epochs; ++e) {
            std::iota(order.begin(), order.end(), 0);
            CounterRng rng(stream_key(cfg_.seed, {0x65706f6368ULL, iteration_, e}));
            for (std::size_t i = order.size(); i > 1; --i)
                std::swap(order[i - 1], order[static_cast<std::size_t>(rng.next_u64() % i)]);
            for (std::size_t b = 0; b < n_batches; ++b) {
                std::vector<const ActorRollout*> batch;
                for (std::size_t k = 0; k < cfg_.batch_trajectories; ++k)
                    batch.push_back(&rollouts[order[b * cfg_.batch_trajectories + k]]);
                const PpoDetached fixed = ppo_detached(net_, params_);
                const PpoLoss l = ppo_loss(net_, params_, batch, fixed, u, coeffs);
                adam_step(opt_, params_, l.grad);
                loss_policy += l.policy;
                loss_value += l.value;
                ++n_updates;
            }
        }

        MetricsRow row;
        row.iteration = iteration_;
        row.frames = frames_;
        row.mse_advantage = mse;
        row.exact_return = exact_score(mdp_, policy());
        row.mean_episode_return =
            detail::mean_or(finished, metrics_.rows.empty() ? 0.0 : metrics_.rows.back().mean_episode_return);
        row.loss_policy = n_updates ? loss_policy / static_cast<double>(n_updates) : 0.0;
        row.loss_value = n_updates ? loss_value / static_cast<double>(n_updates) : 0.0;
        row.entropy = detail::mean_entropy(pi.probs(), states);
        metrics_.rows.push_back(row);
        ++iteration_;
    }

    ParamVector checkpoint() const {
        detail::Packer pk;
        pk.add_vector("net", params_.values);
        detail::pack_adam(pk, "adam_net", opt_);
        pk.add_scalar("iteration", static_cast<double>(iteration_));
        pk.add_scalar("frames", static_cast<double>(frames_));
        pk.add_scalar("seed", static_cast<double>(cfg_.seed));
        Matrix actors(static_cast<Eigen::Index>(actors_.size()), 2);
        for (std::size_t j = 0; j < actors_.size(); ++j)
            actors.row(static_cast<Eigen::Index>(j)) << static_cast<double>(actors_[j].state), actors_[j].running_return;
        pk.add("actors", actors);
        pk.add("metrics", detail::metrics_table(metrics_));
        pk.add("episodes", detail::episodes_table(metrics_));
        return pk.finish();
    }

    void restore(const ParamVector& ck) {
        if (static_cast<std::uint64_t>(ck.block("seed")(0, 0)) != cfg_.seed)
            throw std::runtime_error("checkpoint: seed does not match the configuration");
        params_ = detail::with_values(params_, ck.block("net"));
        detail::unpack_adam(ck, "adam_net", opt_);
        iteration_ = static_cast<std::size_t>(ck.block("iteration")(0, 0));
        frames_ = static_cast<std::size_t>(ck.block("frames")(0, 0));
        const Matrix actors = ck.block("actors");
        if (static_cast<std::size_t>(actors.rows()) != actors_.size())
            throw std::runtime_error("checkpoint: actor count does not match the configuration");
        for (std::size_t j = 0; j < actors_.size(); ++j)
            actors_[j] = {static_cast<std::size_t>(actors(static_cast<Eigen::Index>(j), 0)),
                          actors(static_cast<Eigen::Index>(j), 1)};
        metrics_ = detail::unpack_metrics(ck);
    }

private:
    const FiniteMdp& mdp_;
    PpoConfig cfg_;
    DenseNet net_;
    ParamVector params_;
    AdamState opt_;
    std::vector<ActorState> actors_;
    std::size_t iteration_ = 0;
    std::size_t frames_ = 0;
    TrainingMetrics metrics_;
};

inline TrainingMetrics run_ppo_dae(const FiniteMdp& mdp, const PpoConfig& cfg) {
    PpoDaeTrainer trainer(mdp, cfg);
    trainer.run();
    return trainer.metrics();
}

}  // namespace dae
