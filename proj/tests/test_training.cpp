#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "dae/envs.hpp"
#include "dae/training.hpp"
#include "oracles.hpp"

using namespace dae;

namespace {

std::string csv(const TrainingMetrics& m) {
    std::ostringstream os;
    write_metrics_csv(os, m);
    write_episodes_csv(os, m);
    return os.str();
}

ChainEnv small_chain(std::size_t n, std::uint64_t swap_seed = 0) {
    ChainEnvSpec spec;
    spec.n_states = n;
    spec.reward_swap_seed = swap_seed;
    return build_chain(spec);
}

ActorCriticConfig small_ac(Estimator e) {
    ActorCriticConfig cfg;
    cfg.iterations = 6;
    cfg.hidden = {16, 16};
    cfg.estimator = e;
    cfg.seed = 3;
    return cfg;
}

PpoConfig small_ppo() {
    PpoConfig cfg;
    cfg.iterations = 4;
    cfg.n_actors = 4;
    cfg.n_steps = 20;
    cfg.n_epochs = 2;
    cfg.batch_trajectories = 2;
    cfg.hidden = {16, 16};
    cfg.seed = 5;
    return cfg;
}

}  // namespace

TEST(PolicyGradient, ZeroAdvantagesLeavePolicyUnchanged) {
    const auto pi = TabularPolicy::uniform(3, 2);
    const auto next = policy_gradient_step(pi, {{0, 1, 0.0}, {2, 0, 0.0}}, 0.5);
    EXPECT_EQ(next.logits(), pi.logits());
    EXPECT_THROW(policy_gradient(pi, {{0, 0, std::nan("")}}), std::invalid_argument);
}

TEST(PolicyGradient, PositiveAdvantageRaisesProbability) {
    const auto pi = TabularPolicy::uniform(1, 2);
    const auto next = policy_gradient_step(pi, {{0, 0, 1.0}, {0, 1, -1.0}}, 0.1);
    EXPECT_GT(next.prob(0, 0), 0.5);
}

TEST(PolicyGradient, MatchesFiniteDifferencesOfSurrogate) {
    std::mt19937_64 gen(11);
    std::normal_distribution<double> normal;
    for (int trial = 0; trial < 20; ++trial) {
        Matrix logits(4, 3);
        for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = normal(gen);
        std::vector<WeightedPair> samples;
        for (int k = 0; k < 7; ++k)
            samples.push_back({gen() % 4, gen() % 3, normal(gen)});
        const Matrix g = policy_gradient(TabularPolicy(logits), samples);
        Matrix num(4, 3);
        for (Eigen::Index i = 0; i < logits.size(); ++i) {
            Matrix lp = logits, lm = logits;
            lp.data()[i] += 1e-6;
            lm.data()[i] -= 1e-6;
            num.data()[i] = (policy_surrogate(TabularPolicy(lp), samples) -
                             policy_surrogate(TabularPolicy(lm), samples)) / 2e-6;
        }
        EXPECT_LT((num - g).cwiseAbs().maxCoeff() / std::max(1.0, g.cwiseAbs().maxCoeff()), 1e-4);
    }
}

TEST(PpoClip, Examples) {
    EXPECT_DOUBLE_EQ(ppo_clip_loss(1.2, 1.0, 0.1), 1.1);
    EXPECT_DOUBLE_EQ(ppo_clip_loss(0.8, -1.0, 0.1), -0.9);
    EXPECT_EQ(ppo_clip_loss(1.05, 2.0, 0.1), 1.05 * 2.0);
    EXPECT_EQ(ppo_clip_loss(0.95, -3.0, 0.1), 0.95 * -3.0);
    EXPECT_THROW(ppo_clip_loss(0.0, 1.0, 0.1), std::invalid_argument);
}

TEST(PpoClip, SlopeMatchesFiniteDifferencesAndIsFlatWhenClipped) {
    std::mt19937_64 gen(12);
    std::uniform_real_distribution<double> ratio(0.5, 1.5), adv(-2.0, 2.0);
    for (int k = 0; k < 200; ++k) {
        const double r = ratio(gen), a = adv(gen);
        if (std::abs(r - 0.9) < 1e-4 || std::abs(r - 1.1) < 1e-4) continue;
        const double num = (ppo_clip_loss(r + 1e-7, a, 0.1) - ppo_clip_loss(r - 1e-7, a, 0.1)) / 2e-7;
        EXPECT_NEAR(num, ppo_clip_slope(r, a, 0.1), 1e-6);
        if ((a > 0 && r > 1.1) || (a < 0 && r < 0.9)) {
            EXPECT_EQ(ppo_clip_slope(r, a, 0.1), 0.0);
        }
    }
}

TEST(Entropy, Examples) {
    Eigen::RowVectorXd u2 = Eigen::RowVectorXd::Constant(2, 0.5);
    EXPECT_NEAR(entropy_term(u2), -std::log(2.0), 1e-15);
    Eigen::RowVectorXd det(3);
    det << 0.0, 1.0, 0.0;
    EXPECT_EQ(entropy_term(det), 0.0);
    Eigen::RowVectorXd u5 = Eigen::RowVectorXd::Constant(5, 0.2);
    EXPECT_NEAR(entropy_term(u5), -std::log(5.0), 1e-15);
}

TEST(PpoLoss, GradientMatchesFiniteDifferencesThroughAllHeads) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const FiniteMdp mdp = build_random({5, 3, 2, 0.9, seed, true});
        const DenseNet net({5, 7, {6, 5}});
        ParamVector p = net.init_orthogonal(seed, std::sqrt(2.0), {{3, 1.0}, {3, 1.0}, {1, 1.0}});
        CounterRng rng(stream_key(seed, {1}));
        for (const char* b : {"b0", "b1", "b2"})
            for (auto& x : p.block(b).reshaped()) x = 0.1 * rng.normal();
        // Behaviour policy differs from the current one so that some ratios clip.
        Matrix behave_logits = SharedHeads::evaluate(net, p).logits;
        for (Eigen::Index i = 0; i < behave_logits.size(); ++i) behave_logits.data()[i] += 0.3 * rng.normal();
        const Matrix behave = softmax_rows(behave_logits);
        std::vector<ActorRollout> rollouts;
        for (int j = 0; j < 2; ++j) {
            ActorState actor{rng.categorical(std::vector<double>(mdp.initial_dist().data(),
                                                                 mdp.initial_dist().data() + 5)), 0.0};
            rollouts.push_back(collect_segment(mdp, behave, actor, 9, rng));
        }
        std::vector<const ActorRollout*> batch = {&rollouts[0], &rollouts[1]};
        Vector u(5);
        for (Eigen::Index s = 0; s < 5; ++s) u[s] = rng.normal();
        const PpoDetached fixed = ppo_detached(net, p);
        const PpoCoefficients c{0.1, 1.5, 0.01, 0.9};
        const auto f = [&](const ParamVector& q) { return ppo_loss(net, q, batch, fixed, u, c).total; };
        const Vector ana = ppo_loss(net, p, batch, fixed, u, c).grad.values;
        const Vector num = numerical_gradient(f, p, 1e-6);
        EXPECT_LT((num - ana).cwiseAbs().maxCoeff() / std::max(1.0, ana.cwiseAbs().maxCoeff()), 1e-4) << seed;
    }
}

TEST(PpoLoss, AdvantageIsGradientStoppedInPolicyTerm) {
    const FiniteMdp mdp = build_random({4, 2, 2, 0.9, 3, true});
    const DenseNet net({4, 5, {8}});
    ParamVector p = net.init_orthogonal(1, std::sqrt(2.0), {{2, 1.0}, {2, 1.0}, {1, 1.0}});
    CounterRng rng(9);
    ActorState actor{0, 0.0};
    const Matrix behave = Matrix::Constant(4, 2, 0.5);
    const ActorRollout r = collect_segment(mdp, behave, actor, 12, rng);
    const PpoCoefficients c{0.2, 0.0, 0.0, 0.9};
    const Vector u = Vector::Zero(4);
    const PpoLoss l = ppo_loss(net, p, {&r}, ppo_detached(net, p), u, c);
    // Rows 0..1 of the output layer feed only the advantage head.
    EXPECT_EQ(Matrix(l.grad.block("W1").topRows(2)).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(Matrix(l.grad.block("b1").topRows(2)).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_GT(Matrix(l.grad.block("W1").middleRows(2, 2)).cwiseAbs().maxCoeff(), 0.0);
    // The advantage head still sets the value of L_pi through the detached weights.
    ParamVector q = p;
    q.block("b1")(0, 0) += 1.0;
    EXPECT_NE(ppo_loss(net, p, {&r}, ppo_detached(net, q), u, c).policy, l.policy);
}

TEST(PpoRollout, SegmentsSplitAtTerminationAndBootstrapOnlyAtTheEnd) {
    const ChainEnv env = small_chain(5);
    CounterRng rng(4);
    ActorState actor{0, 0.0};
    const Matrix probs = Matrix::Constant(6, 2, 0.5);
    const ActorRollout r = collect_segment(env.mdp, probs, actor, 13, rng);
    ASSERT_EQ(r.pieces.size(), 3u);
    EXPECT_EQ(r.pieces[0].size(), 5u);
    EXPECT_TRUE(r.pieces[0].terminated());
    EXPECT_TRUE(r.pieces[1].terminated());
    EXPECT_EQ(r.pieces[2].size(), 3u);
    EXPECT_EQ(r.pieces[2].bootstrap_state, std::optional<std::size_t>(3));
    ASSERT_EQ(r.finished_returns.size(), 2u);
    EXPECT_EQ(r.finished_returns[0], r.pieces[0].undiscounted_return());
    EXPECT_EQ(r.n_steps(), 13u);
    EXPECT_EQ(actor.state, 3u);
    EXPECT_EQ(actor.running_return, r.pieces[2].undiscounted_return());
}

TEST(PpoConfig, RejectsBadBatching) {
    PpoConfig cfg = small_ppo();
    cfg.batch_trajectories = 3;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg.batch_trajectories = 2;
    cfg.clip_epsilon = 1.0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(PpoTrainer, ZeroEpochsLeavePolicyUnchanged) {
    const ChainEnv env = small_chain(8);
    PpoConfig cfg = small_ppo();
    cfg.n_epochs = 0;
    PpoDaeTrainer trainer(env.mdp, cfg);
    const Matrix before = trainer.policy().probs();
    trainer.step();
    EXPECT_EQ(trainer.policy().probs(), before);
    EXPECT_EQ(trainer.metrics().rows.size(), 1u);
}

TEST(PpoTrainer, DeterministicAcrossThreadCounts) {
    const ChainEnv env = small_chain(8);
    PpoConfig cfg = small_ppo();
    const std::string one = csv(run_ppo_dae(env.mdp, cfg));
    cfg.threads = 3;
    EXPECT_EQ(csv(run_ppo_dae(env.mdp, cfg)), one);
    cfg.seed = 6;
    EXPECT_NE(csv(run_ppo_dae(env.mdp, cfg)), one);
}

TEST(PpoTrainer, ResumeFromCheckpointIsExact) {
    const ChainEnv env = small_chain(8);
    const PpoConfig cfg = small_ppo();
    PpoDaeTrainer first(env.mdp, cfg);
    first.step();
    first.step();
    std::stringstream ss;
    write_params(ss, first.checkpoint());
    PpoDaeTrainer second(env.mdp, cfg);
    second.restore(read_params(ss));
    second.run();
    EXPECT_EQ(csv(second.metrics()), csv(run_ppo_dae(env.mdp, cfg)));
    EXPECT_EQ(second.params().values, [&] { PpoDaeTrainer t(env.mdp, cfg); t.run(); return t.params().values; }());
}

TEST(PpoTrainer, MetricsAreFiniteAndFramesCount) {
    const ChainEnv env = small_chain(8);
    const TrainingMetrics m = run_ppo_dae(env.mdp, small_ppo());
    ASSERT_EQ(m.rows.size(), 4u);
    for (std::size_t i = 0; i < m.rows.size(); ++i) {
        const auto& r = m.rows[i];
        EXPECT_EQ(r.iteration, i);
        EXPECT_EQ(r.frames, (i + 1) * 80);
        for (double x : {r.mse_advantage, r.exact_return, r.mean_episode_return, r.loss_policy, r.loss_value, r.entropy})
            EXPECT_TRUE(std::isfinite(x));
    }
    // The untrained network is near uniform, and the initial exact return is the uniform value.
    EXPECT_NEAR(m.rows[0].entropy, std::log(2.0), 1e-3);
}

TEST(ActorCritic, ZeroIterationsIsANoOp) {
    const ChainEnv env = small_chain(8);
    ActorCriticConfig cfg = small_ac(Estimator::Dae);
    cfg.iterations = 0;
    ActorCriticTrainer trainer(env.mdp, cfg);
    trainer.run();
    EXPECT_TRUE(trainer.metrics().rows.empty());
    EXPECT_EQ(trainer.policy().logits(), Matrix::Zero(9, 2));
}

TEST(ActorCritic, RejectsNonEpisodicMdp) {
    EXPECT_THROW(ActorCriticTrainer(build_random({4, 2, 2, 0.9, 1, false}), small_ac(Estimator::Dae)),
                 std::invalid_argument);
}

TEST(ActorCritic, EveryEstimatorCompletesAnIteration) {
    const ChainEnv env = small_chain(6, 2);
    for (Estimator e : {Estimator::Dae, Estimator::Mc, Estimator::Gae, Estimator::Indirect, Estimator::Duel}) {
        ActorCriticConfig cfg = small_ac(e);
        cfg.iterations = 1;
        ActorCriticTrainer trainer(env.mdp, cfg);
        trainer.step();
        const auto& row = trainer.metrics().rows.at(0);
        EXPECT_TRUE(std::isfinite(row.mse_advantage)) << estimator_name(e);
        EXPECT_EQ(row.frames, 4u * 6u);
        // Every chain episode lasts exactly the chain length.
        EXPECT_EQ(trainer.metrics().episodes.size(), 4u);
    }
}

TEST(ActorCritic, DeterministicAndResumable) {
    const ChainEnv env = small_chain(8, 1);
    for (Estimator e : {Estimator::Dae, Estimator::Gae}) {
        const ActorCriticConfig cfg = small_ac(e);
        const std::string full = csv(run_actor_critic(env.mdp, cfg));
        EXPECT_EQ(csv(run_actor_critic(env.mdp, cfg)), full);
        ActorCriticTrainer a(env.mdp, cfg);
        for (int k = 0; k < 3; ++k) a.step();
        std::stringstream ss;
        write_params(ss, a.checkpoint());
        ActorCriticTrainer b(env.mdp, cfg);
        b.restore(read_params(ss));
        b.run();
        EXPECT_EQ(csv(b.metrics()), full);
    }
}

TEST(ActorCritic, DaeLearnsTheShortChain) {
    // On a short chain the advantage is the centred reward, so DAE should
    // drive the policy towards the high-reward action quickly.
    const ChainEnv env = small_chain(8, 4);
    ActorCriticConfig cfg = small_ac(Estimator::Dae);
    cfg.iterations = 300;
    cfg.hidden = {32, 32};
    const TrainingMetrics m = run_actor_critic(env.mdp, cfg);
    EXPECT_NEAR(m.rows.front().exact_return, 4.0, 0.5);
    EXPECT_GT(m.rows.back().exact_return, 7.0);
    EXPECT_LT(m.rows.back().mse_advantage, m.rows.front().mse_advantage);
}

TEST(Metrics, CsvHeaderAndCarryForward) {
    TrainingMetrics m;
    m.rows.push_back({0, 10, 0.5, 1.0, 2.0, 0.1, 0.2, 0.3});
    std::ostringstream os;
    write_metrics_csv(os, m);
    EXPECT_EQ(os.str().substr(0, os.str().find('\n')), kMetricsHeader);
    EXPECT_NE(os.str().find("0,10,0.5,1,2,0.1,0.2,0.3"), std::string::npos);
}
