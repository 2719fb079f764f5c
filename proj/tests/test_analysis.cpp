#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "dae/analysis.hpp"
#include "dae/envs.hpp"
#include "oracles.hpp"

using namespace dae;

namespace {

FiniteMdp two_state() {
    // s0 -a0-> s0 (r=1), s0 -a1-> s1 (r=0); s1 -any-> s0 or s1 w.p. 0.5 (r=2).
    std::vector<double> P = {1.0, 0.0, 0.0, 1.0, 0.5, 0.5, 0.5, 0.5};
    Matrix R(2, 2);
    R << 1.0, 0.0, 2.0, 2.0;
    Vector mu(2);
    mu << 1.0, 0.0;
    return {2, 2, P, R, 0.5, mu, {false, false}};
}

}  // namespace

TEST(Quantile, LinearInterpolation) {
    EXPECT_EQ(quantile({3.0, 1.0, 2.0}, 0.5), 2.0);
    EXPECT_EQ(quantile({1.0, 2.0, 3.0, 4.0}, 0.5), 2.5);
    EXPECT_EQ(quantile({1.0, 2.0, 3.0, 4.0, 5.0}, 0.25), 2.0);
    EXPECT_EQ(quantile({0.0, 10.0}, 0.75), 7.5);
    EXPECT_EQ(quantile({4.0}, 0.9), 4.0);
    EXPECT_THROW(quantile({}, 0.5), std::invalid_argument);
    EXPECT_THROW(quantile({1.0}, 1.5), std::invalid_argument);
}

TEST(Variation, HandComputedTwoStateDifferences) {
    const FiniteMdp mdp = two_state();
    // Uniform: V0 = 7/4, V1 = 13/4, Q(s0,a1) = 13/8, A(s0,a1) = -1/8.
    // Always a0 at s0: V0 = 2, V1 = 10/3, Q(s0,a1) = 5/3, A(s0,a1) = -1/3.
    Matrix det(2, 2);
    det << 1.0, 0.0, 0.5, 0.5;
    const std::vector<TabularPolicy> snaps = {TabularPolicy::uniform(2, 2), TabularPolicy::from_probabilities(det)};
    const VariationReport rep = variation_study(mdp, snaps, {{0, 1}});
    ASSERT_EQ(rep.rows.size(), 1u);
    EXPECT_EQ(rep.rows[0].update_index, 1u);
    EXPECT_NEAR(rep.rows[0].dq_median, 5.0 / 3.0 - 13.0 / 8.0, 1e-9);
    EXPECT_NEAR(rep.rows[0].da_median, 1.0 / 3.0 - 1.0 / 8.0, 1e-9);
    EXPECT_EQ(rep.rows[0].dq_q1, rep.rows[0].dq_median);
}

TEST(Variation, IdenticalSnapshotsGiveZero) {
    std::mt19937_64 gen(1);
    const FiniteMdp mdp = build_random({5, 3, 2, 0.9, 4, true});
    const auto a = oracle::random_policy(5, 3, gen), b = oracle::random_policy(5, 3, gen);
    const VariationReport rep = variation_study(mdp, {a, a, b, b, b, a}, non_terminal_pairs(mdp));
    ASSERT_EQ(rep.rows.size(), 5u);
    for (std::size_t i : {0u, 2u, 3u}) {
        EXPECT_EQ(rep.rows[i].dq_q3, 0.0);
        EXPECT_EQ(rep.rows[i].da_q3, 0.0);
    }
    EXPECT_GT(rep.rows[1].dq_q3, 0.0);
}

TEST(Variation, PermutingProbesLeavesReportUnchanged) {
    std::mt19937_64 gen(2);
    const FiniteMdp mdp = build_random({5, 2, 3, 0.9, 6, true});
    std::vector<TabularPolicy> snaps;
    for (int k = 0; k < 4; ++k) snaps.push_back(oracle::random_policy(5, 2, gen));
    auto probes = non_terminal_pairs(mdp);
    std::ostringstream a, b;
    write_variation_csv(a, variation_study(mdp, snaps, probes));
    std::shuffle(probes.begin(), probes.end(), gen);
    write_variation_csv(b, variation_study(mdp, snaps, probes));
    EXPECT_EQ(a.str(), b.str());
    EXPECT_EQ(a.str().substr(0, a.str().find('\n')), "update_index,dq_median,dq_q1,dq_q3,da_median,da_q1,da_q3");
}

TEST(Variation, ChainAdvantageMovesLessThanQ) {
    // Nudging the policy at every state changes A locally while Q sums the
    // downstream changes.
    ChainEnvSpec spec;
    spec.n_states = 32;
    const ChainEnv env = build_chain(spec);
    std::vector<TabularPolicy> snaps;
    for (int k = 0; k <= 5; ++k) snaps.push_back(env.constant_policy(0.5 + 0.08 * k));
    EXPECT_TRUE(variation_study(env.mdp, snaps, non_terminal_pairs(env.mdp)).advantage_more_stable());
}

TEST(Variation, RejectsTooFewSnapshotsAndBadProbes) {
    const FiniteMdp mdp = two_state();
    const auto u = TabularPolicy::uniform(2, 2);
    EXPECT_THROW(variation_study(mdp, {u}, {{0, 0}}), std::invalid_argument);
    EXPECT_THROW(variation_study(mdp, {u, u}, {{2, 0}}), std::invalid_argument);
}

TEST(Scores, Examples) {
    const auto a = summarize_scores({1.0, 2.0, 3.0});
    EXPECT_EQ(a.overall, 2.0);
    EXPECT_EQ(a.last, 2.0);
    std::vector<double> xs(100, 0.0);
    xs.resize(200, 10.0);
    const auto b = summarize_scores(xs);
    EXPECT_EQ(b.overall, 5.0);
    EXPECT_EQ(b.last, 10.0);
    const auto c = summarize_scores(std::vector<double>(37, -1.5));
    EXPECT_EQ(c.overall, -1.5);
    EXPECT_EQ(c.last, -1.5);
    EXPECT_THROW(summarize_scores({}), std::invalid_argument);
}

TEST(Scores, OneStandardErrorRule) {
    const MeanSe a = mean_se({1.0, 2.0, 3.0});
    EXPECT_EQ(a.mean, 2.0);
    EXPECT_NEAR(a.se, 1.0 / std::sqrt(3.0), 1e-15);
    EXPECT_EQ(compare_scores(a, a), Verdict::Similar);
    EXPECT_EQ(compare_scores(mean_se({10.0, 11.0}), a), Verdict::FirstBetter);
    EXPECT_EQ(compare_scores(a, mean_se({10.0, 11.0})), Verdict::SecondBetter);
    EXPECT_EQ(compare_scores(mean_se({2.5, 3.5}), a), Verdict::Similar);
    const MeanSe one = mean_se({4.0});
    EXPECT_TRUE(std::isnan(one.se));
    EXPECT_EQ(compare_scores(one, a), Verdict::Undefined);
}
