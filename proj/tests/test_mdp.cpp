#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace rope;

namespace {

TabularMDP two_state_chain(double gamma = 0.9) {
    Matrix P(2, 2);
    P << 0.25, 0.75,
         0.5, 0.5;
    Matrix r(2, 1);
    r << 1.0, 0.0;
    Vector d0(2);
    d0 << 1.0, 0.0;
    return TabularMDP(2, 1, P, r, gamma, d0, {false, false});
}

} // namespace

TEST(TabularMDP, RejectsInvalidModels) {
    Matrix P(2, 2);
    P << 0.5, 0.4,
         0.5, 0.5;
    Matrix r = Matrix::Zero(2, 1);
    Vector d0(2);
    d0 << 1.0, 0.0;
    EXPECT_THROW(TabularMDP(2, 1, P, r, 0.9, d0, {false, false}), ValidationError);

    P << 0.5, 0.5,
         0.5, 0.5;
    EXPECT_THROW(TabularMDP(2, 1, P, r, 1.0, d0, {false, false}), ValidationError);
    EXPECT_THROW(TabularMDP(2, 1, P, r, -0.1, d0, {false, false}), ValidationError);
    // Terminal state 1 is not absorbing.
    EXPECT_THROW(TabularMDP(2, 1, P, r, 0.9, d0, {false, true}), ValidationError);

    P << 0.5, 0.5,
         0.0, 1.0;
    Matrix r_bad(2, 1);
    r_bad << 0.0, 1.0;
    EXPECT_THROW(TabularMDP(2, 1, P, r_bad, 0.9, d0, {false, true}), ValidationError);
    EXPECT_NO_THROW(TabularMDP(2, 1, P, r, 0.9, d0, {false, true}));

    P << 1.5, -0.5,
         0.0, 1.0;
    EXPECT_THROW(TabularMDP(2, 1, P, r, 0.9, d0, {false, false}), ValidationError);
}

TEST(TabularMDP, PairIndexing) {
    const TabularMDP mdp = build_random_mdp(4, 3, 0.9, 1);
    for (int s = 0; s < 4; ++s)
        for (int a = 0; a < 3; ++a) {
            const int x = mdp.pair(s, a);
            EXPECT_EQ(mdp.state_of(x), s);
            EXPECT_EQ(mdp.action_of(x), a);
            EXPECT_EQ(mdp.pair_rewards()(x), mdp.r(s, a));
        }
}

TEST(PolicyTable, ValidatesRows) {
    Matrix bad(2, 2);
    bad << 0.5, 0.6,
           1.0, 0.0;
    EXPECT_THROW(PolicyTable{bad}, ValidationError);
    const PolicyTable u = PolicyTable::uniform(3, 4);
    EXPECT_DOUBLE_EQ(u(2, 3), 0.25);
    EXPECT_FALSE(u.deterministic());
    EXPECT_TRUE(build_random_policy(3, 4, 7, true).deterministic());
}

TEST(PolicyEvaluation, MatchesClosedFormOnChain) {
    // Single action: q = (I - gamma P)^-1 r by hand for a 2-state chain.
    const TabularMDP mdp = two_state_chain(0.9);
    const QTable q = policy_evaluation_q(mdp, PolicyTable::uniform(2, 1));
    // (I - 0.9 P) = [[0.775, -0.675], [-0.45, 0.55]], det = 0.42625 - 0.30375 = 0.1225
    EXPECT_NEAR(q(0, 0), 0.55 / 0.1225, 1e-9);
    EXPECT_NEAR(q(1, 0), 0.45 / 0.1225, 1e-9);
}

TEST(PolicyEvaluation, MatchesLinearSolveOnRandomMDPs) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const double gamma = std::vector<double>{0.5, 0.9, 0.99}[seed % 3];
        const TabularMDP mdp = build_random_mdp(5, 3, gamma, seed);
        const PolicyTable pi = build_random_policy(5, 3, seed + 100);
        const QTable q = policy_evaluation_q(mdp, pi);
        const Matrix oracle = oracle::linear_solve_q(mdp, pi);
        EXPECT_LT(sup_norm(q.values - oracle), 1e-9) << "seed " << seed;
        EXPECT_LT(bellman_residual(mdp, pi, q.values), 1e-11);
    }
}

TEST(PolicyEvaluation, ThrowsWhenIterationBudgetIsExhausted) {
    const TabularMDP mdp = build_random_mdp(4, 2, 0.99, 3);
    try {
        policy_evaluation_q(mdp, PolicyTable::uniform(4, 2), 1e-12, 5);
        FAIL() << "expected ConvergenceError";
    } catch (const ConvergenceError& e) {
        EXPECT_EQ(e.iterations(), 5);
        EXPECT_GT(e.residual(), 1e-12);
    }
}

TEST(Gridworld, LayoutAndRewards) {
    const Gridworld g = build_gridworld();
    EXPECT_EQ(g.mdp.n_states(), 9);
    EXPECT_EQ(g.mdp.n_actions(), 4);
    EXPECT_DOUBLE_EQ(g.mdp.gamma(), 0.99);
    EXPECT_TRUE(g.mdp.terminal(Gridworld::kGoal));
    EXPECT_DOUBLE_EQ(g.mdp.initial_dist()(Gridworld::kStart), 1.0);
    // Off-grid moves stay in place.
    EXPECT_EQ(Gridworld::successor(Gridworld::kStart, kDown), Gridworld::kStart);
    EXPECT_EQ(Gridworld::successor(Gridworld::kStart, kLeft), Gridworld::kStart);
    EXPECT_EQ(Gridworld::successor(Gridworld::kStart, kRight), Gridworld::state(0, 1));
    EXPECT_EQ(Gridworld::successor(Gridworld::kStart, kUp), Gridworld::state(1, 0));
    // r(s, a) = -manhattan(s', goal)
    EXPECT_DOUBLE_EQ(g.mdp.r(Gridworld::kStart, kRight), -3.0);
    EXPECT_DOUBLE_EQ(g.mdp.r(Gridworld::kStart, kDown), -4.0);
    EXPECT_DOUBLE_EQ(g.mdp.r(Gridworld::state(2, 1), kRight), 0.0);
    EXPECT_FALSE(std::signbit(g.mdp.r(Gridworld::state(2, 1), kRight)));
    EXPECT_DOUBLE_EQ(g.pi_e(Gridworld::kStart, kUp), 0.5);
    EXPECT_DOUBLE_EQ(g.pi_e(Gridworld::kStart, kRight), 0.5);
    EXPECT_DOUBLE_EQ(g.pi_e(Gridworld::state(0, 2), kUp), 1.0);
    EXPECT_DOUBLE_EQ(g.pi_e(Gridworld::state(1, 1), kRight), 1.0);
}

TEST(Gridworld, EvaluationPolicyValue) {
    const Gridworld g = build_gridworld();
    const QTable q = policy_evaluation_q(g.mdp, g.pi_e);
    // Shortest path: rewards -3, -2, -1, 0.
    const double shortest = -3.0 - 0.99 * 2.0 - 0.99 * 0.99 * 1.0;
    EXPECT_NEAR(q(Gridworld::kStart, kRight), shortest, 1e-10);
    EXPECT_NEAR(q(Gridworld::kStart, kUp), shortest, 1e-10);
    EXPECT_NEAR(policy_value(g.mdp, g.pi_e, q), -5.9601, 1e-10);

    const QTable q_rand = policy_evaluation_q(g.mdp, g.pi_b);
    const Matrix oracle = oracle::linear_solve_q(g.mdp, g.pi_b);
    EXPECT_LT(sup_norm(q_rand.values - oracle), 1e-9);
    const double rho_rand = policy_value(g.mdp, g.pi_b, q_rand);
    EXPECT_LT(rho_rand, -50.0);
    EXPECT_NEAR(rho_rand, oracle.row(0).mean(), 1e-9);
}

TEST(Rollouts, MonteCarloMatchesPolicyValue) {
    const TabularMDP mdp = build_random_mdp(4, 2, 0.8, 11);
    const PolicyTable pi = build_random_policy(4, 2, 12);
    const double exact = policy_value(mdp, pi, policy_evaluation_q(mdp, pi));
    const int horizon = default_horizon(mdp);
    const int n = 4000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double g = rollout_return(mdp, pi, horizon, derive_seed(99, static_cast<std::uint64_t>(i)));
        sum += g;
        sq += g * g;
    }
    const double mean = sum / n;
    const double se = std::sqrt((sq / n - mean * mean) / n);
    EXPECT_LT(std::abs(mean - exact), 4.0 * se + 1e-4);
}

TEST(Rollouts, DefaultHorizonTruncatesTail) {
    const TabularMDP mdp = build_random_mdp(3, 2, 0.9, 5);
    const int h = default_horizon(mdp, 1e-4);
    const double scale = mdp.reward_abs_max() / (1.0 - mdp.gamma());
    EXPECT_LT(std::pow(0.9, h) * scale, 1e-4);
    EXPECT_GE(std::pow(0.9, h - 1) * scale, 1e-4);
}

TEST(Rollouts, StopAtTerminalState) {
    const Gridworld g = build_gridworld();
    // pi_e reaches the goal in 4 steps, so any horizon past 4 gives the same return.
    EXPECT_NEAR(rollout_return(g.mdp, g.pi_e, 4, 1), -5.9601, 1e-12);
    EXPECT_NEAR(rollout_return(g.mdp, g.pi_e, 400, 1), -5.9601, 1e-12);
}

TEST(RandomGenerators, AreDeterministic) {
    const TabularMDP a = build_random_mdp(5, 3, 0.9, 42);
    const TabularMDP b = build_random_mdp(5, 3, 0.9, 42);
    const TabularMDP c = build_random_mdp(5, 3, 0.9, 43);
    EXPECT_EQ(a.transition(), b.transition());
    EXPECT_EQ(a.reward(), b.reward());
    EXPECT_NE(a.transition(), c.transition());
    EXPECT_GE(a.reward_min(), 0.0);
    EXPECT_LE(a.reward_max(), 1.0);
    const TabularMDP det = build_random_deterministic_mdp(5, 3, 0.9, 1);
    EXPECT_TRUE(((det.transition().array() == 0.0) || (det.transition().array() == 1.0)).all());
}
