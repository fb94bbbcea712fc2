#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace rope;

namespace {

struct OneHotGrid {
    Gridworld g = build_gridworld();
    FeatureMap features = FeatureMap::one_hot(9);
    TransitionDataset data;
    DesignData dd;
};

OneHotGrid one_hot_grid(int n = 2000, std::uint64_t seed = 0) {
    OneHotGrid o;
    o.data = generate_dataset(o.g.mdp, o.g.pi_b, n, seed);
    o.dd = make_design_data(o.data, o.g.pi_e, &o.features);
    return o;
}

TrainConfig quick(std::uint64_t seed = 0) {
    TrainConfig c;
    c.seed = seed;
    c.batch_size = 32;
    c.total_gradient_steps = 300;
    c.hidden = {16};
    return c;
}

} // namespace

TEST(FqeVariant, Strings) {
    for (FqeVariant v : {FqeVariant::plain, FqeVariant::clip, FqeVariant::deep})
        EXPECT_EQ(fqe_variant_from_string(to_string(v)), v);
    EXPECT_THROW(fqe_variant_from_string("wide"), ValidationError);
    const TrainConfig deep = apply_variant(TrainConfig::desk(), FqeVariant::deep);
    EXPECT_EQ(deep.hidden, (std::vector<int>{64, 64, 64, 64}));
    EXPECT_TRUE(apply_variant(TrainConfig::desk(), FqeVariant::clip).clip_targets);
    EXPECT_FALSE(apply_variant(TrainConfig::desk(), FqeVariant::plain).clip_targets);
}

TEST(TrainConfig, Presets) {
    const TrainConfig p = TrainConfig::full();
    EXPECT_EQ(p.batch_size, 512);
    EXPECT_EQ(p.total_gradient_steps, 300000);
    EXPECT_DOUBLE_EQ(p.learning_rate, 1e-5);
    TrainConfig bad;
    bad.clip_range = std::make_pair(-1.0, 0.0);
    EXPECT_THROW(bad.validate(), ValidationError);
    bad.clip_targets = true;
    EXPECT_NO_THROW(bad.validate());
    bad.target_tau = 0.0;
    EXPECT_THROW(bad.validate(), ValidationError);
}

TEST(FqeClip, RangeFromDataset) {
    TransitionDataset d;
    d.transitions = {{0, 0, -1.0, 0, false, {}, {}}, {0, 0, 0.0, 0, false, {}, {}}};
    const auto [lo, hi] = dataset_clip_range(d, 0.99);
    EXPECT_NEAR(lo, -100.0, 1e-9);
    EXPECT_EQ(hi, 0.0);
    EXPECT_DOUBLE_EQ(divergence_threshold(4.0, 0.99), 1e3 * 4.0 / (1.0 - 0.99));
    EXPECT_DOUBLE_EQ(divergence_threshold(0.0, 0.9), 1e3 / (1.0 - 0.9));
}

TEST(FqeClip, EveryTargetLiesInRange) {
    const OneHotGrid o = one_hot_grid(500);
    TrainConfig c = apply_variant(quick(), FqeVariant::clip);
    c.clip_range = std::make_pair(-5.0, -1.0);
    const FqeResult r = fqe_train(make_fqe_inputs(o.dd), 0.99, c);
    EXPECT_TRUE(r.clip.enabled);
    EXPECT_EQ(r.clip.targets, 300LL * 32);
    EXPECT_EQ(r.clip.within_range, r.clip.targets);
    EXPECT_GT(r.clip.clipped, 0);
    EXPECT_GE(r.clip.min_target, -5.0);
    EXPECT_LE(r.clip.max_target, -1.0);

    const FqeResult plain = fqe_train(make_fqe_inputs(o.dd), 0.99, quick());
    EXPECT_FALSE(plain.clip.enabled);
    EXPECT_EQ(plain.clip.targets, 0);
}

TEST(FqeLoss, GradientMatchesFiniteDifferences) {
    for (int instance = 0; instance < 20; ++instance) {
        Rng rng(300 + static_cast<std::uint64_t>(instance));
        const DenseNet q = DenseNet::mlp(5, {7, 6}, 1, Activation::identity, false, rng);
        const Matrix x = oracle::random_matrix(5, 12, rng, 2.0).array() - 1.0;
        const Vector y = oracle::random_matrix(12, 1, rng, 6.0).array() - 3.0;
        const double delta = instance % 2 == 0 ? 1.0 : 0.1;
        const LossAndGradient lg = fqe_loss_and_gradient(q, x, y, delta);
        const Vector numeric = oracle::finite_difference(
            [&](const Vector& p) {
                DenseNet net = q;
                net.set_flat_parameters(p);
                return fqe_loss_and_gradient(net, x, y, delta).loss;
            },
            q.flat_parameters());
        EXPECT_LT(oracle::relative_error(lg.gradients.flat(), numeric), 1e-4) << "instance " << instance;
    }
}

TEST(FqeTrain, ZeroResidualGivesZeroGradient) {
    Rng rng(1);
    const DenseNet q = DenseNet::mlp(3, {4}, 1, Activation::identity, false, rng);
    const Matrix x = oracle::random_matrix(3, 5, rng);
    const Vector y = q.forward(x).row(0).transpose();
    const LossAndGradient lg = fqe_loss_and_gradient(q, x, y, 1.0);
    EXPECT_EQ(lg.loss, 0.0);
    EXPECT_EQ(lg.gradients.flat().cwiseAbs().maxCoeff(), 0.0);
}

TEST(FqeTrain, OneHotGridworldMatchesDynamicProgramming) {
    const OneHotGrid o = one_hot_grid(2000, 0);
    TrainConfig c = TrainConfig::desk();
    c.target_update_every = 1;
    const FqeResult r = fqe_train(make_fqe_inputs(o.dd), 0.99, c);
    ASSERT_FALSE(r.diverged);
    const Matrix table = q_network_table(r.q, o.g.mdp, o.features);
    const QTable exact = policy_evaluation_q(o.g.mdp, o.g.pi_e);
    double worst = 0.0;
    for (int s = 0; s < 9; ++s)
        for (int a = 0; a < 4; ++a)
            if (!o.g.mdp.terminal(s)) worst = std::max(worst, std::abs(table(s, a) - exact(s, a)));
    EXPECT_LE(worst, 0.1);
    const InitialInputs init = make_initial_inputs(o.g.mdp, o.g.pi_e, o.features);
    EXPECT_NEAR(fqe_estimate(r.q, init), policy_value(o.g.mdp, o.g.pi_e, exact), 0.1);
}

TEST(FqeTrain, HardTargetUpdateEqualsManualTdStep) {
    // With tau = 1 every step, each step regresses onto targets from the current network.
    const OneHotGrid o = one_hot_grid(200, 1);
    const FqeInputs in = make_fqe_inputs(o.dd);
    TrainConfig c = quick(3);
    c.target_tau = 1.0;
    c.target_update_every = 1;
    c.total_gradient_steps = 5;
    c.optimizer = OptimizerKind::sgd;
    c.learning_rate = 0.05;
    const FqeResult r = fqe_train(in, 0.99, c);

    Rng init_rng(derive_seed(c.seed, 0xf0e1));
    Rng rng(derive_seed(c.seed, 0xf0e2));
    DenseNet q = DenseNet::mlp(in.input_dim(), c.hidden, 1, Activation::identity, false, init_rng);
    Optimizer opt(q, c.optimizer_config());
    for (int step = 0; step < c.total_gradient_steps; ++step) {
        const std::vector<int> idx = detail::sample_batch(in.size(), c.batch_size, rng);
        Vector y(c.batch_size);
        for (int k = 0; k < c.batch_size; ++k) {
            const int i = idx[static_cast<std::size_t>(k)];
            double v = 0.0;
            for (int a = 0; a < 4; ++a)
                v += in.next_policy(a, i) * q.forward(Vector(in.next[static_cast<std::size_t>(a)].col(i)))(0);
            y(k) = in.reward(i) + 0.99 * (1.0 - in.done(i)) * v;
        }
        opt.step(q, fqe_loss_and_gradient(q, detail::gather_columns(in.current, idx), y, c.huber_delta).gradients);
    }
    EXPECT_LT((q.flat_parameters() - r.q.flat_parameters()).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(FqeTrain, DetectsDivergence) {
    const OneHotGrid o = one_hot_grid(500, 2);
    TrainConfig c = quick();
    c.optimizer = OptimizerKind::sgd;
    c.learning_rate = 50.0;
    c.grad_clip_norm = 0.0;
    c.huber_delta = 1e6;
    c.total_gradient_steps = 2000;
    const FqeResult r = fqe_train(make_fqe_inputs(o.dd), 0.99, c);
    EXPECT_TRUE(r.diverged);
    EXPECT_FALSE(r.divergence_reason.empty());
    EXPECT_LT(r.steps_completed, 2000);
}

TEST(FqeTrain, IsDeterministicAndLogs) {
    const OneHotGrid o = one_hot_grid(300, 4);
    const FqeInputs in = make_fqe_inputs(o.dd);
    TrainConfig c = quick(9);
    c.log_every = 100;
    c.checkpoint_every = 100;
    std::vector<int> checkpoints;
    const FqeResult a = fqe_train(in, 0.99, c, [&](int step, const DenseNet&) { checkpoints.push_back(step); });
    const FqeResult b = fqe_train(in, 0.99, c);
    EXPECT_EQ(parameter_checksum(a.q), parameter_checksum(b.q));
    EXPECT_EQ(checkpoints, (std::vector<int>{100, 200, 300}));
    ASSERT_EQ(a.log.size(), 3u);
    EXPECT_EQ(a.log[2].target_updates, 3);
    EXPECT_EQ(a.steps_completed, 300);
}

TEST(FqeTrain, DeepVariantBuildsDeeperNetwork) {
    const OneHotGrid o = one_hot_grid(200, 5);
    TrainConfig c = apply_variant(quick(), FqeVariant::deep);
    c.total_gradient_steps = 10;
    const FqeResult r = fqe_train(make_fqe_inputs(o.dd), 0.99, c);
    EXPECT_EQ(r.q.layers().size(), 3u);
}

TEST(FqeTrain, FrozenEncoderIsUntouched) {
    const OneHotGrid o = one_hot_grid(200, 6);
    Rng rng(1);
    const EncoderNetwork enc = EncoderNetwork::create(o.dd.input_dim(), {16}, 8, 1.0, rng);
    const auto before = parameter_checksum(enc.online);
    const FqeInputs in = make_fqe_inputs(o.dd, &enc);
    EXPECT_EQ(in.input_dim(), 8);
    const FqeResult r = fqe_train(in, 0.99, quick());
    const InitialInputs init = make_initial_inputs(o.g.mdp, o.g.pi_e, o.features);
    EXPECT_TRUE(std::isfinite(fqe_estimate(r.q, init, &enc)));
    EXPECT_EQ(parameter_checksum(enc.online), before);
}

TEST(Estimation, InitialInputsAndExpectedValue) {
    const Gridworld g = build_gridworld();
    const FeatureMap one_hot = FeatureMap::one_hot(9);
    const InitialInputs init = make_initial_inputs(g.mdp, g.pi_e, one_hot);
    EXPECT_EQ(init.inputs.cols(), 2);  // pi_e picks up or right at the start
    EXPECT_NEAR(init.weights.sum(), 1.0, 1e-12);

    const InitialInputs noisy = make_initial_inputs(g.mdp, g.pi_e, FeatureMap::redundant(9, 4), 64, 3);
    EXPECT_EQ(noisy.inputs.cols(), 128);
    EXPECT_NEAR(noisy.weights.sum(), 1.0, 1e-12);

    EXPECT_EQ(expected_initial_value([&](const Matrix& x) { return Matrix(Matrix::Zero(1, x.cols())); }, init), 0.0);

    const QTable exact = policy_evaluation_q(g.mdp, g.pi_e);
    auto table_q = [&](const Matrix& x) {
        Matrix out(1, x.cols());
        for (Eigen::Index k = 0; k < x.cols(); ++k) {
            Eigen::Index s, a;
            x.col(k).head(9).maxCoeff(&s);
            x.col(k).tail(4).maxCoeff(&a);
            out(0, k) = exact(static_cast<int>(s), static_cast<int>(a));
        }
        return out;
    };
    EXPECT_NEAR(expected_initial_value(table_q, init), policy_value(g.mdp, g.pi_e, exact), 1e-12);

    Matrix obs(9, 2);
    obs.col(0) = Vector::Unit(9, 0);
    obs.col(1) = Vector::Unit(9, 0);
    const InitialInputs explicit_init = make_initial_inputs(obs, {0, 0}, g.pi_e);
    EXPECT_NEAR(explicit_init.weights.sum(), 1.0, 1e-12);
    EXPECT_NEAR(expected_initial_value(table_q, explicit_init), policy_value(g.mdp, g.pi_e, exact), 1e-12);
}
