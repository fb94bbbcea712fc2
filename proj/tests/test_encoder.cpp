#include "test_support.hpp"

#include <gtest/gtest.h>

#include <numbers>

using namespace rope;

namespace {

TrainConfig small_config(std::uint64_t seed) {
    TrainConfig c;
    c.seed = seed;
    c.batch_size = 32;
    c.total_gradient_steps = 1500;
    c.hidden = {32};
    c.learning_rate = 1e-3;
    c.target_update_every = 1;
    return c;
}

} // namespace

TEST(AngularDistance, Examples) {
    const Vector u = Vector::Unit(3, 0);
    EXPECT_NEAR(angular_distance(u, 2.0 * u), std::atan2(std::sqrt(kAngularKappa), 1.0), 1e-12);
    EXPECT_NEAR(angular_distance(u, Vector::Unit(3, 1)), std::atan2(std::sqrt(1.0 + kAngularKappa), 0.0), 1e-12);
    EXPECT_NEAR(angular_distance(u, -u), std::numbers::pi - std::sqrt(kAngularKappa), 1e-6);
    EXPECT_EQ(angular_distance(Vector::Zero(3), u), 0.0);
    EXPECT_EQ(angular_distance(u, 1e-9 * u), 0.0);
    // Orthogonal unit vectors: 1/2 + 1/2 + beta * ~pi/2
    EXPECT_NEAR(encoding_distance(u, Vector::Unit(3, 2), 1.0), 1.0 + std::numbers::pi / 2.0, 1e-6);
    EXPECT_DOUBLE_EQ(encoding_distance(u, Vector::Unit(3, 2), 0.0), 1.0);
}

TEST(AngularDistance, GradientMatchesFiniteDifferences) {
    Rng rng(7);
    for (int instance = 0; instance < 20; ++instance) {
        const Vector u = oracle::random_matrix(5, 1, rng, 2.0).array() - 1.0;
        const Vector v = oracle::random_matrix(5, 1, rng, 2.0).array() - 1.0;
        const double beta = 0.1 * (1 + instance);
        const Vector numeric =
            oracle::finite_difference([&](const Vector& x) { return encoding_distance(x, v, beta); }, u);
        EXPECT_LT(oracle::relative_error(encoding_distance_grad_u(u, v, beta), numeric), 1e-6);
    }
}

TEST(RopeLoss, GradientMatchesFiniteDifferences) {
    for (int instance = 0; instance < 20; ++instance) {
        Rng rng(200 + static_cast<std::uint64_t>(instance));
        const double beta = std::vector<double>{0.1, 1.0, 10.0}[instance % 3];
        EncoderNetwork enc = EncoderNetwork::create(6, {8}, 4, beta, rng);
        const Matrix x1 = oracle::random_matrix(6, 10, rng, 2.0).array() - 1.0;
        const Matrix v = enc.target.forward(Matrix(oracle::random_matrix(6, 10, rng, 2.0).array() - 1.0));
        const Vector targets = oracle::random_matrix(10, 1, rng, 8.0);
        const double delta = instance % 2 == 0 ? 1.0 : 100.0;

        const LossAndGradient lg = rope_loss_and_gradient(enc.online, x1, v, targets, beta, delta);
        const Vector numeric = oracle::finite_difference(
            [&](const Vector& p) {
                DenseNet net = enc.online;
                net.set_flat_parameters(p);
                return rope_loss_and_gradient(net, x1, v, targets, beta, delta).loss;
            },
            enc.online.flat_parameters());
        EXPECT_LT(oracle::relative_error(lg.gradients.flat(), numeric), 1e-4) << "instance " << instance;
    }
}

TEST(EncoderNetwork, OutputsAreBoundedAndNormalized) {
    Rng rng(1);
    const EncoderNetwork enc = EncoderNetwork::create(5, {16}, 8, 1.0, rng);
    const Matrix out = enc.encode(oracle::random_matrix(5, 20, rng, 10.0));
    EXPECT_LE(out.cwiseAbs().maxCoeff(), 1.0);
    EXPECT_THROW(EncoderNetwork::create(5, {16}, 1, 1.0, rng), ValidationError);
    EXPECT_THROW(EncoderNetwork::create(5, {16}, 4, -1.0, rng), ValidationError);
}

TEST(EncoderNetwork, DistanceIsSymmetricOnlyWhenTargetMatchesOnline) {
    Rng rng(2);
    EncoderNetwork enc = EncoderNetwork::create(4, {8}, 4, 1.0, rng);
    const Vector x1 = oracle::random_matrix(4, 1, rng);
    const Vector x2 = oracle::random_matrix(4, 1, rng);
    EXPECT_NEAR(parametric_distance(enc, x1, x2), parametric_distance(enc, x2, x1), 1e-12);
    enc.online.layers()[0].weight(0, 0) += 0.5;
    enc.online.layers()[1].bias(1) -= 0.5;
    EXPECT_GT(std::abs(parametric_distance(enc, x1, x2) - parametric_distance(enc, x2, x1)), 1e-6);
    ema_update(enc.target, enc.online, 1.0);
    EXPECT_NEAR(parametric_distance(enc, x1, x2), parametric_distance(enc, x2, x1), 1e-12);
}

TEST(RopeTrain, IsDeterministicPerSeed) {
    const DesignData dd = oracle::random_design(4, 2, 300, 3);
    TrainConfig c = small_config(5);
    c.total_gradient_steps = 200;
    const RopeTrainResult a = rope_train(dd, 0.9, c, {1.0, 4});
    const RopeTrainResult b = rope_train(dd, 0.9, c, {1.0, 4});
    c.seed = 6;
    const RopeTrainResult other = rope_train(dd, 0.9, c, {1.0, 4});
    EXPECT_EQ(parameter_checksum(a.encoder.online), parameter_checksum(b.encoder.online));
    EXPECT_NE(parameter_checksum(a.encoder.online), parameter_checksum(other.encoder.online));
    EXPECT_EQ(a.target_updates, 200);
    EXPECT_EQ(a.log.size(), 2u);
    EXPECT_EQ(a.log.back().step, 200);
}

TEST(RopeTrain, LossDecreases) {
    std::vector<double> ratios;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const DesignData dd = oracle::random_design(5, 2, 500, seed);
        const RopeTrainResult r = rope_train(dd, 0.9, small_config(seed), {1.0, 8});
        ASSERT_TRUE(std::isfinite(r.final_loss));
        ratios.push_back(r.final_loss / r.initial_loss);
    }
    std::sort(ratios.begin(), ratios.end());
    EXPECT_LT(ratios[1], 1.0);
}

TEST(RopeTrain, FlagsConstantRewards) {
    DesignData dd = oracle::random_design(4, 2, 100, 1);
    dd.reward.setConstant(-1.0);
    TrainConfig c = small_config(0);
    c.total_gradient_steps = 20;
    EXPECT_TRUE(rope_train(dd, 0.9, c, {}).collapse_risk);
    dd.reward(3) = 0.0;
    EXPECT_FALSE(rope_train(dd, 0.9, c, {}).collapse_risk);
}

TEST(RopeTrain, NonFiniteLossRaises) {
    DesignData dd = oracle::random_design(4, 2, 100, 1);
    for (Eigen::Index i = 0; i < dd.reward.size(); ++i) dd.reward(i) = i % 2 == 0 ? 1e308 : -1e308;
    TrainConfig c = small_config(0);
    c.total_gradient_steps = 20;
    EXPECT_THROW(rope_train(dd, 0.9, c, {}), TrainingError);
}
