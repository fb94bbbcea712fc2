#include "test_support.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace rope;

namespace {

DenseNet single_layer(const Matrix& w, const Vector& b, Activation act, bool ln = false) {
    return DenseNet({DenseLayer{w, b, act}}, ln);
}

/// sum(c .* net(x)) as a function of the flat parameters.
double weighted_output(DenseNet net, const Vector& params, const Matrix& x, const Matrix& c) {
    net.set_flat_parameters(params);
    return (net.forward(x).array() * c.array()).sum();
}

} // namespace

TEST(DenseNet, ForwardSmallExamples) {
    Matrix w(2, 2);
    w << 1, -1,
         2, 0.5;
    Vector b(2);
    b << 0.5, -4.0;
    Vector x(2);
    x << 1.0, 2.0;
    // z = (1 - 2 + 0.5, 2 + 1 - 4) = (-0.5, -1)
    EXPECT_TRUE(single_layer(w, b, Activation::identity).forward(x).isApprox(Vector{{-0.5, -1.0}}));
    EXPECT_TRUE(single_layer(w, b, Activation::relu).forward(x).isApprox(Vector::Zero(2)));
    // Layer norm of (-0.5, -1): mean -0.75, std 0.25 -> (1, -1)
    const Vector ln = single_layer(w, b, Activation::identity, true).forward(x);
    EXPECT_NEAR(ln(0), 1.0, 1e-8);
    EXPECT_NEAR(ln(1), -1.0, 1e-8);
    const Vector ln_tanh = single_layer(w, b, Activation::tanh, true).forward(x);
    EXPECT_NEAR(ln_tanh(0), std::tanh(1.0), 1e-8);
}

TEST(DenseNet, RejectsBadInputs) {
    Rng rng(0);
    const DenseNet net = DenseNet::mlp(3, {4}, 2, Activation::identity, false, rng);
    EXPECT_THROW(net.forward(Vector(Vector::Zero(4))), ValidationError);
    Vector nan_input = Vector::Zero(3);
    nan_input(1) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(net.forward(nan_input), NumericalFault);
    EXPECT_THROW(DenseNet::mlp(0, {4}, 2, Activation::identity, false, rng), ValidationError);
    EXPECT_THROW(DenseNet({DenseLayer{Matrix::Zero(2, 3), Vector::Zero(3), Activation::identity}}, false),
                 ValidationError);
}

TEST(DenseNet, InitializationBounds) {
    Rng rng(3);
    const DenseNet net = DenseNet::mlp(16, {64, 32}, 1, Activation::identity, false, rng);
    EXPECT_EQ(net.parameter_count(), 16 * 64 + 64 + 64 * 32 + 32 + 32 + 1);
    const std::vector<int> fan_in = {16, 64, 32};
    for (std::size_t i = 0; i < net.layers().size(); ++i) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in[i]));
        EXPECT_LE(net.layers()[i].weight.cwiseAbs().maxCoeff(), bound);
        EXPECT_LE(net.layers()[i].bias.cwiseAbs().maxCoeff(), bound);
        EXPECT_GT(net.layers()[i].weight.cwiseAbs().maxCoeff(), 0.8 * bound);
    }
    EXPECT_EQ(net.layers()[0].activation, Activation::relu);
}

TEST(DenseNet, FlatParametersRoundTrip) {
    Rng rng(5);
    DenseNet net = DenseNet::mlp(3, {5}, 2, Activation::tanh, true, rng);
    const Vector flat = net.flat_parameters();
    EXPECT_EQ(flat(1), net.layers()[0].weight(0, 1));
    EXPECT_EQ(flat(3), net.layers()[0].weight(1, 0));
    DenseNet other = DenseNet::mlp(3, {5}, 2, Activation::tanh, true, rng);
    other.set_flat_parameters(flat);
    EXPECT_EQ(other.flat_parameters(), flat);
    EXPECT_THROW(other.set_flat_parameters(Vector::Zero(3)), ValidationError);
}

TEST(DenseNet, BackwardMatchesFiniteDifferences) {
    for (int instance = 0; instance < 20; ++instance) {
        Rng rng(static_cast<std::uint64_t>(instance));
        const bool ln = instance % 2 == 0;
        const Activation out_act = instance % 3 == 0 ? Activation::identity : Activation::tanh;
        const DenseNet net = DenseNet::mlp(4, {6, 5}, 3, out_act, ln, rng);
        const Matrix x = oracle::random_matrix(4, 7, rng, 2.0).array() - 1.0;
        const Matrix c = oracle::random_matrix(3, 7, rng, 2.0).array() - 1.0;

        DenseNet::Tape tape;
        net.forward(x, tape);
        Matrix grad_x;
        const Vector analytic = net.backward(tape, c, &grad_x).flat();
        const Vector numeric = oracle::finite_difference(
            [&](const Vector& p) { return weighted_output(net, p, x, c); }, net.flat_parameters());
        EXPECT_LT(oracle::relative_error(analytic, numeric), 1e-4) << "instance " << instance;

        const Vector numeric_x = oracle::finite_difference(
            [&](const Vector& flat_x) {
                return (net.forward(Matrix(flat_x.reshaped(4, 7))).array() * c.array()).sum();
            },
            x.reshaped());
        EXPECT_LT(oracle::relative_error(grad_x.reshaped(), numeric_x), 1e-4) << "instance " << instance;
    }
}

TEST(Losses, HuberExamples) {
    EXPECT_EQ(huber(0.0, 1.0), 0.0);
    EXPECT_DOUBLE_EQ(huber(0.5, 1.0), 0.125);
    EXPECT_DOUBLE_EQ(huber(-3.0, 1.0), 2.5);
    EXPECT_DOUBLE_EQ(huber(3.0, 2.0), 4.0);
    EXPECT_DOUBLE_EQ(huber_derivative(0.5, 1.0), 0.5);
    EXPECT_DOUBLE_EQ(huber_derivative(-3.0, 1.0), -1.0);
    for (double r : {-2.5, -0.3, 0.7, 1.9}) {
        const double fd = (huber(r + 1e-6, 1.0) - huber(r - 1e-6, 1.0)) / 2e-6;
        EXPECT_NEAR(huber_derivative(r, 1.0), fd, 1e-6);
    }
}

TEST(Losses, WeightDecayGradientMatchesFiniteDifferences) {
    for (int instance = 0; instance < 20; ++instance) {
        Rng rng(100 + static_cast<std::uint64_t>(instance));
        const DenseNet net = DenseNet::mlp(3, {4}, 2, Activation::identity, false, rng);
        const double decay = 1e-4 * (1 + instance);
        const Vector numeric = oracle::finite_difference(
            [&](const Vector& p) {
                DenseNet copy = net;
                copy.set_flat_parameters(p);
                return weight_decay_penalty(copy, decay);
            },
            net.flat_parameters());
        EXPECT_LT(oracle::relative_error(weight_decay_gradient(net, decay).flat(), numeric), 1e-4);
    }
}

TEST(Optimizer, SgdStepWithDecoupledDecay) {
    Matrix w(1, 1);
    w << 2.0;
    DenseNet net = single_layer(w, Vector::Ones(1), Activation::identity);
    OptimizerConfig cfg;
    cfg.kind = OptimizerKind::sgd;
    cfg.learning_rate = 0.1;
    cfg.weight_decay = 0.5;
    Optimizer opt(net, cfg);
    Gradients g = net.zero_gradients();
    g.weight[0](0, 0) = 1.0;
    g.bias[0](0) = -2.0;
    opt.step(net, g);
    // w = 2 * (1 - 0.05) - 0.1 * 1, b = 1 * 0.95 + 0.2
    EXPECT_DOUBLE_EQ(net.layers()[0].weight(0, 0), 1.8);
    EXPECT_DOUBLE_EQ(net.layers()[0].bias(0), 1.15);
}

TEST(Optimizer, ClipsGlobalGradientNorm) {
    DenseNet net = single_layer(Matrix::Zero(1, 1), Vector::Zero(1), Activation::identity);
    OptimizerConfig cfg;
    cfg.kind = OptimizerKind::sgd;
    cfg.learning_rate = 1.0;
    cfg.weight_decay = 0.0;
    cfg.grad_clip_norm = 10.0;
    Optimizer opt(net, cfg);
    Gradients g = net.zero_gradients();
    g.weight[0](0, 0) = 30.0;
    g.bias[0](0) = 40.0;
    opt.step(net, g);
    EXPECT_DOUBLE_EQ(net.layers()[0].weight(0, 0), -6.0);
    EXPECT_DOUBLE_EQ(net.layers()[0].bias(0), -8.0);
}

TEST(Optimizer, AdamFirstStepHasLearningRateMagnitude) {
    DenseNet net = single_layer(Matrix::Zero(1, 2), Vector::Zero(1), Activation::identity);
    OptimizerConfig cfg;
    cfg.learning_rate = 0.01;
    cfg.weight_decay = 0.0;
    Optimizer opt(net, cfg);
    Gradients g = net.zero_gradients();
    g.weight[0] << 3.0, -0.001;
    g.bias[0] << 0.0;
    opt.step(net, g);
    EXPECT_NEAR(net.layers()[0].weight(0, 0), -0.01, 1e-8);
    EXPECT_NEAR(net.layers()[0].weight(0, 1), 0.01, 1e-4);
    EXPECT_EQ(net.layers()[0].bias(0), 0.0);
}

TEST(Optimizer, AdamMinimizesQuadratic) {
    Rng rng(1);
    DenseNet net = DenseNet::mlp(2, {8}, 1, Activation::identity, false, rng);
    OptimizerConfig cfg;
    cfg.learning_rate = 1e-2;
    Optimizer opt(net, cfg);
    const Matrix x = oracle::random_matrix(2, 64, rng);
    const Vector y = (x.row(0) - 2.0 * x.row(1)).transpose();
    auto loss = [&] { return (net.forward(x).row(0).transpose() - y).squaredNorm() / 64.0; };
    const double before = loss();
    for (int it = 0; it < 500; ++it) {
        DenseNet::Tape tape;
        const Matrix out = net.forward(x, tape);
        const Matrix grad = 2.0 * (out.row(0) - y.transpose()) / 64.0;
        opt.step(net, net.backward(tape, grad));
    }
    EXPECT_LT(loss(), 0.01 * before);
}

TEST(TargetNetwork, EmaUpdate) {
    Rng rng(2);
    const DenseNet online = DenseNet::mlp(3, {4}, 2, Activation::identity, false, rng);
    DenseNet target = DenseNet::mlp(3, {4}, 2, Activation::identity, false, rng);
    const DenseNet original = target;

    DenseNet copy = target;
    ema_update(copy, online, 0.0);
    EXPECT_EQ(copy.flat_parameters(), original.flat_parameters());
    ema_update(copy, online, 1.0);
    EXPECT_EQ(copy.flat_parameters(), online.flat_parameters());

    const double gap0 = (original.flat_parameters() - online.flat_parameters()).norm();
    for (int k = 1; k <= 50; ++k) {
        ema_update(target, online, 0.1);
        const double gap = (target.flat_parameters() - online.flat_parameters()).norm();
        EXPECT_NEAR(gap, std::pow(0.9, k) * gap0, 1e-10);
    }

    DenseNet other_shape = DenseNet::mlp(3, {5}, 2, Activation::identity, false, rng);
    EXPECT_THROW(ema_update(other_shape, online, 0.5), ValidationError);
    EXPECT_THROW(ema_update(target, online, 1.5), ValidationError);
}

TEST(Checkpoint, RoundTripIsExact) {
    Rng rng(4);
    const DenseNet net = DenseNet::mlp(5, {7, 3}, 4, Activation::tanh, true, rng);
    std::stringstream ss;
    write_checkpoint(ss, net);
    const std::string bytes = ss.str();
    EXPECT_EQ(bytes.substr(0, 8), std::string("ROPENET\0", 8));
    EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 1u);   // version, little-endian
    EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 3u);  // layer count
    EXPECT_EQ(static_cast<unsigned char>(bytes[16]), 1u);  // layer-norm flag
    EXPECT_EQ(bytes.size(), 17u + 3u * 9u + 8u * static_cast<std::size_t>(net.parameter_count()));

    std::stringstream in(bytes);
    const DenseNet back = read_checkpoint(in);
    EXPECT_TRUE(back.same_shape(net));
    EXPECT_TRUE(back.layer_norm_head());
    EXPECT_EQ(back.layers().back().activation, Activation::tanh);
    EXPECT_EQ(parameter_checksum(back), parameter_checksum(net));
    const Matrix x = oracle::random_matrix(5, 3, rng);
    EXPECT_EQ(back.forward(x), net.forward(x));
}

TEST(Checkpoint, RejectsCorruptInput) {
    Rng rng(6);
    const DenseNet net = DenseNet::mlp(2, {3}, 1, Activation::identity, false, rng);
    std::stringstream ss;
    write_checkpoint(ss, net);
    const std::string bytes = ss.str();

    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    std::stringstream s1(bad_magic);
    EXPECT_THROW(read_checkpoint(s1), ValidationError);

    std::stringstream s2(bytes.substr(0, bytes.size() - 5));
    EXPECT_THROW(read_checkpoint(s2), ValidationError);

    std::string bad_version = bytes;
    bad_version[8] = 9;
    std::stringstream s3(bad_version);
    EXPECT_THROW(read_checkpoint(s3), ValidationError);

    EXPECT_THROW(load_checkpoint("/nonexistent/net.bin"), ValidationError);
}

TEST(Checkpoint, ChecksumDetectsChanges) {
    Rng rng(8);
    DenseNet net = DenseNet::mlp(2, {3}, 1, Activation::identity, false, rng);
    const auto before = parameter_checksum(net);
    net.layers()[0].bias(1) += 1e-12;
    EXPECT_NE(parameter_checksum(net), before);
}
