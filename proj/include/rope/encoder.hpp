#pragma once

#include "rope/training.hpp"

#include <cmath>
#include <functional>
#include <numbers>

namespace rope {

inline constexpr double kAngularKappa = 1e-6;
inline constexpr double kZeroNormThreshold = 1e-8;

/// Online/target pair of state-action encoders. The head is LayerNorm then tanh.
struct EncoderNetwork {
    DenseNet online;
    DenseNet target;
    int output_dim = 0;
    double beta = 1.0;

    static EncoderNetwork create(int input_dim, const std::vector<int>& hidden, int output_dim, double beta, Rng& rng) {
        require(beta >= 0.0, "beta must be nonnegative");
        require(output_dim >= 2, "encoder output needs at least 2 dimensions for layer normalization");
        EncoderNetwork e;
        e.online = DenseNet::mlp(input_dim, hidden, output_dim, Activation::tanh, true, rng);
        e.target = e.online;
        e.output_dim = output_dim;
        e.beta = beta;
        return e;
    }

    int input_dim() const { return online.input_dim(); }

    /// Frozen encoding used downstream: the online network.
    Matrix encode(const Matrix& inputs) const { return online.forward(inputs); }
};

/// theta = atan2(sqrt(1 - cs^2 + kappa), cs); zero when either vector is (near) zero.
inline double angular_distance(const Vector& u, const Vector& v, double kappa = kAngularKappa) {
    const double nu = u.norm(), nv = v.norm();
    if (nu < kZeroNormThreshold || nv < kZeroNormThreshold) return 0.0;
    const double cs = std::clamp(u.dot(v) / (nu * nv), -1.0, 1.0);
    return std::atan2(std::sqrt(1.0 - cs * cs + kappa), cs);
}

/// (|u|^2 + |v|^2) / 2 + beta * theta(u, v)
inline double encoding_distance(const Vector& u, const Vector& v, double beta, double kappa = kAngularKappa) {
    return 0.5 * (u.squaredNorm() + v.squaredNorm()) + beta * angular_distance(u, v, kappa);
}

/// Gradient of encoding_distance with respect to its first argument.
inline Vector encoding_distance_grad_u(const Vector& u, const Vector& v, double beta, double kappa = kAngularKappa) {
    Vector g = u;
    const double nu = u.norm(), nv = v.norm();
    if (beta == 0.0 || nu < kZeroNormThreshold || nv < kZeroNormThreshold) return g;
    const double cs_raw = u.dot(v) / (nu * nv);
    if (std::abs(cs_raw) > 1.0) return g;
    // d theta / d cs = -1 / sqrt(1 - cs^2 + kappa)
    const double dtheta = -1.0 / std::sqrt(1.0 - cs_raw * cs_raw + kappa);
    g += beta * dtheta * (v / (nu * nv) - cs_raw * u / (nu * nu));
    return g;
}

/// d~(x1; x2) with the online encoder on x1 and the target encoder on x2.
inline double parametric_distance(const EncoderNetwork& enc, const Vector& x1, const Vector& x2) {
    return encoding_distance(enc.online.forward(x1), enc.target.forward(x2), enc.beta);
}

/// Distances between matching columns of two encoding batches.
inline Vector batch_distance(const Matrix& u, const Matrix& v, double beta) {
    Vector out(u.cols());
    for (Eigen::Index k = 0; k < u.cols(); ++k) out(k) = encoding_distance(u.col(k), v.col(k), beta);
    return out;
}

struct LossAndGradient {
    double loss = 0.0;
    Gradients gradients;
    double statistic = 0.0;
};

/**
 * Mean Huber loss between d~(online(x1); v) and fixed targets, where v are
 * precomputed target-network encodings of the second arguments.
 */
inline LossAndGradient rope_loss_and_gradient(const DenseNet& online, const Matrix& x1, const Matrix& v,
                                              const Vector& targets, double beta, double delta) {
    require(x1.cols() == v.cols() && x1.cols() == targets.size(), "batch sizes disagree");
    DenseNet::Tape tape;
    const Matrix u = online.forward(x1, tape);
    const auto b = static_cast<double>(x1.cols());
    LossAndGradient out;
    Matrix grad_u(u.rows(), u.cols());
    for (Eigen::Index k = 0; k < u.cols(); ++k) {
        const double dist = encoding_distance(u.col(k), v.col(k), beta);
        const double res = dist - targets(k);
        out.loss += huber(res, delta) / b;
        out.statistic += dist / b;
        grad_u.col(k) = (huber_derivative(res, delta) / b) * encoding_distance_grad_u(u.col(k), v.col(k), beta);
    }
    out.gradients = online.backward(tape, grad_u);
    return out;
}

struct RopeTrainResult {
    EncoderNetwork encoder;
    std::vector<TrainLogRow> log;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    int target_updates = 0;
    /// Every reward in the dataset is identical, so the short-term term vanishes.
    bool collapse_risk = false;
};

struct RopeOptions {
    double beta = 1.0;
    int output_dim = 16;
};

/**
 * Learns the encoder by bootstrapped regression of the parametric distance
 * onto |r1 - r2| + gamma * d~_target(x1'; x2'), with x1, x2 drawn as two
 * independent mini-batches paired element-wise and next actions from pi_e.
 * The long-term term is dropped only when both next states are terminal.
 */
inline RopeTrainResult rope_train(const DesignData& data, double gamma, const TrainConfig& config,
                                  const RopeOptions& options, const std::function<void(int, double)>& on_step = {}) {
    config.validate();
    require(data.size() >= 1, "dataset is empty");
    require(gamma >= 0.0 && gamma < 1.0, "gamma must lie in [0, 1)");

    Rng init_rng(derive_seed(config.seed, 0x0e1c));
    Rng rng(derive_seed(config.seed, 0x5a3b));
    RopeTrainResult result;
    result.encoder = EncoderNetwork::create(data.input_dim(), config.hidden, options.output_dim, options.beta, init_rng);
    result.collapse_risk = (data.reward.array() == data.reward(0)).all();
    EncoderNetwork& enc = result.encoder;
    Optimizer opt(enc.online, config.optimizer_config());

    // Target encodings only change on a target update, so cache them over the
    // whole dataset when that is cheaper than encoding each batch.
    const Eigen::Index n = data.size();
    const bool cache = static_cast<double>(config.target_update_every) * 3.0 * config.batch_size >=
                       static_cast<double>(n) * (1 + data.n_actions);
    std::vector<Matrix> next_inputs;
    for (int a = 0; a < data.n_actions; ++a) next_inputs.push_back(data.next_input(a));
    Matrix cached_current;
    std::vector<Matrix> cached_next(static_cast<std::size_t>(data.n_actions));
    auto refresh = [&] {
        cached_current = enc.target.forward(data.current);
        for (int a = 0; a < data.n_actions; ++a)
            cached_next[static_cast<std::size_t>(a)] = enc.target.forward(next_inputs[static_cast<std::size_t>(a)]);
    };
    if (cache) refresh();

    const int bsz = config.batch_size;
    std::vector<double> losses;
    losses.reserve(static_cast<std::size_t>(config.total_gradient_steps));
    double window_loss = 0.0, window_stat = 0.0;
    int window = 0;
    Matrix v2(options.output_dim, bsz), n1(options.output_dim, bsz), n2(options.output_dim, bsz);
    Vector targets(bsz);

    for (int step = 1; step <= config.total_gradient_steps; ++step) {
        const std::vector<int> i = detail::sample_batch(n, bsz, rng);
        const std::vector<int> j = detail::sample_batch(n, bsz, rng);
        std::vector<int> a1(static_cast<std::size_t>(bsz)), a2(static_cast<std::size_t>(bsz));
        for (int k = 0; k < bsz; ++k) {
            a1[static_cast<std::size_t>(k)] = sample_index(data.next_policy.col(i[static_cast<std::size_t>(k)]), rng);
            a2[static_cast<std::size_t>(k)] = sample_index(data.next_policy.col(j[static_cast<std::size_t>(k)]), rng);
        }
        if (cache) {
            for (int k = 0; k < bsz; ++k) {
                const auto ik = static_cast<std::size_t>(k);
                v2.col(k) = cached_current.col(j[ik]);
                n1.col(k) = cached_next[static_cast<std::size_t>(a1[ik])].col(i[ik]);
                n2.col(k) = cached_next[static_cast<std::size_t>(a2[ik])].col(j[ik]);
            }
        } else {
            Matrix x1n(data.input_dim(), bsz), x2n(data.input_dim(), bsz);
            for (int k = 0; k < bsz; ++k) {
                const auto ik = static_cast<std::size_t>(k);
                x1n.col(k) = next_inputs[static_cast<std::size_t>(a1[ik])].col(i[ik]);
                x2n.col(k) = next_inputs[static_cast<std::size_t>(a2[ik])].col(j[ik]);
            }
            v2 = enc.target.forward(detail::gather_columns(data.current, j));
            n1 = enc.target.forward(x1n);
            n2 = enc.target.forward(x2n);
        }
        for (int k = 0; k < bsz; ++k) {
            const auto ik = static_cast<std::size_t>(k);
            const double both_done = data.done(i[ik]) * data.done(j[ik]);
            targets(k) = std::abs(data.reward(i[ik]) - data.reward(j[ik])) +
                         gamma * (1.0 - both_done) * encoding_distance(n1.col(k), n2.col(k), enc.beta);
        }

        LossAndGradient lg =
            rope_loss_and_gradient(enc.online, detail::gather_columns(data.current, i), v2, targets, enc.beta,
                                   config.huber_delta);
        if (!std::isfinite(lg.loss))
            throw TrainingError("encoder loss became non-finite at step " + std::to_string(step) +
                                " (mean distance " + std::to_string(lg.statistic) + ", last finite loss " +
                                std::to_string(losses.empty() ? 0.0 : losses.back()) + ")");
        opt.step(enc.online, std::move(lg.gradients));
        if (!enc.online.finite())
            throw TrainingError("encoder parameters became non-finite at step " + std::to_string(step));
        losses.push_back(lg.loss);
        window_loss += lg.loss;
        window_stat += lg.statistic;
        ++window;
        if (on_step) on_step(step, lg.loss);

        if (step % config.target_update_every == 0) {
            ema_update(enc.target, enc.online, config.target_tau);
            ++result.target_updates;
            if (cache) refresh();
        }
        if (step % config.log_every == 0 || step == config.total_gradient_steps) {
            result.log.push_back({step, window_loss / window, window_stat / window, result.target_updates});
            window_loss = window_stat = 0.0;
            window = 0;
        }
    }
    std::tie(result.initial_loss, result.final_loss) = detail::loss_endpoints(losses);
    return result;
}

} // namespace rope
