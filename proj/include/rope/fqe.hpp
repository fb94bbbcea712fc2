#pragma once

#include "rope/encoder.hpp"
#include "rope/mdp.hpp"

#include <functional>

namespace rope {

enum class FqeVariant { plain, clip, deep };

inline const char* to_string(FqeVariant v) {
    switch (v) {
        case FqeVariant::plain: return "plain";
        case FqeVariant::clip: return "clip";
        case FqeVariant::deep: return "deep";
    }
    return "unknown";
}

inline FqeVariant fqe_variant_from_string(const std::string& s) {
    if (s == "plain") return FqeVariant::plain;
    if (s == "clip") return FqeVariant::clip;
    if (s == "deep") return FqeVariant::deep;
    throw ValidationError("unknown FQE variant: " + s);
}

/// Adjusts a config for a variant: clip turns on dataset-range clipping, deep doubles the hidden stack.
inline TrainConfig apply_variant(TrainConfig config, FqeVariant variant) {
    if (variant == FqeVariant::clip) config.clip_targets = true;
    if (variant == FqeVariant::deep) {
        const std::vector<int> h = config.hidden;
        config.hidden.insert(config.hidden.end(), h.begin(), h.end());
    }
    return config;
}

/// Q-network inputs: raw design columns, or frozen encodings of them.
struct FqeInputs {
    Matrix current;
    std::vector<Matrix> next; // one matrix per next action
    Vector reward;
    Vector done;
    Matrix next_policy;

    Eigen::Index size() const noexcept { return reward.size(); }
    int input_dim() const noexcept { return static_cast<int>(current.rows()); }
};

inline FqeInputs make_fqe_inputs(const DesignData& data, const EncoderNetwork* encoder = nullptr) {
    FqeInputs in;
    auto map = [&](const Matrix& x) { return encoder ? encoder->encode(x) : x; };
    in.current = map(data.current);
    for (int a = 0; a < data.n_actions; ++a) in.next.push_back(map(data.next_input(a)));
    in.reward = data.reward;
    in.done = data.done;
    in.next_policy = data.next_policy;
    return in;
}

/// Mean Huber loss of q(inputs) against fixed targets.
inline LossAndGradient fqe_loss_and_gradient(const DenseNet& q, const Matrix& inputs, const Vector& targets,
                                             double delta) {
    require(inputs.cols() == targets.size(), "batch sizes disagree");
    DenseNet::Tape tape;
    const Matrix pred = q.forward(inputs, tape);
    const auto b = static_cast<double>(inputs.cols());
    LossAndGradient out;
    Matrix grad(1, inputs.cols());
    for (Eigen::Index k = 0; k < inputs.cols(); ++k) {
        const double res = pred(0, k) - targets(k);
        out.loss += huber(res, delta) / b;
        out.statistic += std::abs(pred(0, k)) / b;
        grad(0, k) = huber_derivative(res, delta) / b;
    }
    out.gradients = q.backward(tape, grad);
    return out;
}

struct ClipStats {
    bool enabled = false;
    double lo = 0.0;
    double hi = 0.0;
    long long targets = 0;
    long long clipped = 0;      // targets moved by the clamp
    long long within_range = 0; // regression targets inside [lo, hi] after clamping
    double min_target = std::numeric_limits<double>::infinity();
    double max_target = -std::numeric_limits<double>::infinity();
};

struct FqeResult {
    DenseNet q;
    std::vector<TrainLogRow> log;
    bool diverged = false;
    std::string divergence_reason;
    int steps_completed = 0;
    int target_updates = 0;
    double divergence_threshold = 0.0;
    ClipStats clip;
};

/// Q values whose running mean magnitude exceeds this mark a run as diverged.
inline double divergence_threshold(double reward_abs_max, double gamma) {
    return 1e3 * (reward_abs_max > 0.0 ? reward_abs_max : 1.0) / (1.0 - gamma);
}

/**
 * Fitted Q-evaluation: Huber regression of q(x) onto
 * r + gamma * (1 - done) * sum_a' pi_e(a'|s') q_target(x', a'),
 * optionally clamped to the clip range. `on_checkpoint` is called every
 * checkpoint_every steps and after the final step.
 */
inline FqeResult fqe_train(const FqeInputs& in, double gamma, const TrainConfig& config,
                           const std::function<void(int, const DenseNet&)>& on_checkpoint = {}) {
    config.validate();
    require(in.size() >= 1, "dataset is empty");
    require(gamma >= 0.0 && gamma < 1.0, "gamma must lie in [0, 1)");

    Rng init_rng(derive_seed(config.seed, 0xf0e1));
    Rng rng(derive_seed(config.seed, 0xf0e2));
    FqeResult result;
    result.q = DenseNet::mlp(in.input_dim(), config.hidden, 1, Activation::identity, false, init_rng);
    DenseNet target = result.q;
    Optimizer opt(result.q, config.optimizer_config());

    const double r_lo = in.reward.minCoeff(), r_hi = in.reward.maxCoeff();
    result.divergence_threshold = divergence_threshold(std::max(std::abs(r_lo), std::abs(r_hi)), gamma);
    ClipStats& clip = result.clip;
    if (config.clip_targets) {
        clip.enabled = true;
        if (config.clip_range) {
            std::tie(clip.lo, clip.hi) = *config.clip_range;
        } else {
            clip.lo = r_lo / (1.0 - gamma);
            clip.hi = r_hi / (1.0 - gamma);
        }
    }

    const Eigen::Index n = in.size();
    const int n_actions = static_cast<int>(in.next.size());
    const bool cache =
        static_cast<double>(config.target_update_every) * config.batch_size >= static_cast<double>(n);
    Matrix next_values; // n_actions x N
    auto refresh = [&] {
        next_values.resize(n_actions, n);
        for (int a = 0; a < n_actions; ++a) next_values.row(a) = target.forward(in.next[static_cast<std::size_t>(a)]);
    };
    if (cache) refresh();

    const int bsz = config.batch_size;
    Vector targets(bsz);
    double running_abs_q = 0.0;
    double window_loss = 0.0, window_stat = 0.0;
    int window = 0;

    auto mark_diverged = [&](int step, const std::string& why) {
        result.diverged = true;
        result.divergence_reason = why + " at step " + std::to_string(step);
    };

    for (int step = 1; step <= config.total_gradient_steps; ++step) {
        const std::vector<int> idx = detail::sample_batch(n, bsz, rng);
        Matrix batch_next;
        if (!cache) {
            batch_next.resize(n_actions, bsz);
            for (int a = 0; a < n_actions; ++a)
                batch_next.row(a) = target.forward(detail::gather_columns(in.next[static_cast<std::size_t>(a)], idx));
        }
        for (int k = 0; k < bsz; ++k) {
            const int i = idx[static_cast<std::size_t>(k)];
            const double v = cache ? in.next_policy.col(i).dot(next_values.col(i))
                                   : in.next_policy.col(i).dot(batch_next.col(k));
            double y = in.reward(i) + gamma * (1.0 - in.done(i)) * v;
            if (clip.enabled) {
                const double c = std::clamp(y, clip.lo, clip.hi);
                if (c != y) ++clip.clipped;
                y = c;
                if (y >= clip.lo && y <= clip.hi) ++clip.within_range;
                ++clip.targets;
                clip.min_target = std::min(clip.min_target, y);
                clip.max_target = std::max(clip.max_target, y);
            }
            targets(k) = y;
        }

        LossAndGradient lg;
        try {
            lg = fqe_loss_and_gradient(result.q, detail::gather_columns(in.current, idx), targets, config.huber_delta);
        } catch (const NumericalFault&) {
            mark_diverged(step, "non-finite Q values");
            break;
        }
        if (!std::isfinite(lg.loss)) {
            mark_diverged(step, "non-finite loss");
            break;
        }
        running_abs_q = step == 1 ? lg.statistic : 0.99 * running_abs_q + 0.01 * lg.statistic;
        if (running_abs_q > result.divergence_threshold) {
            mark_diverged(step, "running mean |q| " + std::to_string(running_abs_q) + " exceeded threshold");
            break;
        }
        opt.step(result.q, std::move(lg.gradients));
        if (!result.q.finite()) {
            mark_diverged(step, "non-finite parameters");
            break;
        }
        result.steps_completed = step;
        window_loss += lg.loss;
        window_stat += lg.statistic;
        ++window;

        if (step % config.target_update_every == 0) {
            ema_update(target, result.q, config.target_tau);
            ++result.target_updates;
            if (cache) refresh();
        }
        if (step % config.log_every == 0 || step == config.total_gradient_steps) {
            result.log.push_back({step, window_loss / window, window_stat / window, result.target_updates});
            window_loss = window_stat = 0.0;
            window = 0;
        }
        if (on_checkpoint && ((config.checkpoint_every > 0 && step % config.checkpoint_every == 0) ||
                              step == config.total_gradient_steps))
            on_checkpoint(step, result.q);
    }
    return result;
}

/**
 * Weighted start inputs for value estimation: each column is a state-action
 * input and weights sum to one.
 */
struct InitialInputs {
    Matrix inputs;
    Vector weights;
};

/**
 * Exact expectation over d0 and pi_e. With stochastic features each start
 * state is represented by `samples` feature draws from a seeded engine.
 */
inline InitialInputs make_initial_inputs(const TabularMDP& mdp, const PolicyTable& pi_e, const FeatureMap& features,
                                         int samples = 64, std::uint64_t seed = 0) {
    check_compatible(mdp, pi_e);
    require(features.n_states() == mdp.n_states(), "feature map does not match MDP");
    require(samples >= 1, "samples must be positive");
    const int draws = features.stochastic() ? samples : 1;
    Rng rng(derive_seed(seed, 0x1417));
    std::vector<Vector> cols;
    std::vector<double> w;
    for (int s = 0; s < mdp.n_states(); ++s) {
        const double p0 = mdp.initial_dist()(s);
        if (p0 <= 0.0) continue;
        for (int k = 0; k < draws; ++k) {
            const Vector f = features.state_features(s, rng);
            for (int a = 0; a < mdp.n_actions(); ++a) {
                if (pi_e(s, a) <= 0.0) continue;
                cols.push_back(pair_input(f, a, mdp.n_actions()));
                w.push_back(p0 * pi_e(s, a) / draws);
            }
        }
    }
    InitialInputs out;
    out.inputs.resize(features.state_dim() + mdp.n_actions(), static_cast<Eigen::Index>(cols.size()));
    out.weights.resize(static_cast<Eigen::Index>(w.size()));
    for (std::size_t k = 0; k < cols.size(); ++k) {
        out.inputs.col(static_cast<Eigen::Index>(k)) = cols[k];
        out.weights(static_cast<Eigen::Index>(k)) = w[k];
    }
    return out;
}

/// Equal-weight start inputs from explicit initial observations paired with pi_e actions.
inline InitialInputs make_initial_inputs(const Matrix& state_features, const std::vector<int>& states,
                                         const PolicyTable& pi_e) {
    require(state_features.cols() == static_cast<Eigen::Index>(states.size()) && !states.empty(),
            "one state id per initial observation is required");
    const int A = pi_e.n_actions();
    InitialInputs out;
    out.inputs = Matrix::Zero(state_features.rows() + A, static_cast<Eigen::Index>(states.size()) * A);
    out.weights = Vector::Zero(out.inputs.cols());
    for (std::size_t k = 0; k < states.size(); ++k)
        for (int a = 0; a < A; ++a) {
            const auto c = static_cast<Eigen::Index>(k) * A + a;
            out.inputs.col(c).head(state_features.rows()) = state_features.col(static_cast<Eigen::Index>(k));
            out.inputs(state_features.rows() + a, c) = 1.0;
            out.weights(c) = pi_e(states[k], a) / static_cast<double>(states.size());
        }
    return out;
}

/// sum_k w_k q(x_k) for any callable mapping an input batch to a 1 x n row of values.
template <typename QFunction>
double expected_initial_value(QFunction&& q, const InitialInputs& init) {
    const Matrix values = q(init.inputs);
    require(values.rows() == 1 && values.cols() == init.weights.size(), "Q function returned wrong shape");
    return values.row(0).dot(init.weights.transpose());
}

inline double fqe_estimate(const DenseNet& q, const InitialInputs& init, const EncoderNetwork* encoder = nullptr) {
    return expected_initial_value(
        [&](const Matrix& x) { return q.forward(encoder ? encoder->encode(x) : x); }, init);
}

/// Q-network evaluated on every (s, a) with deterministic features, as an S x A table.
inline Matrix q_network_table(const DenseNet& q, const TabularMDP& mdp, const FeatureMap& features,
                              const EncoderNetwork* encoder = nullptr) {
    require(!features.stochastic(), "tabulating a Q network needs deterministic features");
    Rng unused(0);
    Matrix inputs(features.state_dim() + mdp.n_actions(), mdp.n_pairs());
    for (int s = 0; s < mdp.n_states(); ++s) {
        const Vector f = features.state_features(s, unused);
        for (int a = 0; a < mdp.n_actions(); ++a) inputs.col(mdp.pair(s, a)) = pair_input(f, a, mdp.n_actions());
    }
    const Matrix values = q.forward(encoder ? encoder->encode(inputs) : inputs);
    Matrix table(mdp.n_states(), mdp.n_actions());
    for (int x = 0; x < mdp.n_pairs(); ++x) table(mdp.state_of(x), mdp.action_of(x)) = values(0, x);
    return table;
}

} // namespace rope
