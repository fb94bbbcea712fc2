#pragma once

#include "rope/dataset.hpp"
#include "rope/nn.hpp"

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace rope {

struct TrainConfig {
    OptimizerKind optimizer = OptimizerKind::adam;
    double learning_rate = 3e-4;
    double weight_decay = 1e-4;
    int batch_size = 128;
    int total_gradient_steps = 20000;
    double target_tau = 0.005;
    int target_update_every = 100;
    double huber_delta = 1.0;
    bool clip_targets = false;
    std::optional<std::pair<double, double>> clip_range;
    std::uint64_t seed = 0;
    std::vector<int> hidden = {64, 64};
    double grad_clip_norm = 10.0;
    int log_every = 100;
    /// Steps between recorded estimate checkpoints; 0 records only the final one.
    int checkpoint_every = 0;

    static TrainConfig desk() { return {}; }

    static TrainConfig full() {
        TrainConfig c;
        c.learning_rate = 1e-5;
        c.weight_decay = 1e-2;
        c.batch_size = 512;
        c.total_gradient_steps = 300000;
        c.hidden = {256, 256};
        return c;
    }

    void validate() const {
        require(learning_rate > 0.0, "learning_rate must be positive");
        require(weight_decay >= 0.0, "weight_decay must be nonnegative");
        require(batch_size >= 1, "batch_size must be positive");
        require(total_gradient_steps >= 1, "total_gradient_steps must be positive");
        require(target_tau > 0.0 && target_tau <= 1.0, "target_tau must lie in (0, 1]");
        require(target_update_every >= 1, "target_update_every must be positive");
        require(huber_delta > 0.0, "huber_delta must be positive");
        require(log_every >= 1, "log_every must be positive");
        require(checkpoint_every >= 0, "checkpoint_every must be nonnegative");
        require(!hidden.empty(), "at least one hidden layer is required");
        if (clip_range) {
            require(clip_targets, "clip_range is set but clip_targets is off");
            require(clip_range->first <= clip_range->second, "clip_range lower bound exceeds upper bound");
        }
    }

    OptimizerConfig optimizer_config() const {
        OptimizerConfig o;
        o.kind = optimizer;
        o.learning_rate = learning_rate;
        o.weight_decay = weight_decay;
        o.grad_clip_norm = grad_clip_norm;
        return o;
    }
};

/// [r_min / (1 - gamma), r_max / (1 - gamma)] over the dataset rewards.
inline std::pair<double, double> dataset_clip_range(const TransitionDataset& data, double gamma) {
    require(!data.transitions.empty(), "dataset is empty");
    return {data.reward_min() / (1.0 - gamma), data.reward_max() / (1.0 - gamma)};
}

/// One row of a training CSV log.
struct TrainLogRow {
    int step = 0;
    double loss = 0.0;
    double statistic = 0.0; // mean |q| for FQE, mean distance for the encoder
    int target_updates = 0;
};

/**
 * Dataset arranged column-wise for batched training. Inputs are state
 * features followed by a one-hot action.
 */
struct DesignData {
    int n_actions = 0;
    int state_dim = 0;
    Matrix current;        // (state_dim + n_actions) x N
    Matrix next_features;  // state_dim x N
    Vector reward;
    Vector done;           // 1 where the next state is terminal
    Matrix next_policy;    // n_actions x N, pi_e(. | s')

    Eigen::Index size() const noexcept { return reward.size(); }
    int input_dim() const noexcept { return state_dim + n_actions; }

    /// Next-state inputs with every column paired with `action`.
    Matrix next_input(int action) const {
        Matrix out = Matrix::Zero(input_dim(), size());
        out.topRows(state_dim) = next_features;
        out.row(state_dim + action).setOnes();
        return out;
    }
};

/**
 * Uses the features stored in the dataset when present, otherwise `features`,
 * which must then be deterministic.
 */
inline DesignData make_design_data(const TransitionDataset& data, const PolicyTable& pi_e,
                                   const FeatureMap* features) {
    require(!data.transitions.empty(), "dataset is empty");
    const int n_actions = pi_e.n_actions();
    DesignData d;
    d.n_actions = n_actions;
    if (data.has_features()) {
        d.state_dim = data.feature_dim;
    } else {
        require(features != nullptr, "dataset has no features and no feature map was given");
        require(!features->stochastic(), "a stochastic feature map needs features stored in the dataset");
        d.state_dim = features->state_dim();
    }
    const auto n = static_cast<Eigen::Index>(data.size());
    d.current = Matrix::Zero(d.input_dim(), n);
    d.next_features.resize(d.state_dim, n);
    d.reward.resize(n);
    d.done.resize(n);
    d.next_policy.resize(n_actions, n);
    Rng unused(0);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Transition& t = data.transitions[static_cast<std::size_t>(i)];
        require(t.state < pi_e.n_states() && t.next_state < pi_e.n_states(), "dataset state outside policy table");
        require(t.action >= 0 && t.action < n_actions, "dataset action outside policy table");
        if (data.has_features()) {
            d.current.col(i).head(d.state_dim) = *t.state_features;
            d.next_features.col(i) = *t.next_state_features;
        } else {
            d.current.col(i).head(d.state_dim) = features->state_features(t.state, unused);
            d.next_features.col(i) = features->state_features(t.next_state, unused);
        }
        d.current(d.state_dim + t.action, i) = 1.0;
        d.reward(i) = t.reward;
        d.done(i) = t.done ? 1.0 : 0.0;
        d.next_policy.col(i) = pi_e.probs().row(t.next_state).transpose();
    }
    return d;
}

namespace detail {

inline Matrix gather_columns(const Matrix& m, const std::vector<int>& idx) {
    Matrix out(m.rows(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = m.col(idx[k]);
    return out;
}

inline std::vector<int> sample_batch(Eigen::Index n, int batch, Rng& rng) {
    std::uniform_int_distribution<int> pick(0, static_cast<int>(n) - 1);
    std::vector<int> idx(static_cast<std::size_t>(batch));
    for (int& i : idx) i = pick(rng);
    return idx;
}

/// Mean of the first and last `window` entries of a loss trace.
inline std::pair<double, double> loss_endpoints(const std::vector<double>& losses) {
    if (losses.empty()) return {0.0, 0.0};
    const std::size_t w = std::max<std::size_t>(1, std::min<std::size_t>(200, losses.size() / 10));
    double first = 0.0, last = 0.0;
    for (std::size_t k = 0; k < w; ++k) {
        first += losses[k];
        last += losses[losses.size() - w + k];
    }
    return {first / static_cast<double>(w), last / static_cast<double>(w)};
}

} // namespace detail

} // namespace rope
