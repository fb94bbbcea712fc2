#pragma once

#include "rope/mdp.hpp"

#include <optional>
#include <string>
#include <vector>

namespace rope {

enum class FeatureKind { one_hot, redundant, provided };

inline const char* to_string(FeatureKind kind) {
    switch (kind) {
        case FeatureKind::one_hot: return "one-hot";
        case FeatureKind::redundant: return "redundant";
        case FeatureKind::provided: return "provided";
    }
    return "unknown";
}

inline FeatureKind feature_kind_from_string(const std::string& name) {
    if (name == "one-hot" || name == "onehot") return FeatureKind::one_hot;
    if (name == "redundant") return FeatureKind::redundant;
    if (name == "provided") return FeatureKind::provided;
    throw ValidationError("unknown feature kind: " + name);
}

/**
 * Maps tabular states to real feature vectors for the neural path.
 *
 * one-hot:   e_s.
 * redundant: e_s followed by `noise_dims` Gaussian noise coordinates, drawn
 *            per observation from the caller's engine (so a dataset seed fixes them).
 * provided:  a fixed user table, one row per state.
 *
 * State-action inputs are the state features concatenated with a one-hot action.
 */
class FeatureMap {
public:
    static FeatureMap one_hot(int n_states) {
        FeatureMap f;
        f.kind_ = FeatureKind::one_hot;
        f.n_states_ = n_states;
        return f;
    }

    static FeatureMap redundant(int n_states, int noise_dims, double noise_scale = 1.0) {
        require(noise_dims >= 0 && noise_scale >= 0.0, "invalid noise configuration");
        FeatureMap f;
        f.kind_ = FeatureKind::redundant;
        f.n_states_ = n_states;
        f.noise_dims_ = noise_dims;
        f.noise_scale_ = noise_scale;
        return f;
    }

    static FeatureMap provided(Matrix table) {
        require(table.rows() >= 1 && table.cols() >= 1 && table.allFinite(), "invalid feature table");
        FeatureMap f;
        f.kind_ = FeatureKind::provided;
        f.n_states_ = static_cast<int>(table.rows());
        f.table_ = std::move(table);
        return f;
    }

    FeatureKind kind() const noexcept { return kind_; }
    int n_states() const noexcept { return n_states_; }
    int noise_dims() const noexcept { return noise_dims_; }
    double noise_scale() const noexcept { return noise_scale_; }
    bool stochastic() const noexcept { return kind_ == FeatureKind::redundant && noise_dims_ > 0; }

    int state_dim() const noexcept {
        switch (kind_) {
            case FeatureKind::one_hot: return n_states_;
            case FeatureKind::redundant: return n_states_ + noise_dims_;
            case FeatureKind::provided: return static_cast<int>(table_.cols());
        }
        return 0;
    }

    /// Features of state `s`; consumes engine draws only for redundant maps.
    Vector state_features(int s, Rng& rng) const {
        require(s >= 0 && s < n_states_, "state out of range for feature map");
        Vector out = Vector::Zero(state_dim());
        switch (kind_) {
            case FeatureKind::one_hot: out(s) = 1.0; break;
            case FeatureKind::redundant: {
                out(s) = 1.0;
                std::normal_distribution<double> noise(0.0, 1.0);
                for (int i = 0; i < noise_dims_; ++i) out(n_states_ + i) = noise_scale_ * noise(rng);
                break;
            }
            case FeatureKind::provided: out = table_.row(s).transpose(); break;
        }
        return out;
    }

private:
    FeatureKind kind_ = FeatureKind::one_hot;
    int n_states_ = 0;
    int noise_dims_ = 0;
    double noise_scale_ = 1.0;
    Matrix table_;
};

/// Concatenates state features with a one-hot encoding of `action`.
inline Vector pair_input(const Vector& state_features, int action, int n_actions) {
    Vector out = Vector::Zero(state_features.size() + n_actions);
    out.head(state_features.size()) = state_features;
    out(state_features.size() + action) = 1.0;
    return out;
}

struct Transition {
    int state = 0;
    int action = 0;
    double reward = 0.0;
    int next_state = 0;
    bool done = false;
    std::optional<Vector> state_features;
    std::optional<Vector> next_state_features;
};

struct Provenance {
    std::string behavior;
    std::uint64_t seed = 0;
    int episode_cap = 0;
    std::string features;
};

struct TransitionDataset {
    std::vector<Transition> transitions;
    int feature_dim = 0;
    Provenance provenance;
    bool coverage = false;

    std::size_t size() const noexcept { return transitions.size(); }
    bool has_features() const noexcept { return feature_dim > 0; }

    double reward_min() const {
        double v = transitions.front().reward;
        for (const auto& t : transitions) v = std::min(v, t.reward);
        return v;
    }
    double reward_max() const {
        double v = transitions.front().reward;
        for (const auto& t : transitions) v = std::max(v, t.reward);
        return v;
    }
    bool constant_reward() const { return reward_min() == reward_max(); }
};

/// Checks ids, done flags and feature shapes against `mdp`.
inline void validate_dataset(const TransitionDataset& data, const TabularMDP& mdp) {
    require(!data.transitions.empty(), "dataset is empty");
    for (std::size_t i = 0; i < data.size(); ++i) {
        const Transition& t = data.transitions[i];
        const std::string where = "transition " + std::to_string(i);
        require(t.state >= 0 && t.state < mdp.n_states(), where + ": state out of range");
        require(t.next_state >= 0 && t.next_state < mdp.n_states(), where + ": next state out of range");
        require(t.action >= 0 && t.action < mdp.n_actions(), where + ": action out of range");
        require(t.done == mdp.terminal(t.next_state), where + ": done flag disagrees with terminal mask");
        require(std::isfinite(t.reward), where + ": non-finite reward");
        if (data.has_features()) {
            require(t.state_features && t.next_state_features, where + ": missing features");
            require(t.state_features->size() == data.feature_dim &&
                        t.next_state_features->size() == data.feature_dim,
                    where + ": feature dimension mismatch");
        }
    }
}

/// Pairs (s, a) with pi_e(a|s) > 0 that never appear in the dataset (non-terminal states only).
inline std::vector<int> missing_coverage(const TransitionDataset& data, const TabularMDP& mdp,
                                         const PolicyTable& pi_e) {
    std::vector<bool> seen(static_cast<std::size_t>(mdp.n_pairs()), false);
    for (const auto& t : data.transitions) seen[static_cast<std::size_t>(mdp.pair(t.state, t.action))] = true;
    std::vector<int> missing;
    for (int s = 0; s < mdp.n_states(); ++s) {
        if (mdp.terminal(s)) continue;
        for (int a = 0; a < mdp.n_actions(); ++a)
            if (pi_e(s, a) > 0.0 && !seen[static_cast<std::size_t>(mdp.pair(s, a))]) missing.push_back(mdp.pair(s, a));
    }
    return missing;
}

/// Pairs of non-terminal states that never appear in the dataset, regardless of policy.
inline std::vector<int> missing_pairs(const TransitionDataset& data, const TabularMDP& mdp) {
    return missing_coverage(data, mdp, PolicyTable::uniform(mdp.n_states(), mdp.n_actions()));
}

struct DatasetOptions {
    int episode_cap = 100;
    std::optional<FeatureMap> features;
    /// When set, coverage against this policy is checked and recorded.
    std::optional<PolicyTable> coverage_policy;
    std::string behavior_name = "custom";
};

/**
 * Rolls out `behavior` from d0 and records n transitions, resetting at a
 * terminal next state or after `episode_cap` steps. Pure in (mdp, behavior, n, seed, options).
 */
inline TransitionDataset generate_dataset(const TabularMDP& mdp, const PolicyTable& behavior, int n,
                                          std::uint64_t seed, const DatasetOptions& options = {}) {
    check_compatible(mdp, behavior);
    require(n >= 1, "dataset size must be at least 1");
    require(options.episode_cap >= 1, "episode cap must be at least 1");
    if (options.features)
        require(options.features->n_states() == mdp.n_states(), "feature map does not match MDP");

    Rng rng(seed);
    Rng feature_rng(derive_seed(seed, 0xfea7));
    TransitionDataset data;
    data.transitions.reserve(static_cast<std::size_t>(n));
    data.feature_dim = options.features ? options.features->state_dim() : 0;
    data.provenance = {options.behavior_name, seed, options.episode_cap,
                       options.features ? to_string(options.features->kind()) : "none"};

    double start_mass = 0.0;
    for (int i = 0; i < mdp.n_states(); ++i)
        if (!mdp.terminal(i)) start_mass += mdp.initial_dist()(i);
    require(start_mass > 0.0, "initial distribution has no mass on non-terminal states");

    auto reset = [&] { return sample_index(mdp.initial_dist(), rng); };
    int s = reset();
    int t = 0;
    std::optional<Vector> current_features;
    if (options.features) current_features = options.features->state_features(s, feature_rng);
    while (static_cast<int>(data.transitions.size()) < n) {
        if (mdp.terminal(s)) {
            s = reset();
            if (options.features) current_features = options.features->state_features(s, feature_rng);
            continue;
        }
        Transition tr;
        tr.state = s;
        tr.action = behavior.sample(s, rng);
        tr.reward = mdp.r(s, tr.action);
        tr.next_state = sample_index(mdp.transition().row(mdp.pair(s, tr.action)), rng);
        tr.done = mdp.terminal(tr.next_state);
        if (options.features) {
            tr.state_features = current_features;
            tr.next_state_features = options.features->state_features(tr.next_state, feature_rng);
        }
        data.transitions.push_back(tr);
        ++t;
        if (tr.done || t >= options.episode_cap) {
            s = reset();
            t = 0;
            if (options.features) current_features = options.features->state_features(s, feature_rng);
        } else {
            s = tr.next_state;
            current_features = tr.next_state_features;
        }
    }
    if (options.coverage_policy)
        data.coverage = missing_coverage(data, mdp, *options.coverage_policy).empty();
    return data;
}

} // namespace rope
