#pragma once

#include "rope/common.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace rope {

/**
 * Finite MDP with dense transition tensor and expected rewards.
 *
 * State-action pairs are flattened as x = s * n_actions + a. The transition
 * tensor is stored as an (n_states * n_actions) x n_states matrix whose row x
 * is P(. | s, a). Terminal states are absorbing with zero reward.
 */
class TabularMDP {
public:
    static constexpr double kProbabilityTolerance = 1e-12;

    TabularMDP(int n_states, int n_actions, Matrix transition, Matrix reward, double gamma,
               Vector initial_dist, std::vector<bool> terminal_mask)
        : n_states_(n_states), n_actions_(n_actions), transition_(std::move(transition)),
          reward_(std::move(reward)), gamma_(gamma), initial_(std::move(initial_dist)),
          terminal_(std::move(terminal_mask)) {
        validate();
    }

    int n_states() const noexcept { return n_states_; }
    int n_actions() const noexcept { return n_actions_; }
    int n_pairs() const noexcept { return n_states_ * n_actions_; }
    int pair(int s, int a) const noexcept { return s * n_actions_ + a; }
    int state_of(int x) const noexcept { return x / n_actions_; }
    int action_of(int x) const noexcept { return x % n_actions_; }

    double gamma() const noexcept { return gamma_; }
    double p(int s, int a, int next) const { return transition_(pair(s, a), next); }
    double r(int s, int a) const { return reward_(s, a); }
    bool terminal(int s) const { return terminal_[static_cast<std::size_t>(s)]; }
    bool terminal_pair(int x) const { return terminal(state_of(x)); }

    /// (S*A) x S matrix of next-state probabilities.
    const Matrix& transition() const noexcept { return transition_; }
    /// S x A matrix of expected rewards.
    const Matrix& reward() const noexcept { return reward_; }
    /// Rewards flattened over state-action pairs.
    Vector pair_rewards() const {
        Vector out(n_pairs());
        for (int s = 0; s < n_states_; ++s)
            for (int a = 0; a < n_actions_; ++a) out(pair(s, a)) = reward_(s, a);
        return out;
    }
    const Vector& initial_dist() const noexcept { return initial_; }
    const std::vector<bool>& terminal_mask() const noexcept { return terminal_; }

    double reward_min() const { return reward_.minCoeff(); }
    double reward_max() const { return reward_.maxCoeff(); }
    double reward_abs_max() const { return reward_.cwiseAbs().maxCoeff(); }

private:
    void validate() const {
        require(n_states_ >= 1 && n_actions_ >= 1, "MDP needs at least one state and one action");
        require(transition_.rows() == n_pairs() && transition_.cols() == n_states_,
                "transition matrix must be (n_states*n_actions) x n_states");
        require(reward_.rows() == n_states_ && reward_.cols() == n_actions_,
                "reward table must be n_states x n_actions");
        require(initial_.size() == n_states_, "initial distribution has wrong length");
        require(terminal_.size() == static_cast<std::size_t>(n_states_), "terminal mask has wrong length");
        require(gamma_ >= 0.0 && gamma_ < 1.0, "gamma must lie in [0, 1)");
        require(transition_.allFinite() && reward_.allFinite() && initial_.allFinite(),
                "MDP contains non-finite entries");
        require((transition_.array() >= 0.0).all(), "transition probabilities must be nonnegative");
        for (int x = 0; x < n_pairs(); ++x)
            require(std::abs(transition_.row(x).sum() - 1.0) <= kProbabilityTolerance,
                    "transition row " + std::to_string(x) + " does not sum to 1");
        require((initial_.array() >= 0.0).all() &&
                    std::abs(initial_.sum() - 1.0) <= kProbabilityTolerance,
                "initial distribution does not sum to 1");
        for (int s = 0; s < n_states_; ++s) {
            if (!terminal(s)) continue;
            for (int a = 0; a < n_actions_; ++a) {
                require(transition_(pair(s, a), s) == 1.0,
                        "terminal state " + std::to_string(s) + " must be absorbing");
                require(reward_(s, a) == 0.0,
                        "terminal state " + std::to_string(s) + " must have zero reward");
            }
        }
    }

    int n_states_;
    int n_actions_;
    Matrix transition_;
    Matrix reward_;
    double gamma_;
    Vector initial_;
    std::vector<bool> terminal_;
};

/// Stochastic policy: row s holds pi(. | s).
class PolicyTable {
public:
    PolicyTable() = default;
    explicit PolicyTable(Matrix probs) : probs_(std::move(probs)) {
        require(probs_.rows() >= 1 && probs_.cols() >= 1, "policy table is empty");
        require(probs_.allFinite() && (probs_.array() >= 0.0).all(), "policy has invalid entries");
        for (int s = 0; s < probs_.rows(); ++s)
            require(std::abs(probs_.row(s).sum() - 1.0) <= TabularMDP::kProbabilityTolerance,
                    "policy row " + std::to_string(s) + " does not sum to 1");
    }

    static PolicyTable uniform(int n_states, int n_actions) {
        return PolicyTable(Matrix::Constant(n_states, n_actions, 1.0 / n_actions));
    }

    double operator()(int s, int a) const { return probs_(s, a); }
    const Matrix& probs() const noexcept { return probs_; }
    int n_states() const noexcept { return static_cast<int>(probs_.rows()); }
    int n_actions() const noexcept { return static_cast<int>(probs_.cols()); }

    int sample(int s, Rng& rng) const { return sample_index(probs_.row(s), rng); }

    bool deterministic() const {
        return ((probs_.array() == 0.0) || (probs_.array() == 1.0)).all();
    }

private:
    Matrix probs_;
};

/// Action values q[s][a] plus solver diagnostics.
struct QTable {
    Matrix values;   // n_states x n_actions
    double residual = 0.0;
    int iterations = 0;

    double operator()(int s, int a) const { return values(s, a); }
    /// Values flattened over state-action pairs (x = s * n_actions + a).
    Vector flat() const {
        Vector out(values.size());
        for (int s = 0; s < values.rows(); ++s)
            for (int a = 0; a < values.cols(); ++a) out(s * values.cols() + a) = values(s, a);
        return out;
    }
};

inline void check_compatible(const TabularMDP& mdp, const PolicyTable& policy) {
    require(policy.n_states() == mdp.n_states() && policy.n_actions() == mdp.n_actions(),
            "policy shape does not match MDP");
}

/// X x X matrix M[x][x'] = P(s'|x) * pi(a'|s'): one step of the pair chain under `policy`.
inline Matrix pair_transition(const TabularMDP& mdp, const PolicyTable& policy) {
    check_compatible(mdp, policy);
    const int n_actions = mdp.n_actions();
    Matrix m(mdp.n_pairs(), mdp.n_pairs());
    for (int x = 0; x < mdp.n_pairs(); ++x)
        for (int s2 = 0; s2 < mdp.n_states(); ++s2)
            for (int a2 = 0; a2 < n_actions; ++a2)
                m(x, s2 * n_actions + a2) = mdp.transition()(x, s2) * policy(s2, a2);
    return m;
}

/// E_{a ~ pi(.|s)} q[s][a] for every state.
inline Vector state_values(const Matrix& q, const PolicyTable& policy) {
    return (q.array() * policy.probs().array()).rowwise().sum();
}

/**
 * Iterative evaluation of q^pi: q = r + gamma * P (pi . q), from q = 0.
 * Throws ConvergenceError when the sup-norm residual stays above `tol`.
 */
inline QTable policy_evaluation_q(const TabularMDP& mdp, const PolicyTable& policy,
                                  double tol = 1e-12, int max_iter = 100000) {
    check_compatible(mdp, policy);
    require(tol > 0.0, "tolerance must be positive");
    const Vector r = mdp.pair_rewards();
    Vector q = Vector::Zero(mdp.n_pairs());
    QTable out;
    double change = 0.0;
    for (int it = 1; it <= max_iter; ++it) {
        const Matrix qm = q.reshaped<Eigen::RowMajor>(mdp.n_states(), mdp.n_actions());
        const Vector next = r + mdp.gamma() * (mdp.transition() * state_values(qm, policy));
        change = (next - q).cwiseAbs().maxCoeff();
        q = next;
        if (change <= tol) {
            out.values = q.reshaped<Eigen::RowMajor>(mdp.n_states(), mdp.n_actions());
            out.iterations = it;
            // Residual of one more Bellman application.
            const Vector again = r + mdp.gamma() * (mdp.transition() * state_values(out.values, policy));
            out.residual = (again - q).cwiseAbs().maxCoeff();
            return out;
        }
    }
    throw ConvergenceError("policy evaluation did not converge", change, max_iter);
}

/// Sup-norm Bellman residual of `q` for `policy`.
inline double bellman_residual(const TabularMDP& mdp, const PolicyTable& policy, const Matrix& q) {
    const Vector flat_q = q.reshaped<Eigen::RowMajor>();
    const Vector next = mdp.pair_rewards() + mdp.gamma() * (mdp.transition() * state_values(q, policy));
    return (next - flat_q).cwiseAbs().maxCoeff();
}

/// rho(pi) = sum_s d0(s) sum_a pi(a|s) q[s][a].
inline double policy_value(const TabularMDP& mdp, const PolicyTable& policy, const QTable& q) {
    check_compatible(mdp, policy);
    require(q.values.rows() == mdp.n_states() && q.values.cols() == mdp.n_actions(),
            "q table shape does not match MDP");
    return mdp.initial_dist().dot(state_values(q.values, policy));
}

// ---------------------------------------------------------------------------
// Gridworld

enum GridAction : int { kUp = 0, kDown = 1, kLeft = 2, kRight = 3 };

inline const char* grid_action_name(int a) {
    static const char* names[] = {"up", "down", "left", "right"};
    return names[a];
}

struct Gridworld {
    static constexpr int kSize = 3;
    static constexpr int kStart = 0;                 // bottom-left
    static constexpr int kGoal = kSize * kSize - 1;  // top-right, terminal

    TabularMDP mdp;
    PolicyTable pi_e;
    PolicyTable pi_b;

    static int state(int row, int col) { return row * kSize + col; }
    static int row(int s) { return s / kSize; }
    static int col(int s) { return s % kSize; }
    static int manhattan_to_goal(int s) {
        return (kSize - 1 - row(s)) + (kSize - 1 - col(s));
    }
    /// Deterministic successor; moves off the grid leave the agent in place.
    static int successor(int s, int a) {
        if (s == kGoal) return s;
        int r = row(s), c = col(s);
        switch (a) {
            case kUp: ++r; break;
            case kDown: --r; break;
            case kLeft: --c; break;
            case kRight: ++c; break;
            default: break;
        }
        if (r < 0 || r >= kSize || c < 0 || c >= kSize) return s;
        return state(r, c);
    }
};

/**
 * 3x3 gridworld: start bottom-left (row 0), absorbing goal top-right.
 * r(s, a) = -manhattan(s', goal). gamma = 0.99.
 *
 * pi_e: 50/50 up/right at the start, otherwise the distance-reducing move,
 * preferring right on ties; uniform at the (unreachable) terminal.
 * pi_b: uniform random.
 */
inline Gridworld build_gridworld() {
    constexpr int n = Gridworld::kSize * Gridworld::kSize;
    constexpr int n_actions = 4;
    Matrix transition = Matrix::Zero(n * n_actions, n);
    Matrix reward = Matrix::Zero(n, n_actions);
    std::vector<bool> terminal(n, false);
    terminal[Gridworld::kGoal] = true;
    for (int s = 0; s < n; ++s)
        for (int a = 0; a < n_actions; ++a) {
            const int next = Gridworld::successor(s, a);
            transition(s * n_actions + a, next) = 1.0;
            reward(s, a) = terminal[s] ? 0.0 : static_cast<double>(-Gridworld::manhattan_to_goal(next));
        }
    Vector initial = Vector::Zero(n);
    initial(Gridworld::kStart) = 1.0;

    Matrix pe = Matrix::Zero(n, n_actions);
    for (int s = 0; s < n; ++s) {
        if (terminal[s]) {
            pe.row(s).setConstant(0.25);
        } else if (s == Gridworld::kStart) {
            pe(s, kUp) = 0.5;
            pe(s, kRight) = 0.5;
        } else if (Gridworld::col(s) < Gridworld::kSize - 1) {
            pe(s, kRight) = 1.0;
        } else {
            pe(s, kUp) = 1.0;
        }
    }
    return Gridworld{TabularMDP(n, n_actions, std::move(transition), std::move(reward), 0.99,
                                std::move(initial), std::move(terminal)),
                     PolicyTable(std::move(pe)), PolicyTable::uniform(n, n_actions)};
}

// ---------------------------------------------------------------------------
// Random generators for property tests

namespace detail {
inline Vector flat_dirichlet(int n, Rng& rng) {
    std::exponential_distribution<double> expo(1.0);
    Vector v(n);
    for (int i = 0; i < n; ++i) v(i) = expo(rng);
    return v / v.sum();
}
} // namespace detail

/// Random MDP: flat-Dirichlet transition rows and initial distribution, rewards U[0,1].
inline TabularMDP build_random_mdp(int n_states, int n_actions, double gamma, std::uint64_t seed) {
    require(n_states >= 2, "random MDP needs at least 2 states");
    require(n_actions >= 1, "random MDP needs at least 1 action");
    Rng rng(seed);
    Matrix transition(n_states * n_actions, n_states);
    for (int x = 0; x < n_states * n_actions; ++x) transition.row(x) = detail::flat_dirichlet(n_states, rng);
    Matrix reward(n_states, n_actions);
    for (int s = 0; s < n_states; ++s)
        for (int a = 0; a < n_actions; ++a) reward(s, a) = uniform01(rng);
    Vector initial = detail::flat_dirichlet(n_states, rng);
    return TabularMDP(n_states, n_actions, std::move(transition), std::move(reward), gamma,
                      std::move(initial), std::vector<bool>(static_cast<std::size_t>(n_states), false));
}

/// Random MDP with one deterministic successor per state-action pair.
inline TabularMDP build_random_deterministic_mdp(int n_states, int n_actions, double gamma,
                                                 std::uint64_t seed) {
    require(n_states >= 2 && n_actions >= 1, "invalid random MDP size");
    Rng rng(seed);
    std::uniform_int_distribution<int> pick(0, n_states - 1);
    Matrix transition = Matrix::Zero(n_states * n_actions, n_states);
    for (int x = 0; x < n_states * n_actions; ++x) transition(x, pick(rng)) = 1.0;
    Matrix reward(n_states, n_actions);
    for (int s = 0; s < n_states; ++s)
        for (int a = 0; a < n_actions; ++a) reward(s, a) = uniform01(rng);
    Vector initial = Vector::Zero(n_states);
    initial(pick(rng)) = 1.0;
    return TabularMDP(n_states, n_actions, std::move(transition), std::move(reward), gamma,
                      std::move(initial), std::vector<bool>(static_cast<std::size_t>(n_states), false));
}

/// Random policy; flat-Dirichlet rows, or a single random action per state when deterministic.
inline PolicyTable build_random_policy(int n_states, int n_actions, std::uint64_t seed,
                                       bool deterministic = false) {
    Rng rng(seed);
    Matrix probs = Matrix::Zero(n_states, n_actions);
    std::uniform_int_distribution<int> pick(0, n_actions - 1);
    for (int s = 0; s < n_states; ++s) {
        if (deterministic)
            probs(s, pick(rng)) = 1.0;
        else
            probs.row(s) = detail::flat_dirichlet(n_actions, rng).transpose();
    }
    return PolicyTable(std::move(probs));
}

// ---------------------------------------------------------------------------
// Monte-Carlo rollouts

/// Smallest H with gamma^H * r_max / (1 - gamma) < truncation.
inline int default_horizon(const TabularMDP& mdp, double truncation = 1e-4) {
    const double r_max = mdp.reward_abs_max();
    if (r_max == 0.0) return 0;
    const double scale = r_max / (1.0 - mdp.gamma());
    if (scale < truncation) return 0;
    if (mdp.gamma() == 0.0) return 1;
    int h = static_cast<int>(std::ceil(std::log(truncation / scale) / std::log(mdp.gamma())));
    while (h > 0 && std::pow(mdp.gamma(), h - 1) * scale < truncation) --h;
    while (std::pow(mdp.gamma(), h) * scale >= truncation) ++h;
    return h;
}

/// One discounted return sample of `policy` from d0, truncated at `horizon` steps.
inline double rollout_return(const TabularMDP& mdp, const PolicyTable& policy, int horizon,
                             std::uint64_t seed) {
    check_compatible(mdp, policy);
    require(horizon >= 0, "horizon must be nonnegative");
    Rng rng(seed);
    int s = sample_index(mdp.initial_dist(), rng);
    double ret = 0.0;
    double discount = 1.0;
    for (int t = 0; t < horizon; ++t) {
        if (mdp.terminal(s)) break;
        const int a = policy.sample(s, rng);
        ret += discount * mdp.r(s, a);
        discount *= mdp.gamma();
        s = sample_index(mdp.transition().row(mdp.pair(s, a)), rng);
    }
    return ret;
}

} // namespace rope
