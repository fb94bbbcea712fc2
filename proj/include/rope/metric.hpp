#pragma once

#include "rope/mdp.hpp"

#include <algorithm>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

namespace rope {

/**
 * Behavioral distances over state-action pairs, all of the form
 *
 *   F(d)(x1, x2) = short(x1, x2) + gamma * E[d(x1', x2')]
 *
 * rope:          short = |r(x1) - r(x2)|,  a1' ~ pi_e, a2' ~ pi_e independently.
 * mico_onpolicy: as rope with the behavior policy in place of pi_e.
 * psm:           short = |pi_e(a1|s1) - pi_e(a2|s2)|, next actions from pi_e.
 * random_policy: short = |r(x1) - r(x2)|, one shared a' ~ U(A) on both sides.
 */
enum class MetricKind { rope, mico_onpolicy, psm, random_policy };

inline const char* to_string(MetricKind kind) {
    switch (kind) {
        case MetricKind::rope: return "rope";
        case MetricKind::mico_onpolicy: return "mico";
        case MetricKind::psm: return "psm";
        case MetricKind::random_policy: return "random";
    }
    return "unknown";
}

inline MetricKind metric_kind_from_string(const std::string& name) {
    if (name == "rope") return MetricKind::rope;
    if (name == "mico" || name == "mico-onpolicy") return MetricKind::mico_onpolicy;
    if (name == "psm") return MetricKind::psm;
    if (name == "random" || name == "random-policy") return MetricKind::random_policy;
    throw ValidationError("unknown metric: " + name);
}

struct DistanceTable {
    Matrix values;   // X x X
    MetricKind kind = MetricKind::rope;
    bool converged = false;
    double residual = 0.0;
    int iterations = 0;

    double operator()(int x1, int x2) const { return values(x1, x2); }
    int size() const noexcept { return static_cast<int>(values.rows()); }
};

namespace detail {

inline void check_table(const Matrix& d, const TabularMDP& mdp) {
    if (d.rows() != mdp.n_pairs() || d.cols() != mdp.n_pairs())
        throw ValidationError("distance table is " + std::to_string(d.rows()) + "x" +
                              std::to_string(d.cols()) + ", expected " + std::to_string(mdp.n_pairs()) +
                              " square");
}

inline Matrix reward_gap(const TabularMDP& mdp) {
    const Vector r = mdp.pair_rewards();
    return (r.replicate(1, r.size()) - r.transpose().replicate(r.size(), 1)).cwiseAbs();
}

inline Matrix policy_gap(const TabularMDP& mdp, const PolicyTable& pi) {
    Vector p(mdp.n_pairs());
    for (int x = 0; x < mdp.n_pairs(); ++x) p(x) = pi(mdp.state_of(x), mdp.action_of(x));
    return (p.replicate(1, p.size()) - p.transpose().replicate(p.size(), 1)).cwiseAbs();
}

/// Independent coupling: E[d(x1', x2')] = (M d M^T)(x1, x2).
inline Matrix coupled_expectation(const Matrix& successor, const Matrix& d) {
    return successor * d * successor.transpose();
}

} // namespace detail

/// Precomputed pieces of one operator, so fixed-point sweeps avoid rebuilding them.
class MetricOperator {
public:
    MetricOperator(MetricKind kind, const TabularMDP& mdp, const PolicyTable* policy)
        : kind_(kind), gamma_(mdp.gamma()), n_states_(mdp.n_states()), n_actions_(mdp.n_actions()) {
        switch (kind) {
            case MetricKind::rope:
            case MetricKind::mico_onpolicy:
                require(policy != nullptr, std::string(to_string(kind)) + " operator needs a policy");
                short_term_ = detail::reward_gap(mdp);
                successor_ = pair_transition(mdp, *policy);
                break;
            case MetricKind::psm:
                require(policy != nullptr, "psm operator needs a policy");
                short_term_ = detail::policy_gap(mdp, *policy);
                successor_ = pair_transition(mdp, *policy);
                break;
            case MetricKind::random_policy:
                short_term_ = detail::reward_gap(mdp);
                successor_ = mdp.transition();   // X x S
                break;
        }
    }

    MetricKind kind() const noexcept { return kind_; }
    double gamma() const noexcept { return gamma_; }
    const Matrix& short_term() const noexcept { return short_term_; }

    Matrix apply(const Matrix& d) const {
        const int n = n_states_ * n_actions_;
        if (d.rows() != n || d.cols() != n)
            throw ValidationError("distance table does not match operator dimensions");
        if (kind_ != MetricKind::random_policy)
            return short_term_ + gamma_ * detail::coupled_expectation(successor_, d);

        // Shared next action: average over a' of P d[(., a'), (., a')] P^T.
        Matrix expected = Matrix::Zero(n, n);
        Matrix block(n_states_, n_states_);
        for (int a = 0; a < n_actions_; ++a) {
            for (int s1 = 0; s1 < n_states_; ++s1)
                for (int s2 = 0; s2 < n_states_; ++s2) block(s1, s2) = d(s1 * n_actions_ + a, s2 * n_actions_ + a);
            expected.noalias() += successor_ * block * successor_.transpose();
        }
        return short_term_ + (gamma_ / n_actions_) * expected;
    }

private:
    MetricKind kind_;
    double gamma_;
    int n_states_;
    int n_actions_;
    Matrix short_term_;
    Matrix successor_;
};

inline DistanceTable wrap(Matrix values, MetricKind kind) {
    DistanceTable t;
    t.values = std::move(values);
    t.kind = kind;
    return t;
}

/// One exact application of the ROPE operator (next actions from pi_e on both sides).
inline DistanceTable apply_rope_operator(const DistanceTable& d, const TabularMDP& mdp, const PolicyTable& pi_e) {
    detail::check_table(d.values, mdp);
    return wrap(MetricOperator(MetricKind::rope, mdp, &pi_e).apply(d.values), MetricKind::rope);
}

/// On-policy MICo: the ROPE recursion with the behavior policy supplying next actions.
inline DistanceTable apply_mico_onpolicy_operator(const DistanceTable& d, const TabularMDP& mdp,
                                                  const PolicyTable& pi_b) {
    detail::check_table(d.values, mdp);
    return wrap(MetricOperator(MetricKind::mico_onpolicy, mdp, &pi_b).apply(d.values), MetricKind::mico_onpolicy);
}

inline DistanceTable apply_psm_operator(const DistanceTable& d, const TabularMDP& mdp, const PolicyTable& pi_e) {
    detail::check_table(d.values, mdp);
    return wrap(MetricOperator(MetricKind::psm, mdp, &pi_e).apply(d.values), MetricKind::psm);
}

inline DistanceTable apply_random_policy_operator(const DistanceTable& d, const TabularMDP& mdp) {
    detail::check_table(d.values, mdp);
    return wrap(MetricOperator(MetricKind::random_policy, mdp, nullptr).apply(d.values), MetricKind::random_policy);
}

struct FixedPointOptions {
    double tol = 1e-10;
    int max_iter = 10000;
    /// Called after every sweep with (t, d_t); d_0 = 0 is reported as t = 0.
    std::function<void(int, const Matrix&)> on_sweep;
};

/**
 * Iterates the chosen operator from d_0 = 0 until the sup-norm change of a
 * sweep is at most `tol`. Returns converged = false after max_iter sweeps.
 * `policy` is pi_e for rope/psm, pi_b for mico, and ignored for random_policy.
 */
inline DistanceTable solve_fixed_point(MetricKind kind, const TabularMDP& mdp, const PolicyTable* policy,
                                       const FixedPointOptions& options = {}) {
    require(options.tol > 0.0, "fixed-point tolerance must be positive");
    require(options.max_iter >= 1, "max_iter must be positive");
    const MetricOperator op(kind, mdp, policy);
    Matrix d = Matrix::Zero(mdp.n_pairs(), mdp.n_pairs());
    if (options.on_sweep) options.on_sweep(0, d);
    DistanceTable out;
    out.kind = kind;
    for (int it = 1; it <= options.max_iter; ++it) {
        Matrix next = op.apply(d);
        const double change = sup_norm(next - d);
        d = std::move(next);
        if (options.on_sweep) options.on_sweep(it, d);
        out.iterations = it;
        out.residual = change;
        if (change <= options.tol) {
            out.converged = true;
            break;
        }
    }
    out.values = std::move(d);
    return out;
}

inline DistanceTable solve_fixed_point(MetricKind kind, const TabularMDP& mdp, const PolicyTable& policy,
                                       const FixedPointOptions& options = {}) {
    return solve_fixed_point(kind, mdp, &policy, options);
}

/// Sweeps after which ||d_t - d*|| <= tol from d_0 = 0, given the short-term term's range.
inline int contraction_sweep_bound(double gamma, double short_term_range, double tol) {
    if (short_term_range <= 0.0 || gamma == 0.0) return 1;
    return static_cast<int>(std::ceil(std::log(tol * (1.0 - gamma) / short_term_range) / std::log(gamma)));
}

// ---------------------------------------------------------------------------
// Grouping

class UnionFind {
public:
    explicit UnionFind(int n) : parent_(static_cast<std::size_t>(n)) {
        std::iota(parent_.begin(), parent_.end(), 0);
    }
    int find(int x) {
        while (parent_[static_cast<std::size_t>(x)] != x) {
            auto& p = parent_[static_cast<std::size_t>(x)];
            p = parent_[static_cast<std::size_t>(p)];
            x = p;
        }
        return x;
    }
    /// Unites the two sets; the smaller root index survives.
    void unite(int a, int b) {
        a = find(a);
        b = find(b);
        if (a == b) return;
        if (b < a) std::swap(a, b);
        parent_[static_cast<std::size_t>(b)] = a;
    }

private:
    std::vector<int> parent_;
};

/// group_id[x] is -1 for excluded (terminal) pairs; ids are contiguous from 0.
struct GroupAssignment {
    std::vector<int> group_id;
    int n_groups = 0;
    double tolerance = 0.0;
};

/**
 * Transitive closure of "close(x1, x2)" over non-terminal pairs. Group ids
 * are assigned in order of each group's smallest member index.
 */
template <typename Close>
GroupAssignment group_pairs(const TabularMDP& mdp, double tol, Close&& close) {
    const int n = mdp.n_pairs();
    UnionFind uf(n);
    for (int i = 0; i < n; ++i) {
        if (mdp.terminal_pair(i)) continue;
        for (int j = i + 1; j < n; ++j)
            if (!mdp.terminal_pair(j) && close(i, j)) uf.unite(i, j);
    }
    GroupAssignment out;
    out.tolerance = tol;
    out.group_id.assign(static_cast<std::size_t>(n), -1);
    std::vector<int> root_id(static_cast<std::size_t>(n), -1);
    for (int x = 0; x < n; ++x) {
        if (mdp.terminal_pair(x)) continue;
        const int root = uf.find(x);
        auto& id = root_id[static_cast<std::size_t>(root)];
        if (id < 0) id = out.n_groups++;
        out.group_id[static_cast<std::size_t>(x)] = id;
    }
    return out;
}

/// Groups pairs whose distance is at most `tol` (terminal pairs excluded).
inline GroupAssignment group_zero_distance(const DistanceTable& d, const TabularMDP& mdp, double tol = 1e-8) {
    detail::check_table(d.values, mdp);
    return group_pairs(mdp, tol, [&](int i, int j) { return d(i, j) <= tol && d(j, i) <= tol; });
}

/// Level sets of q: pairs whose action values differ by at most `tol`.
inline GroupAssignment group_by_value(const QTable& q, const TabularMDP& mdp, double tol = 1e-8) {
    const Vector flat = q.flat();
    return group_pairs(mdp, tol, [&](int i, int j) { return std::abs(flat(i) - flat(j)) <= tol; });
}

/// True when both assignments induce the same partition (ids may differ).
inline bool same_partition(const GroupAssignment& a, const GroupAssignment& b) {
    if (a.group_id.size() != b.group_id.size() || a.n_groups != b.n_groups) return false;
    std::vector<int> map_ab(static_cast<std::size_t>(a.n_groups), -1);
    std::vector<int> map_ba(static_cast<std::size_t>(b.n_groups), -1);
    for (std::size_t x = 0; x < a.group_id.size(); ++x) {
        const int ga = a.group_id[x], gb = b.group_id[x];
        if ((ga < 0) != (gb < 0)) return false;
        if (ga < 0) continue;
        auto& fa = map_ab[static_cast<std::size_t>(ga)];
        auto& fb = map_ba[static_cast<std::size_t>(gb)];
        if (fa < 0) fa = gb;
        if (fb < 0) fb = ga;
        if (fa != gb || fb != ga) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Property checks

struct PropertyReport {
    double negativity = 0.0;           // max(0, -min d)
    double asymmetry = 0.0;            // max |d(x,y) - d(y,x)|
    double triangle_violation = 0.0;   // max(0, max d(x,z) - d(x,y) - d(y,z))
    double min_self_distance = 0.0;
    double max_self_distance = 0.0;

    bool holds(double tol) const {
        return negativity <= tol && asymmetry <= tol && triangle_violation <= tol && min_self_distance >= -tol;
    }
};

/// Measures how far `d` is from a diffuse metric (O(X^3) triangle scan).
inline PropertyReport check_diffuse_metric(const DistanceTable& d) {
    const Matrix& v = d.values;
    const int n = d.size();
    PropertyReport rep;
    if (n == 0) return rep;
    rep.negativity = std::max(0.0, -v.minCoeff());
    rep.asymmetry = sup_norm(v - v.transpose());
    rep.min_self_distance = v.diagonal().minCoeff();
    rep.max_self_distance = v.diagonal().maxCoeff();
    double worst = 0.0;
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            const double dxy = v(x, y);
            for (int z = 0; z < n; ++z) worst = std::max(worst, v(x, z) - dxy - v(y, z));
        }
    rep.triangle_violation = worst;
    return rep;
}

/// max over pairs of |q(x1) - q(x2)| - d(x1, x2); nonpositive when the value-gap bound holds.
inline double theorem1_gap(const QTable& q, const DistanceTable& d) {
    const Vector flat = q.flat();
    require(flat.size() == d.size(), "q table and distance table sizes differ");
    double worst = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < d.size(); ++i)
        for (int j = 0; j < d.size(); ++j) worst = std::max(worst, std::abs(flat(i) - flat(j)) - d(i, j));
    return worst;
}

} // namespace rope
