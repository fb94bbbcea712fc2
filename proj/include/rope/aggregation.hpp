#pragma once

#include "rope/metric.hpp"

#include <string>
#include <vector>

namespace rope {

/// Hard clustering of non-terminal state-action pairs; phi[x] = -1 for terminal pairs.
struct Clustering {
    std::vector<int> phi;
    std::vector<std::vector<int>> clusters;
    std::vector<int> centers;
    double epsilon = 0.0;

    int n_clusters() const noexcept { return static_cast<int>(clusters.size()); }
};

/**
 * Greedy covering: scan pairs in index order, join the first existing cluster
 * whose center lies within epsilon, otherwise open a new cluster centered on
 * the pair. Every member ends up within epsilon of its center.
 */
inline Clustering epsilon_cluster(const DistanceTable& d, double epsilon, const TabularMDP& mdp) {
    require(epsilon >= 0.0, "epsilon must be nonnegative");
    detail::check_table(d.values, mdp);
    Clustering c;
    c.epsilon = epsilon;
    c.phi.assign(static_cast<std::size_t>(mdp.n_pairs()), -1);
    for (int x = 0; x < mdp.n_pairs(); ++x) {
        if (mdp.terminal_pair(x)) continue;
        int chosen = -1;
        for (int k = 0; k < c.n_clusters(); ++k) {
            const int center = c.centers[static_cast<std::size_t>(k)];
            if (d(x, center) <= epsilon && d(center, x) <= epsilon) {
                chosen = k;
                break;
            }
        }
        if (chosen < 0) {
            chosen = c.n_clusters();
            c.clusters.emplace_back();
            c.centers.push_back(x);
        }
        c.clusters[static_cast<std::size_t>(chosen)].push_back(x);
        c.phi[static_cast<std::size_t>(x)] = chosen;
    }
    return c;
}

/// Largest member-to-center distance over all clusters. Centers are skipped,
/// since self-distances of a diffuse metric may be positive.
inline double max_center_distance(const Clustering& c, const DistanceTable& d) {
    double worst = 0.0;
    for (int k = 0; k < c.n_clusters(); ++k) {
        const int center = c.centers[static_cast<std::size_t>(k)];
        for (int x : c.clusters[static_cast<std::size_t>(k)])
            if (x != center) worst = std::max(worst, d(x, center));
    }
    return worst;
}

/**
 * Markov reward process over clusters. Terminal pairs, if any, map to one
 * extra absorbing zero-reward sink cluster with index `sink`.
 */
struct ClusteredMRP {
    int n_clusters = 0;          // includes the sink
    int sink = -1;
    Vector reward;               // mean member reward
    Matrix transition;           // row c: mean over members of Pr(next cluster | member)
    double gamma = 0.0;
    std::vector<int> cluster_of; // per state-action pair, sink included
};

inline ClusteredMRP build_clustered_mrp(const TabularMDP& mdp, const PolicyTable& pi_e, const Clustering& c) {
    check_compatible(mdp, pi_e);
    require(c.phi.size() == static_cast<std::size_t>(mdp.n_pairs()), "clustering does not match MDP");

    ClusteredMRP mrp;
    mrp.gamma = mdp.gamma();
    mrp.cluster_of = c.phi;
    bool has_terminal = false;
    for (int x = 0; x < mdp.n_pairs(); ++x) {
        if (mdp.terminal_pair(x)) {
            has_terminal = true;
        } else if (c.phi[static_cast<std::size_t>(x)] < 0 || c.phi[static_cast<std::size_t>(x)] >= c.n_clusters()) {
            throw ValidationError("state-action pair " + std::to_string(x) + " is not covered by the clustering");
        }
    }
    mrp.n_clusters = c.n_clusters() + (has_terminal ? 1 : 0);
    if (has_terminal) {
        mrp.sink = c.n_clusters();
        for (int x = 0; x < mdp.n_pairs(); ++x)
            if (mdp.terminal_pair(x)) mrp.cluster_of[static_cast<std::size_t>(x)] = mrp.sink;
    }

    const Matrix successor = pair_transition(mdp, pi_e);
    // Pr(c' | y) = sum over x' in c' of M[y][x'].
    Matrix to_cluster = Matrix::Zero(mdp.n_pairs(), mrp.n_clusters);
    for (int y = 0; y < mdp.n_pairs(); ++y)
        for (int x2 = 0; x2 < mdp.n_pairs(); ++x2)
            to_cluster(y, mrp.cluster_of[static_cast<std::size_t>(x2)]) += successor(y, x2);

    mrp.reward = Vector::Zero(mrp.n_clusters);
    mrp.transition = Matrix::Zero(mrp.n_clusters, mrp.n_clusters);
    for (int k = 0; k < c.n_clusters(); ++k) {
        const auto& members = c.clusters[static_cast<std::size_t>(k)];
        require(!members.empty(), "empty cluster");
        for (int y : members) {
            mrp.reward(k) += mdp.r(mdp.state_of(y), mdp.action_of(y));
            mrp.transition.row(k) += to_cluster.row(y);
        }
        mrp.reward(k) /= static_cast<double>(members.size());
        mrp.transition.row(k) /= static_cast<double>(members.size());
    }
    if (has_terminal) mrp.transition(mrp.sink, mrp.sink) = 1.0;
    return mrp;
}

/// Solves v = r + gamma * P v by iteration from zero.
inline Vector mrp_value(const ClusteredMRP& mrp, double tol = 1e-12, int max_iter = 100000) {
    require(tol > 0.0, "tolerance must be positive");
    Vector v = Vector::Zero(mrp.n_clusters);
    double change = 0.0;
    for (int it = 1; it <= max_iter; ++it) {
        Vector next = mrp.reward + mrp.gamma * (mrp.transition * v);
        change = (next - v).cwiseAbs().maxCoeff();
        v = std::move(next);
        if (change <= tol) return v;
    }
    throw ConvergenceError("MRP evaluation did not converge", change, max_iter);
}

struct BoundReport {
    double max_gap = 0.0;
    double bound = 0.0;
    double epsilon = 0.0;
    double gamma = 0.0;
    int n_clusters = 0;
    bool pass = false;
};

/// Slack applied to the measured side of every bound check.
inline constexpr double kBoundSlack = 1e-8;

inline double aggregation_bound(double epsilon, double gamma) { return 2.0 * epsilon / (1.0 - gamma); }

/// max_x |q(x) - q~(phi(x))| against 2 eps / (1 - gamma).
inline BoundReport verify_lemma1_bound(const QTable& q, const Vector& q_tilde, const ClusteredMRP& mrp,
                                       double epsilon, double gamma) {
    const Vector flat = q.flat();
    require(flat.size() == static_cast<Eigen::Index>(mrp.cluster_of.size()), "q table does not match clustering");
    BoundReport rep;
    rep.epsilon = epsilon;
    rep.gamma = gamma;
    rep.n_clusters = mrp.n_clusters;
    rep.bound = aggregation_bound(epsilon, gamma);
    for (Eigen::Index x = 0; x < flat.size(); ++x)
        rep.max_gap = std::max(rep.max_gap, std::abs(flat(x) - q_tilde(mrp.cluster_of[static_cast<std::size_t>(x)])));
    rep.pass = rep.max_gap - kBoundSlack <= rep.bound;
    return rep;
}

/// Initial-distribution gap |E[q(s0,a0)] - E[q~(phi(s0,a0))]| with s0 ~ d0, a0 ~ pi_e.
inline double initial_value_gap(const TabularMDP& mdp, const PolicyTable& pi_e, const QTable& q,
                                const Vector& q_tilde, const ClusteredMRP& mrp) {
    double exact = 0.0, aggregated = 0.0;
    for (int s = 0; s < mdp.n_states(); ++s)
        for (int a = 0; a < mdp.n_actions(); ++a) {
            const double w = mdp.initial_dist()(s) * pi_e(s, a);
            exact += w * q(s, a);
            aggregated += w * q_tilde(mrp.cluster_of[static_cast<std::size_t>(mdp.pair(s, a))]);
        }
    return std::abs(exact - aggregated);
}

inline BoundReport verify_theorem2_bound(const TabularMDP& mdp, const PolicyTable& pi_e, const QTable& q,
                                         const Vector& q_tilde, const ClusteredMRP& mrp, double epsilon) {
    BoundReport rep;
    rep.epsilon = epsilon;
    rep.gamma = mdp.gamma();
    rep.n_clusters = mrp.n_clusters;
    rep.bound = aggregation_bound(epsilon, mdp.gamma());
    rep.max_gap = initial_value_gap(mdp, pi_e, q, q_tilde, mrp);
    rep.pass = rep.max_gap - kBoundSlack <= rep.bound;
    return rep;
}

/// Both bound reports for one (MDP, pi_e, epsilon) instance.
struct AggregationCheck {
    Clustering clustering;
    ClusteredMRP mrp;
    Vector q_tilde;
    BoundReport lemma1;
    BoundReport theorem2;
};

inline AggregationCheck run_aggregation_check(const TabularMDP& mdp, const PolicyTable& pi_e, const QTable& q,
                                              const DistanceTable& d, double epsilon) {
    AggregationCheck out;
    out.clustering = epsilon_cluster(d, epsilon, mdp);
    out.mrp = build_clustered_mrp(mdp, pi_e, out.clustering);
    out.q_tilde = mrp_value(out.mrp);
    out.lemma1 = verify_lemma1_bound(q, out.q_tilde, out.mrp, epsilon, mdp.gamma());
    out.theorem2 = verify_theorem2_bound(mdp, pi_e, q, out.q_tilde, out.mrp, epsilon);
    return out;
}

} // namespace rope
