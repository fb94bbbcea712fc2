#pragma once

#include "rope/aggregation.hpp"
#include "rope/eval.hpp"

#include <json.hpp>

#include <fstream>
#include <iomanip>
#include <sstream>

namespace rope {

using Json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;

// ---------------------------------------------------------------------------
// Dense matrices as nested arrays

inline Json matrix_to_json(const Matrix& m) {
    Json rows = Json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        Json row = Json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Matrix matrix_from_json(const Json& j, const std::string& what) {
    if (!j.is_array() || j.empty()) throw ValidationError(what + " must be a nonempty array of rows");
    const std::size_t cols = j.front().size();
    Matrix m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(cols));
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_array() || j[i].size() != cols) throw ValidationError(what + " rows have unequal length");
        for (std::size_t k = 0; k < cols; ++k) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = j[i][k].get<double>();
    }
    return m;
}

inline Json vector_to_json(const Vector& v) { return Json(std::vector<double>(v.data(), v.data() + v.size())); }

inline Vector vector_from_json(const Json& j) {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

namespace detail {
inline void check_schema(const Json& j, const std::string& kind) {
    if (!j.is_object() || !j.contains("schema_version") || !j.contains("kind"))
        throw ValidationError("document is missing schema_version or kind");
    if (j.at("kind").get<std::string>() != kind)
        throw ValidationError("expected a " + kind + " document, got " + j.at("kind").get<std::string>());
    if (j.at("schema_version").get<int>() != kSchemaVersion)
        throw ValidationError("unsupported schema version " + std::to_string(j.at("schema_version").get<int>()));
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot open " + path + " for writing");
    out << text;
}

inline Json parse_json(const std::string& text, const std::string& what) {
    try {
        return Json::parse(text);
    } catch (const Json::parse_error& e) {
        throw ValidationError(what + ": " + e.what());
    }
}
} // namespace detail

// ---------------------------------------------------------------------------
// MDPs and policies

inline Json to_json(const TabularMDP& mdp) {
    Json terminal = Json::array();
    for (int s = 0; s < mdp.n_states(); ++s) terminal.push_back(mdp.terminal(s));
    return {{"schema_version", kSchemaVersion},
            {"kind", "tabular-mdp"},
            {"n_states", mdp.n_states()},
            {"n_actions", mdp.n_actions()},
            {"gamma", mdp.gamma()},
            {"transition", matrix_to_json(mdp.transition())},
            {"reward", matrix_to_json(mdp.reward())},
            {"initial", vector_to_json(mdp.initial_dist())},
            {"terminal", terminal}};
}

inline TabularMDP mdp_from_json(const Json& j) {
    detail::check_schema(j, "tabular-mdp");
    try {
        return TabularMDP(j.at("n_states").get<int>(), j.at("n_actions").get<int>(),
                          matrix_from_json(j.at("transition"), "transition"), matrix_from_json(j.at("reward"), "reward"),
                          j.at("gamma").get<double>(), vector_from_json(j.at("initial")),
                          j.at("terminal").get<std::vector<bool>>());
    } catch (const Json::exception& e) {
        throw ValidationError(std::string("malformed MDP document: ") + e.what());
    }
}

inline Json to_json(const PolicyTable& p) {
    return {{"schema_version", kSchemaVersion}, {"kind", "policy"}, {"probs", matrix_to_json(p.probs())}};
}

inline PolicyTable policy_from_json(const Json& j) {
    detail::check_schema(j, "policy");
    return PolicyTable(matrix_from_json(j.at("probs"), "probs"));
}

// ---------------------------------------------------------------------------
// Datasets: JSON Lines, header object first, then one transition per line

inline Json dataset_header(const TransitionDataset& d) {
    return {{"schema_version", kSchemaVersion},
            {"kind", "transition-dataset"},
            {"size", d.size()},
            {"feature_dim", d.feature_dim},
            {"coverage", d.coverage},
            {"provenance",
             {{"behavior", d.provenance.behavior},
              {"seed", d.provenance.seed},
              {"episode_cap", d.provenance.episode_cap},
              {"features", d.provenance.features}}}};
}

inline void write_dataset(std::ostream& os, const TransitionDataset& d) {
    os << dataset_header(d).dump() << '\n';
    for (const auto& t : d.transitions) {
        Json j = {{"state", t.state},
                  {"action", t.action},
                  {"reward", t.reward},
                  {"next_state", t.next_state},
                  {"done", t.done}};
        if (t.state_features) j["state_features"] = vector_to_json(*t.state_features);
        if (t.next_state_features) j["next_state_features"] = vector_to_json(*t.next_state_features);
        os << j.dump() << '\n';
    }
}

inline TransitionDataset read_dataset(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw ValidationError("dataset file is empty");
    const Json header = detail::parse_json(line, "dataset header");
    detail::check_schema(header, "transition-dataset");
    TransitionDataset d;
    try {
        d.feature_dim = header.at("feature_dim").get<int>();
        d.coverage = header.value("coverage", false);
        const Json& p = header.at("provenance");
        d.provenance = {p.value("behavior", ""), p.value("seed", std::uint64_t{0}), p.value("episode_cap", 0),
                        p.value("features", "")};
        int lineno = 1;
        while (std::getline(is, line)) {
            ++lineno;
            if (line.empty()) continue;
            const Json j = detail::parse_json(line, "dataset line " + std::to_string(lineno));
            Transition t;
            t.state = j.at("state").get<int>();
            t.action = j.at("action").get<int>();
            t.reward = j.at("reward").get<double>();
            t.next_state = j.at("next_state").get<int>();
            t.done = j.at("done").get<bool>();
            if (j.contains("state_features")) t.state_features = vector_from_json(j.at("state_features"));
            if (j.contains("next_state_features")) t.next_state_features = vector_from_json(j.at("next_state_features"));
            d.transitions.push_back(std::move(t));
        }
        if (header.contains("size") && header.at("size").get<std::size_t>() != d.size())
            throw ValidationError("dataset header declares " + std::to_string(header.at("size").get<std::size_t>()) +
                                  " transitions, file has " + std::to_string(d.size()));
    } catch (const Json::exception& e) {
        throw ValidationError(std::string("malformed dataset: ") + e.what());
    }
    return d;
}

inline void save_dataset(const std::string& path, const TransitionDataset& d) {
    std::ofstream os(path);
    if (!os) throw ValidationError("cannot open " + path + " for writing");
    write_dataset(os, d);
}

inline TransitionDataset load_dataset(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ValidationError("cannot open " + path);
    return read_dataset(is);
}

// ---------------------------------------------------------------------------
// Metric-engine and aggregation artifacts

inline Json to_json(const DistanceTable& d) {
    return {{"schema_version", kSchemaVersion},
            {"kind", "distance-table"},
            {"metric", to_string(d.kind)},
            {"converged", d.converged},
            {"residual", d.residual},
            {"iterations", d.iterations},
            {"values", matrix_to_json(d.values)}};
}

inline DistanceTable distance_table_from_json(const Json& j) {
    detail::check_schema(j, "distance-table");
    DistanceTable d;
    d.kind = metric_kind_from_string(j.at("metric").get<std::string>());
    d.converged = j.at("converged").get<bool>();
    d.residual = j.at("residual").get<double>();
    d.iterations = j.at("iterations").get<int>();
    d.values = matrix_from_json(j.at("values"), "values");
    return d;
}

inline Json to_json(const GroupAssignment& g) {
    return {{"schema_version", kSchemaVersion},
            {"kind", "group-assignment"},
            {"n_groups", g.n_groups},
            {"tolerance", g.tolerance},
            {"group_id", g.group_id}};
}

inline Json to_json(const BoundReport& r) {
    return {{"max_gap", r.max_gap}, {"bound", r.bound},        {"epsilon", r.epsilon},
            {"gamma", r.gamma},     {"n_clusters", r.n_clusters}, {"pass", r.pass}};
}

// ---------------------------------------------------------------------------
// Training logs and evaluation reports

inline void write_train_log(std::ostream& os, const std::vector<TrainLogRow>& rows, const std::string& statistic) {
    os << "step,loss," << statistic << ",target_updates\n";
    os << std::setprecision(17);
    for (const auto& r : rows) os << r.step << ',' << r.loss << ',' << r.statistic << ',' << r.target_updates << '\n';
}

inline Json to_json(const RunRecord& r) {
    Json trace = Json::array();
    for (const auto& c : r.trace) trace.push_back({{"step", c.step}, {"estimate", c.estimate}});
    Json j = {{"algorithm", r.algorithm}, {"hparams", r.hparams}, {"seed", r.seed},
              {"estimate", r.estimate},   {"rmae", r.rmae},       {"diverged", r.diverged},
              {"failed", r.failed},       {"error", r.error},     {"trace", trace}};
    if (r.algorithm == "rope+fqe") {
        j["beta"] = r.beta;
        j["encoder_initial_loss"] = r.encoder_initial_loss.value_or(0.0);
        j["encoder_final_loss"] = r.encoder_final_loss.value_or(0.0);
        j["collapse_risk"] = r.collapse_risk;
    }
    if (r.algorithm == "fqe-clip") j["clip"] = {{"targets", r.clip_targets}, {"within_range", r.clip_within}};
    return j;
}

inline Json to_json(const EvalReport& rep) {
    Json groups = Json::array();
    for (const auto& g : rep.groups)
        groups.push_back({{"algorithm", g.algorithm},
                          {"hparams", g.hparams},
                          {"n", g.n},
                          {"diverged", g.diverged},
                          {"failed", g.failed},
                          {"iqm_rmae", g.iqm},
                          {"ci_lo", g.ci_lo},
                          {"ci_hi", g.ci_hi},
                          {"median_rmae", g.median}});
    Json runs = Json::array();
    for (const auto& r : rep.records) runs.push_back(to_json(r));
    Json profiles = Json::object();
    for (const auto& p : rep.profiles) profiles[p.algorithm] = p.fractions;
    return {{"schema_version", kSchemaVersion},
            {"kind", "eval-report"},
            {"rho_e", rep.rho_e},
            {"rho_rand", rep.rho_rand},
            {"iqm_convention", rep.iqm_convention},
            {"groups", groups},
            {"best_hparams", rep.best_hparams},
            {"profile", {{"thresholds", rep.thresholds}, {"fractions", profiles}}},
            {"runs", runs}};
}

inline void write_runs_csv(std::ostream& os, const EvalReport& rep) {
    os << "algorithm,hparams,seed,estimate,rmae,diverged,failed\n" << std::setprecision(17);
    for (const auto& r : rep.records)
        os << r.algorithm << ',' << r.hparams << ',' << r.seed << ',' << r.estimate << ',' << r.rmae << ','
           << (r.diverged ? 1 : 0) << ',' << (r.failed ? 1 : 0) << '\n';
}

inline void write_profile_csv(std::ostream& os, const EvalReport& rep) {
    os << "threshold";
    for (const auto& p : rep.profiles) os << ',' << p.algorithm;
    os << '\n' << std::setprecision(17);
    for (std::size_t i = 0; i < rep.thresholds.size(); ++i) {
        os << rep.thresholds[i];
        for (const auto& p : rep.profiles) os << ',' << p.fractions[i];
        os << '\n';
    }
}

} // namespace rope
