#pragma once

#include "rope/config.hpp"
#include "rope/fqe.hpp"

#include <algorithm>
#include <atomic>
#include <map>
#include <optional>
#include <thread>

namespace rope {

// ---------------------------------------------------------------------------
// Statistics

/// |rho_e - estimate| / |rho_e - rho_rand|
inline double rmae(double estimate, double rho_e, double rho_rand) {
    const double denom = std::abs(rho_e - rho_rand);
    if (denom == 0.0) throw ValidationError("rmae is undefined when rho_e equals rho_rand");
    return std::abs(rho_e - estimate) / denom;
}

inline constexpr const char* kIqmConvention =
    "fractional trim: sorted values each carry unit mass on [i, i+1); the mean is taken over [n/4, 3n/4] "
    "with boundary values weighted by their overlap";

/// Interquartile mean with fractional trimming of 25% per tail.
inline double iqm(std::vector<double> values) {
    require(!values.empty(), "iqm of an empty list");
    std::sort(values.begin(), values.end());
    const double n = static_cast<double>(values.size());
    const double lo = 0.25 * n, hi = 0.75 * n;
    double sum = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double a = std::max(lo, static_cast<double>(i));
        const double b = std::min(hi, static_cast<double>(i + 1));
        if (b > a) sum += (b - a) * values[i];
    }
    return sum / (hi - lo);
}

inline double median(std::vector<double> values) {
    require(!values.empty(), "median of an empty list");
    std::sort(values.begin(), values.end());
    const std::size_t m = values.size() / 2;
    return values.size() % 2 ? values[m] : 0.5 * (values[m - 1] + values[m]);
}

/// Linear-interpolation quantile of sorted data, q in [0, 1].
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
    require(!sorted.empty(), "quantile of an empty list");
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto k = static_cast<std::size_t>(std::floor(pos));
    if (k + 1 >= sorted.size()) return sorted.back();
    return sorted[k] + (pos - static_cast<double>(k)) * (sorted[k + 1] - sorted[k]);
}

struct ConfidenceInterval {
    double lo = 0.0;
    double hi = 0.0;
};

/**
 * Percentile bootstrap of the IQM. The interval is widened, if needed, to
 * contain the point estimate.
 */
inline ConfidenceInterval bootstrap_ci(const std::vector<double>& values, double level = 0.95, int resamples = 2000,
                                       std::uint64_t seed = 0) {
    require(!values.empty(), "bootstrap of an empty list");
    require(resamples >= 1000, "at least 1000 bootstrap resamples are required");
    require(level > 0.0 && level < 1.0, "confidence level must lie in (0, 1)");
    Rng rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
    std::vector<double> stats(static_cast<std::size_t>(resamples));
    std::vector<double> sample(values.size());
    for (auto& s : stats) {
        for (auto& v : sample) v = values[pick(rng)];
        s = iqm(sample);
    }
    std::sort(stats.begin(), stats.end());
    const double alpha = 0.5 * (1.0 - level);
    const double point = iqm(values);
    return {std::min(point, quantile_sorted(stats, alpha)), std::max(point, quantile_sorted(stats, 1.0 - alpha))};
}

/// Fraction of values strictly below each threshold.
inline std::vector<double> performance_profile(const std::vector<double>& values, const std::vector<double>& thresholds) {
    require(std::is_sorted(thresholds.begin(), thresholds.end()), "thresholds must be sorted ascending");
    std::vector<double> out;
    for (double t : thresholds) {
        if (values.empty()) {
            out.push_back(0.0);
            continue;
        }
        const auto below = std::count_if(values.begin(), values.end(), [t](double v) { return v < t; });
        out.push_back(static_cast<double>(below) / static_cast<double>(values.size()));
    }
    return out;
}

inline std::vector<double> default_profile_thresholds() {
    std::vector<double> t;
    for (int i = 0; i <= 100; ++i) t.push_back(0.02 * i);
    return t;
}

// ---------------------------------------------------------------------------
// Experiments

inline const std::vector<std::string>& known_algorithms() {
    static const std::vector<std::string> names = {"fqe", "fqe-clip", "fqe-deep", "rope+fqe", "dp-oracle"};
    return names;
}

struct ExperimentConfig {
    std::string env = "gridworld";
    int random_states = 6;
    int random_actions = 3;
    double random_gamma = 0.9;
    std::uint64_t random_seed = 0;

    std::string features = "redundant";
    int noise_dims = 16;
    double noise_scale = 1.0;

    int dataset_size = 2000;
    std::string behavior = "uniform";
    int episode_cap = 100;
    std::string dataset_path;

    std::vector<std::string> algorithms = {"fqe", "rope+fqe"};
    std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    std::vector<double> beta = {0.1, 1.0, 10.0};
    int output_dim = 16;

    std::string preset = "desk";
    TrainConfig train = TrainConfig::desk();

    int eval_samples = 64;
    int bootstrap_resamples = 2000;
    double ci_level = 0.95;
    std::vector<double> profile_thresholds = default_profile_thresholds();
    int threads = 1;

    void validate() const {
        require(env == "gridworld" || env == "random", "env must be gridworld or random");
        require(features == "one-hot" || features == "redundant", "features must be one-hot or redundant");
        require(dataset_size >= 1 && episode_cap >= 1, "dataset size and episode cap must be positive");
        require(behavior == "uniform" || behavior == "evaluation", "behavior must be uniform or evaluation");
        require(!algorithms.empty() && !seeds.empty(), "at least one algorithm and one seed are required");
        for (const auto& a : algorithms)
            require(std::find(known_algorithms().begin(), known_algorithms().end(), a) != known_algorithms().end(),
                    "unknown algorithm: " + a);
        require(!beta.empty(), "beta grid is empty");
        for (double b : beta) require(b >= 0.0, "beta must be nonnegative");
        require(output_dim >= 2, "output_dim must be at least 2");
        require(eval_samples >= 1 && threads >= 0, "invalid evaluation settings");
        require(std::is_sorted(profile_thresholds.begin(), profile_thresholds.end()), "profile thresholds must be sorted");
        train.validate();
    }

    static const std::set<std::string>& known_keys() {
        static const std::set<std::string> keys = {
            "env", "random.n_states", "random.n_actions", "random.gamma", "random.seed",
            "features", "noise_dims", "noise_scale",
            "dataset.size", "dataset.behavior", "dataset.episode_cap", "dataset.path",
            "algorithms", "seeds", "beta", "output_dim",
            "train.preset", "train.optimizer", "train.learning_rate", "train.weight_decay", "train.batch_size",
            "train.steps", "train.tau", "train.target_update_every", "train.huber_delta", "train.hidden",
            "train.grad_clip", "train.log_every", "train.checkpoint_every",
            "eval.samples", "eval.bootstrap_resamples", "eval.ci_level", "eval.profile_thresholds",
            "threads", "out", "seed"};
        return keys;
    }

    static ExperimentConfig from_document(const ConfigDocument& doc) {
        doc.check_known(known_keys());
        ExperimentConfig c;
        c.env = doc.get_string("env", c.env);
        c.random_states = static_cast<int>(doc.get_int("random.n_states", c.random_states));
        c.random_actions = static_cast<int>(doc.get_int("random.n_actions", c.random_actions));
        c.random_gamma = doc.get_double("random.gamma", c.random_gamma);
        c.random_seed = static_cast<std::uint64_t>(doc.get_int("random.seed", 0));
        c.features = doc.get_string("features", c.features);
        c.noise_dims = static_cast<int>(doc.get_int("noise_dims", c.noise_dims));
        c.noise_scale = doc.get_double("noise_scale", c.noise_scale);
        c.dataset_size = static_cast<int>(doc.get_int("dataset.size", c.dataset_size));
        c.behavior = doc.get_string("dataset.behavior", c.behavior);
        c.episode_cap = static_cast<int>(doc.get_int("dataset.episode_cap", c.episode_cap));
        c.dataset_path = doc.get_string("dataset.path", c.dataset_path);
        c.algorithms = doc.get_string_list("algorithms", c.algorithms);
        if (doc.has("seeds")) {
            c.seeds.clear();
            for (long long s : doc.get_int_list("seeds", {})) {
                require(s >= 0, "seeds must be nonnegative");
                c.seeds.push_back(static_cast<std::uint64_t>(s));
            }
        }
        c.beta = doc.get_double_list("beta", c.beta);
        c.output_dim = static_cast<int>(doc.get_int("output_dim", c.output_dim));

        c.preset = doc.get_string("train.preset", c.preset);
        if (c.preset == "full")
            c.train = TrainConfig::full();
        else
            require(c.preset == "desk", "train.preset must be desk or full");
        TrainConfig& t = c.train;
        t.optimizer = optimizer_kind_from_string(doc.get_string("train.optimizer", to_string(t.optimizer)));
        t.learning_rate = doc.get_double("train.learning_rate", t.learning_rate);
        t.weight_decay = doc.get_double("train.weight_decay", t.weight_decay);
        t.batch_size = static_cast<int>(doc.get_int("train.batch_size", t.batch_size));
        t.total_gradient_steps = static_cast<int>(doc.get_int("train.steps", t.total_gradient_steps));
        t.target_tau = doc.get_double("train.tau", t.target_tau);
        t.target_update_every = static_cast<int>(doc.get_int("train.target_update_every", t.target_update_every));
        t.huber_delta = doc.get_double("train.huber_delta", t.huber_delta);
        t.grad_clip_norm = doc.get_double("train.grad_clip", t.grad_clip_norm);
        t.log_every = static_cast<int>(doc.get_int("train.log_every", t.log_every));
        t.checkpoint_every = static_cast<int>(doc.get_int("train.checkpoint_every", t.checkpoint_every));
        if (doc.has("train.hidden")) {
            t.hidden.clear();
            for (long long h : doc.get_int_list("train.hidden", {})) t.hidden.push_back(static_cast<int>(h));
        }
        c.eval_samples = static_cast<int>(doc.get_int("eval.samples", c.eval_samples));
        c.bootstrap_resamples = static_cast<int>(doc.get_int("eval.bootstrap_resamples", c.bootstrap_resamples));
        c.ci_level = doc.get_double("eval.ci_level", c.ci_level);
        c.profile_thresholds = doc.get_double_list("eval.profile_thresholds", c.profile_thresholds);
        c.threads = static_cast<int>(doc.get_int("threads", c.threads));
        c.validate();
        return c;
    }

    /// Effective configuration in the same key-value format it is read from.
    std::string echo() const {
        std::ostringstream os;
        os.precision(17);
        auto str_list = [](const std::vector<std::string>& v) {
            std::string s = "[";
            for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", \"" : "\"") + v[i] + "\"";
            return s + "]";
        };
        auto num_list = [](const auto& v) {
            std::ostringstream s;
            s.precision(17);
            s << "[";
            for (std::size_t i = 0; i < v.size(); ++i) s << (i ? ", " : "") << v[i];
            s << "]";
            return s.str();
        };
        os << "env = \"" << env << "\"\n"
           << "features = \"" << features << "\"\n"
           << "noise_dims = " << noise_dims << "\n"
           << "noise_scale = " << noise_scale << "\n"
           << "algorithms = " << str_list(algorithms) << "\n"
           << "seeds = " << num_list(seeds) << "\n"
           << "beta = " << num_list(beta) << "\n"
           << "output_dim = " << output_dim << "\n"
           << "threads = " << threads << "\n\n"
           << "[random]\n"
           << "n_states = " << random_states << "\n"
           << "n_actions = " << random_actions << "\n"
           << "gamma = " << random_gamma << "\n"
           << "seed = " << random_seed << "\n\n"
           << "[dataset]\n"
           << "size = " << dataset_size << "\n"
           << "behavior = \"" << behavior << "\"\n"
           << "episode_cap = " << episode_cap << "\n"
           << "path = \"" << dataset_path << "\"\n\n"
           << "[train]\n"
           << "preset = \"" << preset << "\"\n"
           << "optimizer = \"" << to_string(train.optimizer) << "\"\n"
           << "learning_rate = " << train.learning_rate << "\n"
           << "weight_decay = " << train.weight_decay << "\n"
           << "batch_size = " << train.batch_size << "\n"
           << "steps = " << train.total_gradient_steps << "\n"
           << "tau = " << train.target_tau << "\n"
           << "target_update_every = " << train.target_update_every << "\n"
           << "huber_delta = " << train.huber_delta << "\n"
           << "hidden = " << num_list(train.hidden) << "\n"
           << "grad_clip = " << train.grad_clip_norm << "\n"
           << "log_every = " << train.log_every << "\n"
           << "checkpoint_every = " << train.checkpoint_every << "\n\n"
           << "[eval]\n"
           << "samples = " << eval_samples << "\n"
           << "bootstrap_resamples = " << bootstrap_resamples << "\n"
           << "ci_level = " << ci_level << "\n"
           << "profile_thresholds = " << num_list(profile_thresholds) << "\n";
        return os.str();
    }
};

/// Environment, policies and feature map for an experiment.
struct Task {
    TabularMDP mdp;
    PolicyTable pi_e;
    PolicyTable pi_b;
    FeatureMap features;
    double rho_e = 0.0;
    double rho_rand = 0.0;
};

inline Task make_task(const ExperimentConfig& cfg) {
    auto [mdp, pi_e] = [&]() -> std::pair<TabularMDP, PolicyTable> {
        if (cfg.env == "gridworld") {
            Gridworld g = build_gridworld();
            return {g.mdp, g.pi_e};
        }
        return {build_random_mdp(cfg.random_states, cfg.random_actions, cfg.random_gamma, cfg.random_seed),
                build_random_policy(cfg.random_states, cfg.random_actions, derive_seed(cfg.random_seed, 0x9e))};
    }();
    const PolicyTable uniform = PolicyTable::uniform(mdp.n_states(), mdp.n_actions());
    FeatureMap features = cfg.features == "one-hot"
                              ? FeatureMap::one_hot(mdp.n_states())
                              : FeatureMap::redundant(mdp.n_states(), cfg.noise_dims, cfg.noise_scale);
    const double rho_e = policy_value(mdp, pi_e, policy_evaluation_q(mdp, pi_e));
    const double rho_rand = policy_value(mdp, uniform, policy_evaluation_q(mdp, uniform));
    PolicyTable pi_b = cfg.behavior == "uniform" ? uniform : pi_e;
    return Task{std::move(mdp), std::move(pi_e), std::move(pi_b), std::move(features), rho_e, rho_rand};
}

inline TransitionDataset make_task_dataset(const Task& task, const ExperimentConfig& cfg, std::uint64_t seed) {
    DatasetOptions o;
    o.episode_cap = cfg.episode_cap;
    o.features = task.features;
    o.coverage_policy = task.pi_e;
    o.behavior_name = cfg.behavior;
    return generate_dataset(task.mdp, task.pi_b, cfg.dataset_size, seed, o);
}

/// Dataset seed for a run seed, so algorithms sharing a seed share data.
inline std::uint64_t dataset_seed(std::uint64_t run_seed) { return derive_seed(run_seed, 0xda7a); }

struct CheckpointEstimate {
    int step = 0;
    double estimate = 0.0;
};

struct RunRecord {
    std::string algorithm;
    std::string hparams;
    double beta = 0.0;
    std::uint64_t seed = 0;
    double estimate = 0.0;
    double rmae = 0.0;
    bool diverged = false;
    bool failed = false;
    std::string error;
    std::vector<CheckpointEstimate> trace;
    std::optional<double> encoder_initial_loss;
    std::optional<double> encoder_final_loss;
    bool collapse_risk = false;
    long long clip_targets = 0;
    long long clip_within = 0;
};

struct RunSpec {
    std::string algorithm;
    double beta = 0.0;
    std::uint64_t seed = 0;

    std::string hparams() const {
        if (algorithm != "rope+fqe") return "";
        std::ostringstream os;
        os << "beta=" << beta;
        return os.str();
    }
};

/// Expands algorithms x beta grid (ROPE only) x seeds in a fixed order.
inline std::vector<RunSpec> expand_runs(const ExperimentConfig& cfg) {
    std::vector<RunSpec> runs;
    for (const auto& a : cfg.algorithms) {
        const std::vector<double> grid = a == "rope+fqe" ? cfg.beta : std::vector<double>{0.0};
        for (double b : grid)
            for (auto s : cfg.seeds) runs.push_back({a, b, s});
    }
    return runs;
}

/// Trained networks and logs of one run, for callers that persist them.
struct RunArtifacts {
    std::optional<EncoderNetwork> encoder;
    std::optional<DenseNet> q;
    std::vector<TrainLogRow> encoder_log;
    std::vector<TrainLogRow> fqe_log;
    ClipStats clip;
};

/// Runs one (algorithm, hyperparameter, seed) point; failures are recorded, not thrown.
inline RunRecord execute_run(const Task& task, const ExperimentConfig& cfg, const RunSpec& spec,
                             const TransitionDataset& data, RunArtifacts* artifacts = nullptr) {
    RunRecord rec;
    rec.algorithm = spec.algorithm;
    rec.hparams = spec.hparams();
    rec.beta = spec.beta;
    rec.seed = spec.seed;
    try {
        if (spec.algorithm == "dp-oracle") {
            rec.estimate = policy_value(task.mdp, task.pi_e, policy_evaluation_q(task.mdp, task.pi_e));
            rec.rmae = rmae(rec.estimate, task.rho_e, task.rho_rand);
            rec.trace.push_back({0, rec.estimate});
            return rec;
        }
        const double gamma = task.mdp.gamma();
        const DesignData dd = make_design_data(data, task.pi_e, &task.features);
        const InitialInputs init =
            make_initial_inputs(task.mdp, task.pi_e, task.features, cfg.eval_samples, derive_seed(spec.seed, 0xe7a1));
        TrainConfig tc = cfg.train;
        tc.seed = spec.seed;

        std::optional<EncoderNetwork> encoder;
        FqeVariant variant = FqeVariant::plain;
        if (spec.algorithm == "rope+fqe") {
            RopeTrainResult r = rope_train(dd, gamma, tc, {spec.beta, cfg.output_dim});
            rec.encoder_initial_loss = r.initial_loss;
            rec.encoder_final_loss = r.final_loss;
            rec.collapse_risk = r.collapse_risk;
            if (artifacts) artifacts->encoder_log = r.log;
            encoder = std::move(r.encoder);
        } else if (spec.algorithm == "fqe-clip") {
            variant = FqeVariant::clip;
        } else if (spec.algorithm == "fqe-deep") {
            variant = FqeVariant::deep;
        }
        const EncoderNetwork* enc = encoder ? &*encoder : nullptr;
        FqeResult fr = fqe_train(make_fqe_inputs(dd, enc), gamma, apply_variant(tc, variant),
                                 [&](int step, const DenseNet& q) {
                                     const double e = fqe_estimate(q, init, enc);
                                     if (std::isfinite(e)) rec.trace.push_back({step, e});
                                 });
        if (artifacts) {
            artifacts->encoder = encoder;
            artifacts->q = fr.q;
            artifacts->fqe_log = fr.log;
            artifacts->clip = fr.clip;
        }
        rec.diverged = fr.diverged;
        rec.clip_targets = fr.clip.targets;
        rec.clip_within = fr.clip.within_range;
        double estimate = std::numeric_limits<double>::quiet_NaN();
        try {
            estimate = fqe_estimate(fr.q, init, enc);
        } catch (const NumericalFault&) {
        }
        if (!std::isfinite(estimate)) {
            if (rec.trace.empty()) throw TrainingError("no finite estimate: " + fr.divergence_reason);
            estimate = rec.trace.back().estimate;
        } else if (rec.diverged) {
            rec.trace.push_back({fr.steps_completed, estimate});
        }
        rec.estimate = estimate;
        rec.rmae = rmae(estimate, task.rho_e, task.rho_rand);
        if (rec.diverged) rec.error = fr.divergence_reason;
    } catch (const std::exception& e) {
        rec.failed = true;
        rec.error = e.what();
    }
    return rec;
}

struct GroupSummary {
    std::string algorithm;
    std::string hparams;
    int n = 0;
    int diverged = 0;
    int failed = 0;
    double iqm = 0.0;
    double ci_lo = 0.0;
    double ci_hi = 0.0;
    double median = 0.0;
};

struct ProfileCurve {
    std::string algorithm;
    std::vector<double> fractions;
};

struct EvalReport {
    double rho_e = 0.0;
    double rho_rand = 0.0;
    std::vector<RunRecord> records;
    std::vector<GroupSummary> groups;
    std::map<std::string, std::string> best_hparams; // algorithm -> grid point with lowest IQM
    std::vector<double> thresholds;
    std::vector<ProfileCurve> profiles;
    std::string iqm_convention = kIqmConvention;
};

struct AggregateOptions {
    int bootstrap_resamples = 2000;
    double ci_level = 0.95;
    std::uint64_t seed = 0;
    std::vector<double> thresholds = default_profile_thresholds();
};

/// Pure reduction of run records: records are sorted by (algorithm, hparams, seed) first.
inline EvalReport aggregate(std::vector<RunRecord> records, double rho_e, double rho_rand,
                            const AggregateOptions& opt = {}) {
    std::sort(records.begin(), records.end(), [](const RunRecord& a, const RunRecord& b) {
        return std::tie(a.algorithm, a.hparams, a.seed) < std::tie(b.algorithm, b.hparams, b.seed);
    });
    EvalReport rep;
    rep.rho_e = rho_e;
    rep.rho_rand = rho_rand;
    rep.thresholds = opt.thresholds;

    std::map<std::pair<std::string, std::string>, std::vector<const RunRecord*>> groups;
    for (const auto& r : records) groups[{r.algorithm, r.hparams}].push_back(&r);
    std::map<std::string, std::vector<double>> per_algorithm;
    std::uint64_t k = 0;
    for (const auto& [key, members] : groups) {
        GroupSummary g;
        g.algorithm = key.first;
        g.hparams = key.second;
        std::vector<double> vals;
        for (const RunRecord* r : members) {
            if (r->failed) {
                ++g.failed;
                continue;
            }
            if (r->diverged) ++g.diverged;
            vals.push_back(r->rmae);
            per_algorithm[g.algorithm].push_back(r->rmae);
        }
        g.n = static_cast<int>(vals.size());
        if (!vals.empty()) {
            g.iqm = iqm(vals);
            g.median = median(vals);
            const ConfidenceInterval ci = bootstrap_ci(vals, opt.ci_level, opt.bootstrap_resamples, derive_seed(opt.seed, k));
            g.ci_lo = ci.lo;
            g.ci_hi = ci.hi;
        }
        ++k;
        rep.groups.push_back(g);
    }
    std::map<std::string, double> best_iqm;
    for (const auto& g : rep.groups) {
        if (g.n == 0) continue;
        auto it = best_iqm.find(g.algorithm);
        if (it == best_iqm.end() || g.iqm < it->second) {
            best_iqm[g.algorithm] = g.iqm;
            rep.best_hparams[g.algorithm] = g.hparams;
        }
    }
    for (const auto& [alg, vals] : per_algorithm) rep.profiles.push_back({alg, performance_profile(vals, opt.thresholds)});
    rep.records = std::move(records);
    return rep;
}

/**
 * Runs every (algorithm, grid point, seed) on a pool of `threads` workers
 * (0 = hardware concurrency). Each run owns its engines and writes only its
 * own slot, so results do not depend on scheduling. With `fixed_dataset`,
 * every run shares that dataset; otherwise each seed draws its own.
 */
inline EvalReport run_sweep(const ExperimentConfig& cfg, const std::optional<TransitionDataset>& fixed_dataset = {},
                            std::uint64_t report_seed = 0) {
    cfg.validate();
    const Task task = make_task(cfg);
    const std::vector<RunSpec> runs = expand_runs(cfg);

    std::map<std::uint64_t, TransitionDataset> datasets;
    if (fixed_dataset) {
        validate_dataset(*fixed_dataset, task.mdp);
    } else {
        for (auto s : cfg.seeds) datasets.emplace(s, make_task_dataset(task, cfg, dataset_seed(s)));
    }

    std::vector<RunRecord> records(runs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < runs.size(); i = next++) {
            const TransitionDataset& d = fixed_dataset ? *fixed_dataset : datasets.at(runs[i].seed);
            records[i] = execute_run(task, cfg, runs[i], d);
        }
    };
    unsigned n_threads = cfg.threads > 0 ? static_cast<unsigned>(cfg.threads) : std::thread::hardware_concurrency();
    n_threads = std::max(1u, std::min<unsigned>(n_threads, static_cast<unsigned>(runs.size())));
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    AggregateOptions opt;
    opt.bootstrap_resamples = cfg.bootstrap_resamples;
    opt.ci_level = cfg.ci_level;
    opt.seed = report_seed;
    opt.thresholds = cfg.profile_thresholds;
    return aggregate(std::move(records), task.rho_e, task.rho_rand, opt);
}

} // namespace rope
