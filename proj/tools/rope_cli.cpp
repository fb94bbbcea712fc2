// rope-cli: dataset construction, metric solving, bound checks, training and sweeps.

#include "rope/rope.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <unistd.h>

namespace fs = std::filesystem;
using namespace rope;

namespace {

enum ExitCode { kOk = 0, kValidation = 1, kViolation = 2, kDiverged = 3 };

struct BoundViolation : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct Diverged : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Globals {
    std::uint64_t seed = 0;
    std::string out = "rope-out";
    std::string config;
    bool strict = false;
    bool force = false;
};

/**
 * Artifacts are written into a hidden sibling directory and renamed into
 * place on commit, so a failed command never leaves a half-written output.
 * An existing target is replaced only with --force.
 */
class OutputDir {
public:
    OutputDir(const std::string& target, bool force) : target_(fs::absolute(target)), force_(force) {
        if (fs::exists(target_) && !force_)
            throw ValidationError("output directory " + target_.string() + " exists (use --force to replace it)");
        fs::create_directories(target_.parent_path());
        staging_ = target_.parent_path() / ("." + target_.filename().string() + ".tmp-" + std::to_string(::getpid()));
        fs::remove_all(staging_);
        fs::create_directory(staging_);
    }
    OutputDir(const OutputDir&) = delete;
    OutputDir& operator=(const OutputDir&) = delete;
    ~OutputDir() {
        std::error_code ec;
        if (!committed_) fs::remove_all(staging_, ec);
    }

    std::string path(const std::string& name) const {
        const fs::path p = staging_ / name;
        fs::create_directories(p.parent_path());
        return p.string();
    }

    void write(const std::string& name, const std::string& text) const {
        std::ofstream os(path(name));
        if (!os) throw ValidationError("cannot write " + name);
        os << text;
    }

    void write_json(const std::string& name, const Json& j) const { write(name, j.dump(2) + "\n"); }

    void commit() {
        if (fs::exists(target_)) {
            if (!force_) throw ValidationError("output directory " + target_.string() + " appeared during the run");
            fs::remove_all(target_);
        }
        fs::rename(staging_, target_);
        committed_ = true;
    }

    std::string target() const { return target_.string(); }

private:
    fs::path target_;
    fs::path staging_;
    bool force_;
    bool committed_ = false;
};

/// Flag -> config key bindings; flags given on the command line override the config file.
struct Overrides {
    struct Binding {
        CLI::Option* option;
        std::string key;
        bool quoted;
        bool list;
        std::string value;
    };
    std::vector<std::unique_ptr<Binding>> bindings;

    void add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help,
             bool quoted = false, bool list = false) {
        auto b = std::make_unique<Binding>();
        b->key = key;
        b->quoted = quoted;
        b->list = list;
        b->option = app->add_option(flag, b->value, help);
        bindings.push_back(std::move(b));
    }

    void apply(ConfigDocument& doc) const {
        for (const auto& b : bindings) {
            if (b->option->count() == 0) continue;
            auto render = [&](const std::string& v) { return b->quoted ? "\"" + v + "\"" : v; };
            if (b->list) {
                std::string raw = "[";
                std::stringstream ss(b->value);
                std::string item;
                bool first = true;
                while (std::getline(ss, item, ',')) {
                    raw += (first ? "" : ", ") + render(item);
                    first = false;
                }
                doc.set_raw(b->key, raw + "]");
            } else {
                doc.set_raw(b->key, render(b->value));
            }
        }
    }
};

ConfigDocument load_document(const Globals& g) {
    return g.config.empty() ? ConfigDocument{} : ConfigDocument::load(g.config);
}

/// Effective experiment config: defaults < config file < flags. An explicit --seed (or a config
/// without a seed list) selects that single seed; n_seeds > 0 selects seed .. seed + n_seeds - 1.
ExperimentConfig effective_config(const Globals& g, const Overrides& ov, bool seed_given, int n_seeds = 0) {
    ConfigDocument doc = load_document(g);
    ov.apply(doc);
    if (n_seeds > 0) {
        std::string raw = "[";
        for (int i = 0; i < n_seeds; ++i) raw += (i ? ", " : "") + std::to_string(g.seed + static_cast<std::uint64_t>(i));
        doc.set_raw("seeds", raw + "]");
    } else if (seed_given || !doc.has("seeds")) {
        doc.set_raw("seeds", "[" + std::to_string(g.seed) + "]");
    }
    return ExperimentConfig::from_document(doc);
}

std::string globals_header(const Globals& g, const std::string& command) {
    std::ostringstream os;
    os << "# command = " << command << "\n# seed = " << g.seed << "\n# out = " << g.out
       << "\n# config = " << (g.config.empty() ? "(none)" : g.config) << "\n# strict = " << (g.strict ? "true" : "false")
       << "\n\n";
    return os.str();
}

void add_env_flags(CLI::App* app, Overrides& ov) {
    ov.add(app, "--env", "env", "Environment: gridworld or random", true);
    ov.add(app, "--states", "random.n_states", "States of the random MDP");
    ov.add(app, "--actions", "random.n_actions", "Actions of the random MDP");
    ov.add(app, "--gamma", "random.gamma", "Discount of the random MDP");
    ov.add(app, "--mdp-seed", "random.seed", "Seed of the random MDP");
}

void add_dataset_flags(CLI::App* app, Overrides& ov) {
    ov.add(app, "--features", "features", "Feature map: one-hot or redundant", true);
    ov.add(app, "--noise-dims", "noise_dims", "Noise dimensions of redundant features");
    ov.add(app, "--noise-scale", "noise_scale", "Standard deviation of the noise dimensions");
    ov.add(app, "--size", "dataset.size", "Number of transitions");
    ov.add(app, "--behavior", "dataset.behavior", "Behavior policy: uniform or evaluation", true);
    ov.add(app, "--episode-cap", "dataset.episode_cap", "Steps before an episode is reset");
    ov.add(app, "--dataset", "dataset.path", "Existing dataset file (JSON Lines)", true);
}

void add_train_flags(CLI::App* app, Overrides& ov) {
    ov.add(app, "--preset", "train.preset", "Training preset: desk or full", true);
    ov.add(app, "--optimizer", "train.optimizer", "Optimizer: adam or sgd", true);
    ov.add(app, "--lr", "train.learning_rate", "Learning rate");
    ov.add(app, "--weight-decay", "train.weight_decay", "Decoupled weight decay");
    ov.add(app, "--batch-size", "train.batch_size", "Mini-batch size");
    ov.add(app, "--steps", "train.steps", "Gradient steps");
    ov.add(app, "--tau", "train.tau", "Target EMA coefficient");
    ov.add(app, "--target-every", "train.target_update_every", "Steps between target updates");
    ov.add(app, "--hidden", "train.hidden", "Hidden layer widths, comma separated", false, true);
    ov.add(app, "--checkpoint-every", "train.checkpoint_every", "Steps between estimate checkpoints");
}

TransitionDataset task_dataset(const Task& task, const ExperimentConfig& cfg, std::uint64_t seed) {
    if (!cfg.dataset_path.empty()) {
        TransitionDataset d = load_dataset(cfg.dataset_path);
        validate_dataset(d, task.mdp);
        return d;
    }
    return make_task_dataset(task, cfg, seed);
}

// ---------------------------------------------------------------------------

int cmd_make_dataset(const Globals& g, const ExperimentConfig& cfg, const std::string& echo) {
    const Task task = make_task(cfg);
    OutputDir out(g.out, g.force);
    const TransitionDataset d = make_task_dataset(task, cfg, g.seed);
    save_dataset(out.path("dataset.jsonl"), d);
    out.write_json("mdp.json", to_json(task.mdp));
    out.write_json("pi_e.json", to_json(task.pi_e));
    out.write_json("pi_b.json", to_json(task.pi_b));
    out.write("effective_config.toml", echo);
    const auto missing = missing_coverage(d, task.mdp, task.pi_e);
    out.commit();
    std::cout << "wrote " << d.size() << " transitions to " << out.target() << "/dataset.jsonl"
              << " (feature_dim " << d.feature_dim << ", " << missing.size() << " pi_e pairs uncovered)\n";
    return kOk;
}

const PolicyTable* metric_policy(MetricKind kind, const Task& task) {
    if (kind == MetricKind::mico_onpolicy) return &task.pi_b;
    if (kind == MetricKind::random_policy) return nullptr;
    return &task.pi_e;
}

int cmd_solve_metric(const Globals& g, const ExperimentConfig& cfg, const std::string& echo, const std::string& metric,
                     double tol, double group_tol) {
    const Task task = make_task(cfg);
    const MetricKind kind = metric_kind_from_string(metric);
    FixedPointOptions opt;
    opt.tol = tol;
    const DistanceTable d = solve_fixed_point(kind, task.mdp, metric_policy(kind, task), opt);
    if (!d.converged) throw ConvergenceError("metric iteration did not converge", d.residual, d.iterations);
    const GroupAssignment groups = group_zero_distance(d, task.mdp, group_tol);
    const PropertyReport props = check_diffuse_metric(d);
    OutputDir out(g.out, g.force);
    out.write_json("distance.json", to_json(d));
    out.write_json("groups.json", to_json(groups));
    out.write_json("properties.json", {{"negativity", props.negativity},
                                       {"asymmetry", props.asymmetry},
                                       {"triangle_violation", props.triangle_violation},
                                       {"min_self_distance", props.min_self_distance},
                                       {"max_self_distance", props.max_self_distance}});
    out.write("effective_config.toml", echo);
    out.commit();
    std::cout << metric << ": converged in " << d.iterations << " sweeps, " << groups.n_groups
              << " zero-distance groups, max self-distance " << props.max_self_distance << "\n";
    return kOk;
}

std::string pair_label(const TabularMDP& mdp, bool grid, int x, bool header = false) {
    if (header) return grid ? "cell,row,col,direction" : "state,action";
    const int s = mdp.state_of(x), a = mdp.action_of(x);
    if (!grid) return std::to_string(s) + "," + std::to_string(a);
    const int row = Gridworld::row(s), col = Gridworld::col(s);
    return std::to_string(s) + "," + std::to_string(row) + "," + std::to_string(col) + "," + grid_action_name(a);
}

int cmd_groupings(const Globals& g, const ExperimentConfig& cfg, const std::string& echo, const std::string& metric,
                  double tol) {
    const Task task = make_task(cfg);
    const bool grid = cfg.env == "gridworld";
    const MetricKind kind = metric_kind_from_string(metric);
    FixedPointOptions opt;
    opt.tol = 1e-12;
    opt.max_iter = 100000;
    const DistanceTable d = solve_fixed_point(kind, task.mdp, metric_policy(kind, task), opt);
    if (!d.converged) throw ConvergenceError("metric iteration did not converge", d.residual, d.iterations);
    const QTable q = policy_evaluation_q(task.mdp, task.pi_e);
    const GroupAssignment by_metric = group_zero_distance(d, task.mdp, tol);
    const GroupAssignment by_value = group_by_value(q, task.mdp, tol);
    const bool aligned = same_partition(by_metric, by_value);

    std::ostringstream groups, compare;
    groups << pair_label(task.mdp, grid, 0, true) << ",group_id\n";
    compare << pair_label(task.mdp, grid, 0, true) << ",q_value,value_group,metric_group\n" << std::setprecision(12);
    for (int x = 0; x < task.mdp.n_pairs(); ++x) {
        const auto xs = static_cast<std::size_t>(x);
        groups << pair_label(task.mdp, grid, x) << ',' << by_metric.group_id[xs] << '\n';
        compare << pair_label(task.mdp, grid, x) << ',' << q.flat()(x) << ',' << by_value.group_id[xs] << ','
                << by_metric.group_id[xs] << '\n';
    }
    const std::string verdict = aligned ? "ALIGNED" : "MISALIGNED";
    OutputDir out(g.out, g.force);
    out.write("groupings.csv", groups.str());
    out.write("comparison.csv", compare.str());
    out.write_json("verdict.json", {{"schema_version", kSchemaVersion},
                                    {"kind", "grouping-verdict"},
                                    {"metric", to_string(kind)},
                                    {"tolerance", tol},
                                    {"metric_groups", by_metric.n_groups},
                                    {"value_groups", by_value.n_groups},
                                    {"verdict", verdict}});
    out.write("effective_config.toml", echo);
    out.commit();
    std::cout << verdict << " (" << to_string(kind) << ": " << by_metric.n_groups << " groups, q level sets: "
              << by_value.n_groups << ")\n";
    return kOk;
}

int cmd_verify_bounds(const Globals& g, const ExperimentConfig& cfg, const std::string& echo,
                      const std::vector<double>& epsilons, int n_mdps, const std::vector<double>& gammas,
                      bool inject_fault) {
    struct Instance {
        std::string name;
        TabularMDP mdp;
        PolicyTable pi_e;
    };
    std::vector<Instance> instances;
    if (cfg.env == "gridworld") {
        Gridworld gw = build_gridworld();
        instances.push_back({"gridworld", gw.mdp, gw.pi_e});
    } else {
        for (int i = 0; i < n_mdps; ++i) {
            const std::uint64_t s = derive_seed(g.seed, static_cast<std::uint64_t>(i));
            const double gamma = gammas[static_cast<std::size_t>(i) % gammas.size()];
            instances.push_back({"random-" + std::to_string(i),
                                 build_random_mdp(cfg.random_states, cfg.random_actions, gamma, s),
                                 build_random_policy(cfg.random_states, cfg.random_actions, derive_seed(s, 1))});
        }
    }
    Json reports = Json::array();
    int violations = 0;
    for (const auto& inst : instances) {
        const QTable q = policy_evaluation_q(inst.mdp, inst.pi_e);
        FixedPointOptions opt;
        opt.tol = 1e-12;
        opt.max_iter = 100000;
        const DistanceTable d = solve_fixed_point(MetricKind::rope, inst.mdp, inst.pi_e, opt);
        for (double eps : epsilons) {
            AggregationCheck c = run_aggregation_check(inst.mdp, inst.pi_e, q, d, eps);
            if (inject_fault) {
                c.q_tilde(0) += 2.0 * c.lemma1.bound + 1.0;
                c.lemma1 = verify_lemma1_bound(q, c.q_tilde, c.mrp, eps, inst.mdp.gamma());
                c.theorem2 = verify_theorem2_bound(inst.mdp, inst.pi_e, q, c.q_tilde, c.mrp, eps);
            }
            const bool pass = c.lemma1.pass && c.theorem2.pass;
            if (!pass) ++violations;
            reports.push_back({{"instance", inst.name},
                               {"epsilon", eps},
                               {"pairwise", to_json(c.lemma1)},
                               {"initial", to_json(c.theorem2)},
                               {"pass", pass}});
        }
    }
    OutputDir out(g.out, g.force);
    out.write_json("bounds.json", {{"schema_version", kSchemaVersion},
                                   {"kind", "bound-reports"},
                                   {"fault_injected", inject_fault},
                                   {"violations", violations},
                                   {"reports", reports}});
    out.write("effective_config.toml", echo);
    out.commit();
    std::cout << reports.size() << " bound checks, " << violations << " violations\n";
    if (violations > 0) throw BoundViolation(std::to_string(violations) + " aggregation bound violations");
    return kOk;
}

Json encoder_metadata(const EncoderNetwork& e, const RopeTrainResult* r) {
    Json j = {{"schema_version", kSchemaVersion},
              {"kind", "rope-encoder"},
              {"beta", e.beta},
              {"output_dim", e.output_dim},
              {"online", "encoder_online.bin"},
              {"target", "encoder_target.bin"}};
    if (r) {
        j["initial_loss"] = r->initial_loss;
        j["final_loss"] = r->final_loss;
        j["collapse_risk"] = r->collapse_risk;
        j["target_updates"] = r->target_updates;
    }
    return j;
}

EncoderNetwork load_encoder(const std::string& dir) {
    const Json meta = detail::parse_json(detail::read_file((fs::path(dir) / "encoder.json").string()), "encoder.json");
    detail::check_schema(meta, "rope-encoder");
    EncoderNetwork e;
    e.beta = meta.at("beta").get<double>();
    e.output_dim = meta.at("output_dim").get<int>();
    e.online = load_checkpoint((fs::path(dir) / "encoder_online.bin").string());
    e.target = load_checkpoint((fs::path(dir) / "encoder_target.bin").string());
    require(e.online.same_shape(e.target), "encoder checkpoints differ in shape");
    return e;
}

int cmd_train_rope(const Globals& g, const ExperimentConfig& cfg, const std::string& echo) {
    const Task task = make_task(cfg);
    const TransitionDataset data = task_dataset(task, cfg, dataset_seed(g.seed));
    const DesignData dd = make_design_data(data, task.pi_e, &task.features);
    TrainConfig tc = cfg.train;
    tc.seed = g.seed;
    OutputDir out(g.out, g.force);
    const RopeTrainResult r = rope_train(dd, task.mdp.gamma(), tc, {cfg.beta.front(), cfg.output_dim});
    save_checkpoint(out.path("encoder_online.bin"), r.encoder.online);
    save_checkpoint(out.path("encoder_target.bin"), r.encoder.target);
    out.write_json("encoder.json", encoder_metadata(r.encoder, &r));
    std::ofstream log(out.path("rope_log.csv"));
    write_train_log(log, r.log, "mean_distance");
    log.close();
    out.write("effective_config.toml", echo);
    out.commit();
    std::cout << "encoder loss " << r.initial_loss << " -> " << r.final_loss
              << (r.collapse_risk ? " (constant rewards: representation collapse risk)" : "") << "\n";
    return kOk;
}

int cmd_train_fqe(const Globals& g, const ExperimentConfig& cfg, const std::string& echo, const std::string& variant_name,
                  const std::string& encoder_dir) {
    const Task task = make_task(cfg);
    const TransitionDataset data = task_dataset(task, cfg, dataset_seed(g.seed));
    const DesignData dd = make_design_data(data, task.pi_e, &task.features);
    std::optional<EncoderNetwork> encoder;
    if (!encoder_dir.empty()) encoder = load_encoder(encoder_dir);
    const EncoderNetwork* enc = encoder ? &*encoder : nullptr;
    const std::uint64_t before = enc ? parameter_checksum(enc->online) : 0;
    const FqeVariant variant = fqe_variant_from_string(variant_name);
    TrainConfig tc = apply_variant(cfg.train, variant);
    tc.seed = g.seed;
    const InitialInputs init =
        make_initial_inputs(task.mdp, task.pi_e, task.features, cfg.eval_samples, derive_seed(g.seed, 0xe7a1));

    OutputDir out(g.out, g.force);
    std::vector<CheckpointEstimate> trace;
    auto safe_estimate = [&](const DenseNet& q) {
        try {
            return fqe_estimate(q, init, enc);
        } catch (const NumericalFault&) {
            return std::numeric_limits<double>::quiet_NaN();
        }
    };
    const FqeResult r = fqe_train(make_fqe_inputs(dd, enc), task.mdp.gamma(), tc, [&](int step, const DenseNet& q) {
        const double e = safe_estimate(q);
        if (std::isfinite(e)) trace.push_back({step, e});
    });
    if (enc) require(parameter_checksum(enc->online) == before, "encoder parameters changed during FQE");
    // A diverged run reports its last finite checkpoint estimate, if any.
    const double final_estimate = safe_estimate(r.q);
    const double estimate =
        std::isfinite(final_estimate) || trace.empty() ? final_estimate : trace.back().estimate;
    save_checkpoint(out.path("q_network.bin"), r.q);
    std::ofstream log(out.path("fqe_log.csv"));
    write_train_log(log, r.log, "mean_abs_q");
    log.close();
    Json tr = Json::array();
    for (const auto& c : trace) tr.push_back({{"step", c.step}, {"estimate", c.estimate}});
    Json summary = {{"schema_version", kSchemaVersion},
                    {"kind", "fqe-run"},
                    {"variant", to_string(variant)},
                    {"encoder", enc != nullptr},
                    {"estimate", estimate},
                    {"rho_e", task.rho_e},
                    {"rho_rand", task.rho_rand},
                    {"rmae", rmae(estimate, task.rho_e, task.rho_rand)},
                    {"diverged", r.diverged},
                    {"divergence_reason", r.divergence_reason},
                    {"steps_completed", r.steps_completed},
                    {"trace", tr}};
    if (r.clip.enabled)
        summary["clip"] = {{"lo", r.clip.lo},
                           {"hi", r.clip.hi},
                           {"targets", r.clip.targets},
                           {"clipped", r.clip.clipped},
                           {"within_range", r.clip.within_range},
                           {"min_target", r.clip.targets ? r.clip.min_target : 0.0},
                           {"max_target", r.clip.targets ? r.clip.max_target : 0.0}};
    out.write_json("fqe.json", summary);
    out.write("effective_config.toml", echo);
    out.commit();
    std::cout << "estimate " << estimate << " (rho_e " << task.rho_e << "), rmae "
              << rmae(estimate, task.rho_e, task.rho_rand) << (r.diverged ? ", DIVERGED" : "") << "\n";
    if (r.clip.enabled)
        std::cout << "clip range [" << r.clip.lo << ", " << r.clip.hi << "]: " << r.clip.within_range << "/"
                  << r.clip.targets << " targets within range\n";
    if (r.diverged && g.strict) throw Diverged(r.divergence_reason);
    return kOk;
}

void write_report(const OutputDir& out, const EvalReport& rep) {
    out.write_json("report.json", to_json(rep));
    std::ostringstream runs, profile;
    write_runs_csv(runs, rep);
    write_profile_csv(profile, rep);
    out.write("runs.csv", runs.str());
    out.write("profile.csv", profile.str());
}

void print_summary(const EvalReport& rep) {
    for (const auto& gsum : rep.groups)
        std::cout << gsum.algorithm << (gsum.hparams.empty() ? "" : " [" + gsum.hparams + "]") << ": IQM RMAE "
                  << gsum.iqm << " [" << gsum.ci_lo << ", " << gsum.ci_hi << "], median " << gsum.median << ", n "
                  << gsum.n << (gsum.diverged ? ", diverged " + std::to_string(gsum.diverged) : "")
                  << (gsum.failed ? ", failed " + std::to_string(gsum.failed) : "") << "\n";
}

int divergence_exit(const Globals& g, const EvalReport& rep) {
    for (const auto& r : rep.records)
        if ((r.diverged || r.failed) && g.strict) throw Diverged(r.algorithm + " seed " + std::to_string(r.seed) + ": " + r.error);
    return kOk;
}

int cmd_evaluate(const Globals& g, const ExperimentConfig& cfg, const std::string& echo) {
    const Task task = make_task(cfg);
    OutputDir out(g.out, g.force);
    std::vector<RunRecord> records;
    for (const RunSpec& spec : expand_runs(cfg)) {
        const TransitionDataset data = task_dataset(task, cfg, dataset_seed(spec.seed));
        RunArtifacts art;
        records.push_back(execute_run(task, cfg, spec, data, &art));
        std::string dir = "runs/" + spec.algorithm + (spec.hparams().empty() ? "" : "_" + spec.hparams()) + "/seed_" +
                          std::to_string(spec.seed) + "/";
        if (art.q) save_checkpoint(out.path(dir + "q_network.bin"), *art.q);
        if (art.encoder) {
            save_checkpoint(out.path(dir + "encoder_online.bin"), art.encoder->online);
            save_checkpoint(out.path(dir + "encoder_target.bin"), art.encoder->target);
            out.write_json(dir + "encoder.json", encoder_metadata(*art.encoder, nullptr));
            std::ofstream log(out.path(dir + "rope_log.csv"));
            write_train_log(log, art.encoder_log, "mean_distance");
        }
        if (!art.fqe_log.empty()) {
            std::ofstream log(out.path(dir + "fqe_log.csv"));
            write_train_log(log, art.fqe_log, "mean_abs_q");
        }
        if (art.clip.enabled)
            out.write_json(dir + "clip.json", {{"lo", art.clip.lo},
                                               {"hi", art.clip.hi},
                                               {"targets", art.clip.targets},
                                               {"clipped", art.clip.clipped},
                                               {"within_range", art.clip.within_range}});
    }
    AggregateOptions opt;
    opt.bootstrap_resamples = cfg.bootstrap_resamples;
    opt.ci_level = cfg.ci_level;
    opt.seed = g.seed;
    opt.thresholds = cfg.profile_thresholds;
    const EvalReport rep = aggregate(std::move(records), task.rho_e, task.rho_rand, opt);
    write_report(out, rep);
    out.write("effective_config.toml", echo);
    out.commit();
    print_summary(rep);
    return divergence_exit(g, rep);
}

int cmd_sweep(const Globals& g, const ExperimentConfig& cfg, const std::string& echo) {
    OutputDir out(g.out, g.force);
    std::optional<TransitionDataset> fixed;
    if (!cfg.dataset_path.empty()) fixed = load_dataset(cfg.dataset_path);
    const EvalReport rep = run_sweep(cfg, fixed, g.seed);
    write_report(out, rep);
    out.write("effective_config.toml", echo);
    out.commit();
    print_summary(rep);
    for (const auto& [alg, hp] : rep.best_hparams)
        if (!hp.empty()) std::cout << "best " << alg << ": " << hp << "\n";
    return divergence_exit(g, rep);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"ROPE workbench: behavioral-similarity metrics, representation learning and off-policy evaluation"};
    app.require_subcommand(1);
    Globals g;
    auto* seed_opt = app.add_option("--seed", g.seed, "Seed for all randomness")->capture_default_str();
    app.add_option("--out", g.out, "Output directory")->capture_default_str();
    app.add_option("--config", g.config, "Key-value config file; flags override its values");
    app.add_flag("--strict", g.strict, "Exit with status 3 when a training run diverges");
    app.add_flag("--force", g.force, "Replace an existing output directory");
    app.fallthrough();

    Overrides ov_dataset, ov_metric, ov_group, ov_bounds, ov_rope, ov_fqe, ov_eval, ov_sweep;

    auto* make_dataset = app.add_subcommand("make-dataset", "Roll out a behavior policy and write a transition dataset");
    add_env_flags(make_dataset, ov_dataset);
    add_dataset_flags(make_dataset, ov_dataset);

    std::string metric = "rope";
    double metric_tol = 1e-10, group_tol = 1e-8;
    auto* solve = app.add_subcommand("solve-metric", "Solve a behavioral metric to its fixed point");
    add_env_flags(solve, ov_metric);
    solve->add_option("--metric", metric, "rope, mico, psm or random")->capture_default_str();
    solve->add_option("--tol", metric_tol, "Sup-norm stopping tolerance")->capture_default_str();
    solve->add_option("--group-tol", group_tol, "Zero-distance grouping tolerance")->capture_default_str();

    std::string group_metric = "rope";
    double grouping_tol = 1e-8;
    auto* groupings = app.add_subcommand("groupings", "Compare zero-distance groups against action-value level sets");
    add_env_flags(groupings, ov_group);
    groupings->add_option("--metric", group_metric, "rope, mico, psm or random")->capture_default_str();
    groupings->add_option("--tol", grouping_tol, "Grouping tolerance")->capture_default_str();

    std::vector<double> epsilons = {0.0, 0.05, 0.1, 0.2};
    std::vector<double> gammas = {0.5, 0.9, 0.99};
    int n_mdps = 100;
    bool inject_fault = false;
    auto* bounds = app.add_subcommand("verify-bounds", "Check the aggregation value-gap bounds");
    add_env_flags(bounds, ov_bounds);
    bounds->add_option("--epsilons", epsilons, "Cluster radii")->delimiter(',')->capture_default_str();
    bounds->add_option("--gammas", gammas, "Discounts cycled over random MDPs")->delimiter(',')->capture_default_str();
    bounds->add_option("--n-mdps", n_mdps, "Random MDP count")->capture_default_str();
    bounds->add_flag("--inject-fault", inject_fault, "Corrupt the aggregated values to exercise the failure path");

    auto* train_rope_cmd = app.add_subcommand("train-rope", "Train a ROPE encoder");
    add_env_flags(train_rope_cmd, ov_rope);
    add_dataset_flags(train_rope_cmd, ov_rope);
    add_train_flags(train_rope_cmd, ov_rope);
    ov_rope.add(train_rope_cmd, "--beta", "beta", "Angular-distance weight", false, true);
    ov_rope.add(train_rope_cmd, "--output-dim", "output_dim", "Encoder output dimension");

    std::string variant = "plain", encoder_dir;
    auto* train_fqe_cmd = app.add_subcommand("train-fqe", "Train fitted Q-evaluation, optionally on a frozen encoder");
    add_env_flags(train_fqe_cmd, ov_fqe);
    add_dataset_flags(train_fqe_cmd, ov_fqe);
    add_train_flags(train_fqe_cmd, ov_fqe);
    train_fqe_cmd->add_option("--variant", variant, "plain, clip or deep")->capture_default_str();
    train_fqe_cmd->add_option("--encoder", encoder_dir, "Directory written by train-rope");
    ov_fqe.add(train_fqe_cmd, "--eval-samples", "eval.samples", "Feature draws per start state");

    auto* evaluate = app.add_subcommand("evaluate", "Train and evaluate algorithms, keeping checkpoints and logs");
    add_env_flags(evaluate, ov_eval);
    add_dataset_flags(evaluate, ov_eval);
    add_train_flags(evaluate, ov_eval);
    ov_eval.add(evaluate, "--algorithms", "algorithms", "fqe, fqe-clip, fqe-deep, rope+fqe, dp-oracle", true, true);
    ov_eval.add(evaluate, "--beta", "beta", "Angular-distance weights", false, true);
    ov_eval.add(evaluate, "--output-dim", "output_dim", "Encoder output dimension");

    int n_seeds = 0;
    auto* sweep = app.add_subcommand("sweep", "Multi-seed sweep with IQM, confidence intervals and profiles");
    add_env_flags(sweep, ov_sweep);
    add_dataset_flags(sweep, ov_sweep);
    add_train_flags(sweep, ov_sweep);
    ov_sweep.add(sweep, "--algorithms", "algorithms", "fqe, fqe-clip, fqe-deep, rope+fqe, dp-oracle", true, true);
    ov_sweep.add(sweep, "--beta", "beta", "Angular-distance grid", false, true);
    ov_sweep.add(sweep, "--output-dim", "output_dim", "Encoder output dimension");
    ov_sweep.add(sweep, "--threads", "threads", "Worker threads (0 = all cores)");
    sweep->add_option("--n-seeds", n_seeds, "Run seeds seed .. seed+n-1 instead of the configured list");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kValidation;
    }

    const bool seed_given = seed_opt->count() > 0;
    try {
        auto config_for = [&](const Overrides& ov, int seeds = 0) {
            return effective_config(g, ov, seed_given, seeds);
        };
        auto echo_for = [&](const ExperimentConfig& cfg, const std::string& cmd) {
            return globals_header(g, cmd) + cfg.echo();
        };
        if (*make_dataset) {
            const auto cfg = config_for(ov_dataset);
            return cmd_make_dataset(g, cfg, echo_for(cfg, "make-dataset"));
        }
        if (*solve) {
            const auto cfg = config_for(ov_metric);
            return cmd_solve_metric(g, cfg, echo_for(cfg, "solve-metric"), metric, metric_tol, group_tol);
        }
        if (*groupings) {
            const auto cfg = config_for(ov_group);
            return cmd_groupings(g, cfg, echo_for(cfg, "groupings"), group_metric, grouping_tol);
        }
        if (*bounds) {
            require(!epsilons.empty() && !gammas.empty() && n_mdps >= 1, "verify-bounds needs epsilons, gammas and MDPs");
            const auto cfg = config_for(ov_bounds);
            return cmd_verify_bounds(g, cfg, echo_for(cfg, "verify-bounds"), epsilons, n_mdps, gammas, inject_fault);
        }
        if (*train_rope_cmd) {
            const auto cfg = config_for(ov_rope);
            return cmd_train_rope(g, cfg, echo_for(cfg, "train-rope"));
        }
        if (*train_fqe_cmd) {
            const auto cfg = config_for(ov_fqe);
            return cmd_train_fqe(g, cfg, echo_for(cfg, "train-fqe"), variant, encoder_dir);
        }
        if (*evaluate) {
            const auto cfg = config_for(ov_eval);
            return cmd_evaluate(g, cfg, echo_for(cfg, "evaluate"));
        }
        if (*sweep) {
            const auto cfg = config_for(ov_sweep, n_seeds);
            return cmd_sweep(g, cfg, echo_for(cfg, "sweep"));
        }
    } catch (const BoundViolation& e) {
        std::cerr << "bound violation: " << e.what() << "\n";
        return kViolation;
    } catch (const Diverged& e) {
        std::cerr << "diverged: " << e.what() << "\n";
        return kDiverged;
    } catch (const TrainingError& e) {
        std::cerr << "training failed: " << e.what() << "\n";
        return g.strict ? kDiverged : kValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidation;
    }
    return kOk;
}
