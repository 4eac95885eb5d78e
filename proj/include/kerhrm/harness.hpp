#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "kerhrm/clustering.hpp"
#include "kerhrm/config.hpp"
#include "kerhrm/csv_io.hpp"
#include "kerhrm/datagen.hpp"
#include "kerhrm/dataset.hpp"
#include "kerhrm/invariant.hpp"
#include "kerhrm/metrics.hpp"
#include "kerhrm/mlp.hpp"
#include "kerhrm/mnist_io.hpp"
#include "kerhrm/ntf_space.hpp"

namespace kerhrm {

struct ExperimentConfig {
    std::string task = "spurious_classification";
    std::vector<std::uint64_t> seeds = {1};
    std::vector<std::string> methods = {"kerhrm", "erm"};
    std::string out_dir = "out";
    bool quiet = false;
    bool record_timing = true;

    // model
    Eigen::Index hidden = 1024;
    std::string activation = "relu";

    // reduction rank; more than one entry means validation-selected sweep
    std::vector<Eigen::Index> k_values = {10, 15, 20, 25};
    double validation_fraction = 0.10;
    Eigen::Index gram_block = 256;

    // outer loop and objective weights
    int clusters = 2; // K
    int iterations = 3; // T
    double alpha = 10.0;
    double lambda = 1.0;

    // optimizers (non-positive rates pick automatic stable steps)
    int epochs = 500;
    int erm_epochs = 0; // 0: iterations * epochs, matching total steps
    double lr_net = 0.0;
    double lr_theta = 0.0;
    int theta_steps = 4000;

    // clustering
    int em_max_iter = 200;
    double em_tol = 1e-6;
    int em_restarts = 2;
    double em_ridge = 0.0;
    double em_sigma = 0.0;
    double em_jitter = 0.5;
    std::string assignment = "argmax";
    std::string kernel_update = "fresh";

    // data layout shared by generators
    int train_envs = 2;
    std::string scramble = "orthogonal";
    std::vector<Eigen::Index> env_sizes = {1000, 1000, 1000};

    // spurious-correlation classification
    Eigen::Index block_dim = 5;
    double sigma_s2 = 3.0;
    double sigma_v2 = 0.3;
    std::vector<double> bias_rates = {0.9, 0.8, 0.1};

    // selection-bias regression
    std::vector<double> sel_r = {2.3, -1.1, -2.9, -2.7, -2.5, -2.3, -2.1, -1.9};
    double sel_beta = 5.0;
    Eigen::Index sel_n_s = 5;
    Eigen::Index sel_dim = 10;
    double sel_noise_sd = std::sqrt(0.3);

    // example-4.1 style linear data
    Eigen::Index ex41_dim = 10;
    double ex41_noise = 0.5;
    std::vector<double> ex41_betas = {2.0, -2.0};

    // colored mnist
    std::string mnist_images;
    std::string mnist_labels;
    std::vector<double> mnist_flips = {0.1, 0.2, 0.9};
    double mnist_label_noise = 0.2;
    Eigen::Index mnist_n_per_env = 2500;
    int mnist_downsample = 14;

    // csv ingestion
    std::string csv_path;
    std::string csv_target;
    std::string csv_env;
    std::vector<double> csv_thresholds;

    static ExperimentConfig from_kv(KvConfig& kv) {
        ExperimentConfig c;
        c.task = kv.get_string("task", c.task);
        {
            std::vector<long long> def(c.seeds.begin(), c.seeds.end());
            c.seeds.clear();
            for (long long s : kv.get_int_list("seeds", def))
                c.seeds.push_back(static_cast<std::uint64_t>(s));
        }
        c.methods = kv.get_string_list("methods", c.methods);
        c.out_dir = kv.get_string("out", c.out_dir);
        c.quiet = kv.get_bool("quiet", c.quiet);
        c.record_timing = kv.get_bool("record_timing", c.record_timing);
        c.hidden = kv.get_int("hidden", c.hidden);
        c.activation = kv.get_string("activation", c.activation);
        {
            std::vector<long long> def(c.k_values.begin(), c.k_values.end());
            c.k_values.clear();
            for (long long k : kv.get_int_list("k", def)) c.k_values.push_back(k);
        }
        c.validation_fraction = kv.get_double("validation_fraction", c.validation_fraction);
        c.gram_block = kv.get_int("gram_block", c.gram_block);
        c.clusters = static_cast<int>(kv.get_int("K", c.clusters));
        c.iterations = static_cast<int>(kv.get_int("T", c.iterations));
        c.alpha = kv.get_double("alpha", c.alpha);
        c.lambda = kv.get_double("lambda", c.lambda);
        c.epochs = static_cast<int>(kv.get_int("epochs", c.epochs));
        c.erm_epochs = static_cast<int>(kv.get_int("erm_epochs", c.erm_epochs));
        c.lr_net = kv.get_double("lr_net", c.lr_net);
        c.lr_theta = kv.get_double("lr_theta", c.lr_theta);
        c.theta_steps = static_cast<int>(kv.get_int("theta_steps", c.theta_steps));
        c.em_max_iter = static_cast<int>(kv.get_int("em_max_iter", c.em_max_iter));
        c.em_tol = kv.get_double("em_tol", c.em_tol);
        c.em_restarts = static_cast<int>(kv.get_int("em_restarts", c.em_restarts));
        c.em_ridge = kv.get_double("em_ridge", c.em_ridge);
        c.em_sigma = kv.get_double("em_sigma", c.em_sigma);
        c.em_jitter = kv.get_double("em_jitter", c.em_jitter);
        c.assignment = kv.get_string("assignment", c.assignment);
        c.kernel_update = kv.get_string("kernel_update", c.kernel_update);
        c.train_envs = static_cast<int>(kv.get_int("train_envs", c.train_envs));
        c.scramble = kv.get_string("scramble", c.scramble);
        {
            std::vector<long long> def(c.env_sizes.begin(), c.env_sizes.end());
            c.env_sizes.clear();
            for (long long n : kv.get_int_list("env_sizes", def)) c.env_sizes.push_back(n);
        }
        c.block_dim = kv.get_int("block_dim", c.block_dim);
        c.sigma_s2 = kv.get_double("sigma_s2", c.sigma_s2);
        c.sigma_v2 = kv.get_double("sigma_v2", c.sigma_v2);
        c.bias_rates = kv.get_double_list("bias_rates", c.bias_rates);
        c.sel_r = kv.get_double_list("sel_r", c.sel_r);
        c.sel_beta = kv.get_double("sel_beta", c.sel_beta);
        c.sel_n_s = kv.get_int("sel_n_s", c.sel_n_s);
        c.sel_dim = kv.get_int("sel_dim", c.sel_dim);
        c.sel_noise_sd = kv.get_double("sel_noise_sd", c.sel_noise_sd);
        c.ex41_dim = kv.get_int("ex41_dim", c.ex41_dim);
        c.ex41_noise = kv.get_double("ex41_noise", c.ex41_noise);
        c.ex41_betas = kv.get_double_list("ex41_betas", c.ex41_betas);
        c.mnist_images = kv.get_string("mnist_images", c.mnist_images);
        c.mnist_labels = kv.get_string("mnist_labels", c.mnist_labels);
        c.mnist_flips = kv.get_double_list("mnist_flips", c.mnist_flips);
        c.mnist_label_noise = kv.get_double("mnist_label_noise", c.mnist_label_noise);
        c.mnist_n_per_env = kv.get_int("mnist_n_per_env", c.mnist_n_per_env);
        c.mnist_downsample = static_cast<int>(kv.get_int("mnist_downsample", c.mnist_downsample));
        c.csv_path = kv.get_string("csv_path", c.csv_path);
        c.csv_target = kv.get_string("csv_target", c.csv_target);
        c.csv_env = kv.get_string("csv_env", c.csv_env);
        c.csv_thresholds = kv.get_double_list("csv_thresholds", c.csv_thresholds);
        kv.reject_unknown_keys();
        c.validate();
        return c;
    }

    Activation activation_kind() const {
        if (activation == "relu") return Activation::Relu;
        if (activation == "tanh") return Activation::Tanh;
        throw ConfigError("config: unknown activation '" + activation + "'");
    }

    Scramble scramble_kind() const {
        if (scramble == "identity") return Scramble::Identity;
        if (scramble == "orthogonal") return Scramble::RandomOrthogonal;
        throw ConfigError("config: unknown scramble '" + scramble + "'");
    }

    AssignMode assign_mode() const {
        if (assignment == "argmax") return AssignMode::Argmax;
        if (assignment == "sample") return AssignMode::Sample;
        throw ConfigError("config: unknown assignment '" + assignment + "'");
    }

    UpdateMode update_mode() const {
        if (kernel_update == "fresh") return UpdateMode::Fresh;
        if (kernel_update == "cumulative") return UpdateMode::Cumulative;
        throw ConfigError("config: unknown kernel_update '" + kernel_update + "'");
    }

    TaskKind task_kind() const {
        if (task == "spurious_classification" || task == "colored_mnist" || task == "example41")
            return TaskKind::Classification;
        if (task == "selection_bias" || task == "csv") return TaskKind::Regression;
        throw ConfigError("config: unknown task '" + task + "'");
    }

    void validate() const {
        task_kind();
        activation_kind();
        assign_mode();
        update_mode();
        if (seeds.empty()) throw ConfigError("config: seeds must be non-empty");
        if (iterations < 1) throw ConfigError("config: T must be >= 1");
        if (clusters < 2) throw ConfigError("config: K must be >= 2");
        if (k_values.empty()) throw ConfigError("config: k must be non-empty");
        for (auto k : k_values)
            if (k < 1) throw ConfigError("config: k entries must be >= 1");
        if (alpha < 0.0) throw ConfigError("config: alpha must be >= 0");
        if (lambda < 0.0) throw ConfigError("config: lambda must be >= 0");
        if (hidden < 1) throw ConfigError("config: hidden must be >= 1");
        if (train_envs < 1) throw ConfigError("config: train_envs must be >= 1");
        if (validation_fraction <= 0.0 || validation_fraction >= 0.5)
            throw ConfigError("config: validation_fraction must be in (0, 0.5)");
        if (methods.empty()) throw ConfigError("config: methods must be non-empty");
        for (const auto& m : methods)
            if (m != "kerhrm" && m != "kerhrm-static" && m != "erm" && m != "irm")
                throw ConfigError("config: unknown method '" + m + "'");
    }

    // Every effective value, for the report's config echo.
    std::map<std::string, std::string> echo() const {
        std::map<std::string, std::string> out;
        auto num = [](auto v) {
            std::ostringstream s;
            s.precision(17);
            s << v;
            return s.str();
        };
        auto list = [&](const auto& xs) {
            std::string s;
            for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + num(xs[i]);
            return s;
        };
        out["task"] = task;
        out["seeds"] = list(seeds);
        {
            std::string m;
            for (std::size_t i = 0; i < methods.size(); ++i) m += (i ? "," : "") + methods[i];
            out["methods"] = m;
        }
        out["out"] = out_dir;
        out["quiet"] = quiet ? "true" : "false";
        out["record_timing"] = record_timing ? "true" : "false";
        out["hidden"] = num(hidden);
        out["activation"] = activation;
        out["k"] = list(k_values);
        out["validation_fraction"] = num(validation_fraction);
        out["gram_block"] = num(gram_block);
        out["K"] = num(clusters);
        out["T"] = num(iterations);
        out["alpha"] = num(alpha);
        out["lambda"] = num(lambda);
        out["epochs"] = num(epochs);
        out["erm_epochs"] = num(erm_epochs);
        out["lr_net"] = num(lr_net);
        out["lr_theta"] = num(lr_theta);
        out["theta_steps"] = num(theta_steps);
        out["em_max_iter"] = num(em_max_iter);
        out["em_tol"] = num(em_tol);
        out["em_restarts"] = num(em_restarts);
        out["em_ridge"] = num(em_ridge);
        out["em_sigma"] = num(em_sigma);
        out["em_jitter"] = num(em_jitter);
        out["assignment"] = assignment;
        out["kernel_update"] = kernel_update;
        out["train_envs"] = num(train_envs);
        out["scramble"] = scramble;
        out["env_sizes"] = list(env_sizes);
        out["block_dim"] = num(block_dim);
        out["sigma_s2"] = num(sigma_s2);
        out["sigma_v2"] = num(sigma_v2);
        out["bias_rates"] = list(bias_rates);
        out["sel_r"] = list(sel_r);
        out["sel_beta"] = num(sel_beta);
        out["sel_n_s"] = num(sel_n_s);
        out["sel_dim"] = num(sel_dim);
        out["sel_noise_sd"] = num(sel_noise_sd);
        out["ex41_dim"] = num(ex41_dim);
        out["ex41_noise"] = num(ex41_noise);
        out["ex41_betas"] = list(ex41_betas);
        out["mnist_images"] = mnist_images;
        out["mnist_labels"] = mnist_labels;
        out["mnist_flips"] = list(mnist_flips);
        out["mnist_label_noise"] = num(mnist_label_noise);
        out["mnist_n_per_env"] = num(mnist_n_per_env);
        out["mnist_downsample"] = num(mnist_downsample);
        out["csv_path"] = csv_path;
        out["csv_target"] = csv_target;
        out["csv_env"] = csv_env;
        out["csv_thresholds"] = list(csv_thresholds);
        return out;
    }
};

struct IterationTrace {
    int iteration = 0;
    double theta_norm = 0.0;
    double align_cos = 0.0;
    double clustering_objective = 0.0;
    int em_iterations = 0;
    std::optional<double> kl_diag;
    std::optional<double> purity;
    double orth_residual = 0.0;
    double train_metric = 0.0; // accuracy (classification) or MSE (regression)
    double test_metric = 0.0;  // mean accuracy or Mean_Error over test envs
};

struct SeedResult {
    std::uint64_t seed = 0;
    Eigen::Index chosen_k = 0;
    double train_mse = 0.0;
    double train_accuracy = 0.0;
    MetricRecord test;
    std::vector<IterationTrace> trace;
    std::vector<std::string> warnings;
    double seconds = 0.0;
};

struct MethodAggregates {
    double test_accuracy_mean = 0.0;
    double test_accuracy_std = 0.0;
    double train_accuracy_mean = 0.0;
    double mean_error_mean = 0.0;
    double mean_error_std = 0.0;
    std::optional<double> std_error_mean;
    double train_mse_mean = 0.0;
};

struct MethodResult {
    std::string method;
    std::vector<SeedResult> per_seed;
    MethodAggregates aggregates;
};

struct Report {
    int schema_version = 1;
    std::map<std::string, std::string> config;
    TaskKind task = TaskKind::Classification;
    std::vector<MethodResult> methods;
    std::vector<std::string> warnings;
    double total_seconds = 0.0;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
    std::uint64_t x = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
    x ^= x >> 30; x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27; x *= 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline Dataset subset(const Dataset& d, const std::vector<Eigen::Index>& idx) {
    Dataset out;
    out.X.resize(static_cast<Eigen::Index>(idx.size()), d.dim());
    out.Y.resize(static_cast<Eigen::Index>(idx.size()));
    Eigen::VectorXi env(static_cast<Eigen::Index>(idx.size())), spur(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t t = 0; t < idx.size(); ++t) {
        out.X.row(static_cast<Eigen::Index>(t)) = d.X.row(idx[t]);
        out.Y[static_cast<Eigen::Index>(t)] = d.Y[idx[t]];
        if (d.latent_env) env[static_cast<Eigen::Index>(t)] = (*d.latent_env)[idx[t]];
        if (d.spurious_attr) spur[static_cast<Eigen::Index>(t)] = (*d.spurious_attr)[idx[t]];
    }
    if (d.latent_env) out.latent_env = env;
    if (d.spurious_attr) out.spurious_attr = spur;
    return out;
}

// Primary scalar per task: higher-is-better accuracy for classification,
// lower-is-better Mean_Error for regression.
inline double primary_metric(const MetricRecord& rec, TaskKind task) {
    return task == TaskKind::Classification ? rec.mean_accuracy : rec.mean_error;
}

inline MetricRecord evaluate_model(const MlpState& model, const std::vector<Dataset>& tests,
                                   TaskKind task) {
    std::vector<Eigen::VectorXd> preds, ys;
    for (const auto& t : tests) {
        preds.push_back(forward(model, t.X));
        ys.push_back(t.Y);
    }
    return metrics(preds, ys, task);
}

} // namespace detail

/// One full run of the iterative algorithm on pooled training data with a
/// fixed reduction rank: cluster with the current kernel, fit the invariant
/// direction on the learned environments, feed it back into the network,
/// then orthogonalize the kernel. Tangent features stay frozen at w0.
inline SeedResult kerhrm_pipeline(const ExperimentConfig& cfg, const Dataset& train,
                                  const std::vector<Dataset>& tests, std::uint64_t seed,
                                  Eigen::Index k, int iterations) {
    const auto t_start = std::chrono::steady_clock::now();
    const TaskKind task = cfg.task_kind();
    SeedResult out;
    out.seed = seed;

    MlpConfig mc{train.dim(), cfg.hidden, cfg.activation_kind(), seed};
    MlpState model = MlpState::init(mc);
    const Eigen::Index n = train.n();
    if (k > n) {
        out.warnings.push_back("k clamped from " + std::to_string(k) + " to n=" + std::to_string(n));
        k = n;
    }
    out.chosen_k = k;

    RowSource rows = [&model, &train](Eigen::Index b, Eigen::Index e) {
        return ntf_rows(model, train.X.middleRows(b, e - b));
    };
    Eigen::MatrixXd gram = build_gram(rows, n, cfg.gram_block);
    NtfSpace space = decompose(gram, k);
    for (const auto& w : space.warnings) out.warnings.push_back(w);
    const ReducedCoordsMap coords = coords_map(space);
    const Eigen::VectorXd f0 = forward(model, train.X);
    KernelState kstate = initial_kernel_state(space);

    // Stable full-batch step from the known tangent spectrum.
    const double lr_net = cfg.lr_net > 0.0
                              ? cfg.lr_net
                              : 0.4 * static_cast<double>(n) / (space.S[0] * space.S[0]);

    for (int t = 1; t <= iterations; ++t) {
        ClusteringOptions copts;
        copts.K = cfg.clusters;
        copts.max_iter = cfg.em_max_iter;
        copts.tol = cfg.em_tol;
        copts.restarts = cfg.em_restarts;
        copts.ridge = cfg.em_ridge;
        copts.sigma = cfg.em_sigma;
        copts.init_jitter = cfg.em_jitter;
        copts.seed = detail::mix_seed(seed, 100 + static_cast<std::uint64_t>(t));
        auto [cmodel, part] = run_clustering(kstate, train.Y, copts);
        for (const auto& w : part.warnings) out.warnings.push_back("iter " + std::to_string(t) + ": " + w);
        Eigen::VectorXi labels = assign_environments(part, cfg.assign_mode(),
                                                     detail::mix_seed(seed, 200 + static_cast<std::uint64_t>(t)));

        InvariantDirection inv;
        auto sets = env_index_sets(labels);
        try {
            if (sets.size() < 2) throw DegenerateError("single learned environment");
            inv = fit_theta_inv(space, train.Y, sets, cfg.alpha, cfg.lr_theta, cfg.theta_steps);
        } catch (const DegenerateError& e) {
            out.warnings.push_back("iter " + std::to_string(t) +
                                   ": degenerate environments (" + e.what() +
                                   "), falling back to pooled regression");
            std::vector<std::vector<Eigen::Index>> pooled(1);
            pooled[0].resize(static_cast<std::size_t>(n));
            std::iota(pooled[0].begin(), pooled[0].end(), Eigen::Index{0});
            inv = fit_theta_inv(space, train.Y, pooled, 0.0, cfg.lr_theta, cfg.theta_steps);
        }

        TrainResult tr = train_feedback(model, train.X, train.Y, inv.theta, coords, cfg.lambda,
                                        cfg.epochs, lr_net);
        model = tr.model;
        for (const auto& w : tr.warnings) out.warnings.push_back("iter " + std::to_string(t) + ": " + w);

        kstate = orthogonal_update(space, kstate, inv.theta, cfg.update_mode());

        IterationTrace row;
        row.iteration = t;
        row.theta_norm = inv.theta.norm();
        row.align_cos = tr.final_abs_cos;
        row.clustering_objective = part.objective_trace.empty() ? 0.0 : part.objective_trace.back();
        row.em_iterations = part.em_iterations;
        DiagnosticRecord diag = env_diagnostics(labels, train);
        row.kl_diag = diag.kl_between_envs;
        row.purity = diag.purity;
        row.orth_residual = max_normalized_alignment(kstate.PsiV, inv.theta);
        MetricRecord train_m = detail::evaluate_model(model, {train}, task);
        MetricRecord test_m = detail::evaluate_model(model, tests, task);
        row.train_metric = task == TaskKind::Classification ? train_m.mean_accuracy : train_m.mean_error;
        row.test_metric = detail::primary_metric(test_m, task);
        out.trace.push_back(row);
    }

    MetricRecord train_final = detail::evaluate_model(model, {train}, task);
    out.train_mse = train_final.mean_error;
    out.train_accuracy = train_final.mean_accuracy;
    out.test = detail::evaluate_model(model, tests, task);
    out.seconds = cfg.record_timing
                      ? std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count()
                      : 0.0;
    return out;
}

namespace detail {

// Validation split for the rank sweep: a seeded shuffle, first slice out.
inline std::pair<Dataset, Dataset> validation_split(const Dataset& train, double fraction,
                                                    std::uint64_t seed) {
    const Eigen::Index n = train.n();
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    Rng rng(mix_seed(seed, 7));
    std::shuffle(order.begin(), order.end(), rng);
    const Eigen::Index hold = std::max<Eigen::Index>(1, static_cast<Eigen::Index>(fraction * n));
    std::vector<Eigen::Index> hold_idx(order.begin(), order.begin() + hold);
    std::vector<Eigen::Index> fit_idx(order.begin() + hold, order.end());
    return {subset(train, fit_idx), subset(train, hold_idx)};
}

template <typename PipelineFn>
inline SeedResult sweep_rank(const ExperimentConfig& cfg, const Dataset& train,
                             const std::vector<Dataset>& tests, std::uint64_t seed,
                             PipelineFn&& pipeline) {
    if (cfg.k_values.size() == 1) return pipeline(train, tests, cfg.k_values[0]);
    auto [fit, hold] = validation_split(train, cfg.validation_fraction, seed);
    const TaskKind task = cfg.task_kind();
    Eigen::Index best_k = cfg.k_values.front();
    double best_score = 0.0;
    bool first = true;
    std::vector<std::string> sweep_notes;
    for (Eigen::Index k : cfg.k_values) {
        SeedResult r = pipeline(fit, std::vector<Dataset>{hold}, k);
        const double score = primary_metric(r.test, task);
        const bool better = task == TaskKind::Classification ? score > best_score : score < best_score;
        if (first || better) {
            best_score = score;
            best_k = k;
            first = false;
        }
        std::ostringstream note;
        note << "k-sweep: k=" << k << " validation metric " << score;
        sweep_notes.push_back(note.str());
    }
    SeedResult final = pipeline(train, tests, best_k);
    final.warnings.insert(final.warnings.begin(), sweep_notes.begin(), sweep_notes.end());
    return final;
}

} // namespace detail

inline SeedResult kerhrm_seed(const ExperimentConfig& cfg, const Dataset& train,
                              const std::vector<Dataset>& tests, std::uint64_t seed,
                              int iterations) {
    return detail::sweep_rank(cfg, train, tests, seed,
                              [&](const Dataset& tr, const std::vector<Dataset>& te, Eigen::Index k) {
                                  return kerhrm_pipeline(cfg, tr, te, seed, k, iterations);
                              });
}

/// Plain pooled squared-loss training of the same network.
inline SeedResult erm_seed(const ExperimentConfig& cfg, const Dataset& train,
                           const std::vector<Dataset>& tests, std::uint64_t seed) {
    const auto t_start = std::chrono::steady_clock::now();
    const TaskKind task = cfg.task_kind();
    SeedResult out;
    out.seed = seed;
    MlpConfig mc{train.dim(), cfg.hidden, cfg.activation_kind(), seed};
    MlpState model = MlpState::init(mc);
    const int epochs = cfg.erm_epochs > 0 ? cfg.erm_epochs : cfg.iterations * cfg.epochs;
    TrainResult tr = train_erm(model, train.X, train.Y, epochs, cfg.lr_net);
    out.warnings = tr.warnings;
    MetricRecord train_final = detail::evaluate_model(tr.model, {train}, task);
    out.train_mse = train_final.mean_error;
    out.train_accuracy = train_final.mean_accuracy;
    out.test = detail::evaluate_model(tr.model, tests, task);
    out.seconds = cfg.record_timing
                      ? std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count()
                      : 0.0;
    return out;
}

/// Variance-penalized regression in reduced coordinates with the true
/// environment labels; test points are projected through the cross gram.
inline SeedResult irm_seed(const ExperimentConfig& cfg, const Dataset& train,
                           const std::vector<Dataset>& tests, std::uint64_t seed) {
    if (!train.latent_env) throw ConfigError("irm: training data has no environment labels");
    const auto t_start = std::chrono::steady_clock::now();
    const TaskKind task = cfg.task_kind();

    auto pipeline = [&](const Dataset& tr, const std::vector<Dataset>& te, Eigen::Index k) {
        SeedResult res;
        res.seed = seed;
        MlpConfig mc{tr.dim(), cfg.hidden, cfg.activation_kind(), seed};
        MlpState model = MlpState::init(mc);
        const Eigen::Index n = tr.n();
        if (k > n) k = n;
        res.chosen_k = k;
        RowSource rows = [&model, &tr](Eigen::Index b, Eigen::Index e) {
            return ntf_rows(model, tr.X.middleRows(b, e - b));
        };
        NtfSpace space = decompose(build_gram(rows, n, cfg.gram_block), k);
        for (const auto& w : space.warnings) res.warnings.push_back(w);
        InvariantDirection inv = irm_baseline(tr, space, cfg.alpha, cfg.lr_theta, cfg.theta_steps);
        if (!inv.converged) res.warnings.push_back("irm: descent did not reach tolerance");

        std::vector<Eigen::VectorXd> preds, ys;
        for (const auto& t : te) {
            RowSource trows = [&model, &t](Eigen::Index b, Eigen::Index e) {
                return ntf_rows(model, t.X.middleRows(b, e - b));
            };
            Eigen::MatrixXd cross = build_cross_gram(rows, n, trows, t.n(), cfg.gram_block);
            preds.push_back(project_new(space, cross) * inv.theta);
            ys.push_back(t.Y);
        }
        res.test = metrics(preds, ys, task);
        Eigen::VectorXd train_pred = space.Psi * inv.theta;
        MetricRecord train_m = metrics({train_pred}, {tr.Y}, task);
        res.train_mse = train_m.mean_error;
        res.train_accuracy = train_m.mean_accuracy;
        return res;
    };

    SeedResult out = detail::sweep_rank(cfg, train, tests, seed, pipeline);
    out.seconds = cfg.record_timing
                      ? std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count()
                      : 0.0;
    return out;
}

namespace detail {

inline MethodAggregates aggregate(const std::vector<SeedResult>& seeds) {
    MethodAggregates a;
    const double m = static_cast<double>(seeds.size());
    double acc_sq = 0.0, err_sq = 0.0;
    bool all_std = true;
    double std_sum = 0.0;
    for (const auto& s : seeds) {
        a.test_accuracy_mean += s.test.mean_accuracy / m;
        a.train_accuracy_mean += s.train_accuracy / m;
        a.mean_error_mean += s.test.mean_error / m;
        a.train_mse_mean += s.train_mse / m;
        if (s.test.std_error)
            std_sum += *s.test.std_error / m;
        else
            all_std = false;
    }
    for (const auto& s : seeds) {
        acc_sq += (s.test.mean_accuracy - a.test_accuracy_mean) *
                  (s.test.mean_accuracy - a.test_accuracy_mean);
        err_sq += (s.test.mean_error - a.mean_error_mean) * (s.test.mean_error - a.mean_error_mean);
    }
    a.test_accuracy_std = std::sqrt(acc_sq / m);
    a.mean_error_std = std::sqrt(err_sq / m);
    if (all_std) a.std_error_mean = std_sum;
    return a;
}

// Bounded deterministic parallel map over seeds: results land by index, and
// the first failure is rethrown after everyone joined.
template <typename Fn>
inline void parallel_over_seeds(std::size_t count, Fn&& fn) {
    const std::size_t workers =
        std::max<std::size_t>(1, std::min<std::size_t>(count, std::thread::hardware_concurrency()));
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(count);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= count) return;
                try {
                    fn(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

} // namespace detail

struct TaskData {
    Dataset pooled_train;
    std::vector<Dataset> tests;
};

/// Generates the configured task's environments for one seed and splits the
/// leading train_envs into pooled training data.
inline TaskData generate_task_data(const ExperimentConfig& cfg, std::uint64_t seed) {
    std::vector<Dataset> envs;
    if (cfg.task == "spurious_classification") {
        SpuriousClsConfig g;
        g.block_dim = cfg.block_dim;
        g.sigma_s2 = cfg.sigma_s2;
        g.sigma_v2 = cfg.sigma_v2;
        g.bias_rates = cfg.bias_rates;
        g.env_sizes = cfg.env_sizes;
        g.scramble = cfg.scramble_kind();
        g.seed = seed;
        envs = gen_spurious_classification(g);
    } else if (cfg.task == "selection_bias") {
        SelBiasConfig g;
        g.n_s = cfg.sel_n_s;
        g.dim = cfg.sel_dim;
        g.beta = cfg.sel_beta;
        g.noise_sd = cfg.sel_noise_sd;
        g.r_values = cfg.sel_r;
        g.env_sizes = cfg.env_sizes;
        g.scramble = cfg.scramble_kind();
        g.seed = seed;
        envs = gen_selection_bias(g);
    } else if (cfg.task == "example41") {
        Example41Config g;
        g.dim = cfg.ex41_dim;
        g.noise_cov = cfg.ex41_noise;
        g.betas = cfg.ex41_betas;
        g.env_sizes = cfg.env_sizes;
        g.seed = seed;
        envs = gen_example41(g).envs;
    } else if (cfg.task == "colored_mnist") {
        if (cfg.mnist_images.empty() || cfg.mnist_labels.empty())
            throw ConfigError("colored_mnist: mnist_images and mnist_labels paths required");
        RawMnist raw = load_mnist_idx(cfg.mnist_images, cfg.mnist_labels);
        ColoredMnistConfig g;
        g.flip_e = cfg.mnist_flips;
        g.label_noise = cfg.mnist_label_noise;
        g.n_per_env = cfg.mnist_n_per_env;
        g.down_rows = cfg.mnist_downsample;
        g.down_cols = cfg.mnist_downsample;
        g.seed = seed;
        envs = make_colored_mnist(raw, g);
    } else if (cfg.task == "csv") {
        CsvRegressionSpec spec{cfg.csv_path, cfg.csv_target, cfg.csv_env, cfg.csv_thresholds,
                               cfg.train_envs};
        envs = load_csv_regression(spec);
    } else {
        throw ConfigError("config: unknown task '" + cfg.task + "'");
    }
    if (static_cast<int>(envs.size()) <= cfg.train_envs)
        throw ConfigError("config: need at least one test environment after train_envs");
    TaskData data;
    std::vector<Dataset> train(envs.begin(), envs.begin() + cfg.train_envs);
    data.pooled_train = pool(train);
    data.tests.assign(envs.begin() + cfg.train_envs, envs.end());
    return data;
}

inline SeedResult run_method_seed(const ExperimentConfig& cfg, const std::string& method,
                                  const Dataset& train, const std::vector<Dataset>& tests,
                                  std::uint64_t seed) {
    if (method == "kerhrm") return kerhrm_seed(cfg, train, tests, seed, cfg.iterations);
    if (method == "kerhrm-static") return kerhrm_seed(cfg, train, tests, seed, 1);
    if (method == "erm") return erm_seed(cfg, train, tests, seed);
    if (method == "irm") return irm_seed(cfg, train, tests, seed);
    throw ConfigError("unknown method '" + method + "'");
}

/// Multi-seed run of one method on fixed data.
inline Report run_method(const ExperimentConfig& cfg, const std::string& method,
                         const Dataset& train, const std::vector<Dataset>& tests) {
    const auto t_start = std::chrono::steady_clock::now();
    Report report;
    report.config = cfg.echo();
    report.task = cfg.task_kind();
    MethodResult mr;
    mr.method = method;
    mr.per_seed.resize(cfg.seeds.size());
    detail::parallel_over_seeds(cfg.seeds.size(), [&](std::size_t i) {
        mr.per_seed[i] = run_method_seed(cfg, method, train, tests, cfg.seeds[i]);
    });
    mr.aggregates = detail::aggregate(mr.per_seed);
    report.methods.push_back(std::move(mr));
    report.total_seconds =
        cfg.record_timing
            ? std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count()
            : 0.0;
    return report;
}

inline Report run_kerhrm(const ExperimentConfig& cfg, const Dataset& train,
                         const std::vector<Dataset>& tests) {
    return run_method(cfg, "kerhrm", train, tests);
}

inline Report run_erm(const ExperimentConfig& cfg, const Dataset& train,
                      const std::vector<Dataset>& tests) {
    return run_method(cfg, "erm", train, tests);
}

/// The full experiment: per-seed data generation, every configured method,
/// deterministic reduction in seed order.
inline Report run_experiment(const ExperimentConfig& cfg) {
    const auto t_start = std::chrono::steady_clock::now();
    cfg.validate();
    Report report;
    report.config = cfg.echo();
    report.task = cfg.task_kind();
    for (const auto& m : cfg.methods) {
        MethodResult mr;
        mr.method = m;
        mr.per_seed.resize(cfg.seeds.size());
        report.methods.push_back(std::move(mr));
    }
    std::vector<std::vector<SeedResult>> results(cfg.methods.size());
    for (auto& r : results) r.resize(cfg.seeds.size());
    detail::parallel_over_seeds(cfg.seeds.size(), [&](std::size_t i) {
        TaskData data = generate_task_data(cfg, cfg.seeds[i]);
        for (std::size_t m = 0; m < cfg.methods.size(); ++m)
            results[m][i] =
                run_method_seed(cfg, cfg.methods[m], data.pooled_train, data.tests, cfg.seeds[i]);
    });
    for (std::size_t m = 0; m < cfg.methods.size(); ++m) {
        report.methods[m].per_seed = std::move(results[m]);
        report.methods[m].aggregates = detail::aggregate(report.methods[m].per_seed);
    }
    report.total_seconds =
        cfg.record_timing
            ? std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count()
            : 0.0;
    return report;
}

// ---- report serialization ----

inline nlohmann::json to_json(const Report& report) {
    nlohmann::json j;
    j["schema_version"] = report.schema_version;
    j["task"] = report.task == TaskKind::Classification ? "classification" : "regression";
    j["config"] = report.config;
    j["total_seconds"] = report.total_seconds;
    j["warnings"] = report.warnings;
    nlohmann::json methods = nlohmann::json::array();
    for (const auto& m : report.methods) {
        nlohmann::json jm;
        jm["method"] = m.method;
        nlohmann::json seeds = nlohmann::json::array();
        for (const auto& s : m.per_seed) {
            nlohmann::json js;
            js["seed"] = s.seed;
            js["chosen_k"] = s.chosen_k;
            js["train_mse"] = s.train_mse;
            js["train_accuracy"] = s.train_accuracy;
            js["seconds"] = s.seconds;
            nlohmann::json envs = nlohmann::json::array();
            for (const auto& e : s.test.per_env)
                envs.push_back({{"n", e.n}, {"mse", e.mse}, {"accuracy", e.accuracy}});
            js["test"] = {{"per_env", envs},
                          {"mean_error", s.test.mean_error},
                          {"mean_accuracy", s.test.mean_accuracy}};
            if (s.test.std_error) js["test"]["std_error"] = *s.test.std_error;
            nlohmann::json trace = nlohmann::json::array();
            for (const auto& t : s.trace) {
                nlohmann::json jt;
                jt["iteration"] = t.iteration;
                jt["theta_norm"] = t.theta_norm;
                jt["align_cos"] = t.align_cos;
                jt["clustering_objective"] = t.clustering_objective;
                jt["em_iterations"] = t.em_iterations;
                if (t.kl_diag) jt["kl_diag"] = *t.kl_diag;
                if (t.purity) jt["purity"] = *t.purity;
                jt["orth_residual"] = t.orth_residual;
                jt["train_metric"] = t.train_metric;
                jt["test_metric"] = t.test_metric;
                trace.push_back(jt);
            }
            js["trace"] = trace;
            js["warnings"] = s.warnings;
            seeds.push_back(js);
        }
        jm["per_seed"] = seeds;
        nlohmann::json agg;
        agg["test_accuracy_mean"] = m.aggregates.test_accuracy_mean;
        agg["test_accuracy_std"] = m.aggregates.test_accuracy_std;
        agg["train_accuracy_mean"] = m.aggregates.train_accuracy_mean;
        agg["mean_error_mean"] = m.aggregates.mean_error_mean;
        agg["mean_error_std"] = m.aggregates.mean_error_std;
        agg["train_mse_mean"] = m.aggregates.train_mse_mean;
        if (m.aggregates.std_error_mean) agg["std_error_mean"] = *m.aggregates.std_error_mean;
        jm["aggregates"] = agg;
        methods.push_back(jm);
    }
    j["methods"] = methods;
    return j;
}

/// Writes report.json plus the flat results.csv (one row per seed x test env
/// x method) and trace.csv (per-iteration curves).
inline void emit_report(const Report& report, const std::string& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output directory " + out_dir + ": " + ec.message());

    const auto json_path = out_dir + "/report.json";
    {
        std::ofstream out(json_path);
        if (!out) throw IoError("cannot write " + json_path);
        out << to_json(report).dump(2) << "\n";
        if (!out) throw IoError("write failed for " + json_path);
    }

    const auto results_path = out_dir + "/results.csv";
    {
        std::ofstream out(results_path);
        if (!out) throw IoError("cannot write " + results_path);
        out.precision(17);
        out << "method,seed,env,n,mse,accuracy\n";
        for (const auto& m : report.methods)
            for (const auto& s : m.per_seed)
                for (std::size_t e = 0; e < s.test.per_env.size(); ++e)
                    out << m.method << ',' << s.seed << ',' << e << ',' << s.test.per_env[e].n
                        << ',' << s.test.per_env[e].mse << ',' << s.test.per_env[e].accuracy
                        << '\n';
        if (!out) throw IoError("write failed for " + results_path);
    }

    const auto trace_path = out_dir + "/trace.csv";
    {
        std::ofstream out(trace_path);
        if (!out) throw IoError("cannot write " + trace_path);
        out.precision(17);
        out << "method,seed,iteration,theta_norm,align_cos,clustering_objective,em_iterations,"
               "kl_diag,purity,orth_residual,train_metric,test_metric\n";
        for (const auto& m : report.methods)
            for (const auto& s : m.per_seed)
                for (const auto& t : s.trace) {
                    out << m.method << ',' << s.seed << ',' << t.iteration << ',' << t.theta_norm
                        << ',' << t.align_cos << ',' << t.clustering_objective << ','
                        << t.em_iterations << ',';
                    if (t.kl_diag) out << *t.kl_diag;
                    out << ',';
                    if (t.purity) out << *t.purity;
                    out << ',' << t.orth_residual << ',' << t.train_metric << ',' << t.test_metric
                        << '\n';
                }
        if (!out) throw IoError("write failed for " + trace_path);
    }
}

} // namespace kerhrm
