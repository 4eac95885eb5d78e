// Command-line front end: `run` executes an experiment described by a flat
// key=value config file, `gen` dumps a generated dataset to CSV, `check`
// runs a quick numerical self-test battery.

#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "kerhrm/harness.hpp"

namespace {

using namespace kerhrm;

ExperimentConfig load_config(const std::string& path) {
    KvConfig kv = KvConfig::parse_file(path);
    return ExperimentConfig::from_kv(kv);
}

void apply_overrides(ExperimentConfig& cfg, long long seed, const std::string& out,
                     const std::string& method, bool quiet) {
    if (seed >= 0) cfg.seeds = {static_cast<std::uint64_t>(seed)};
    if (!out.empty()) cfg.out_dir = out;
    if (!method.empty()) cfg.methods = {method};
    if (quiet) cfg.quiet = true;
    cfg.validate();
}

int cmd_run(const std::string& config_path, long long seed, const std::string& out,
            const std::string& method, bool quiet) {
    ExperimentConfig cfg = load_config(config_path);
    apply_overrides(cfg, seed, out, method, quiet);
    Report report = run_experiment(cfg);
    emit_report(report, cfg.out_dir);
    if (!cfg.quiet) {
        for (const auto& m : report.methods) {
            std::printf("%-14s", m.method.c_str());
            if (report.task == TaskKind::Classification)
                std::printf(" train_acc %.3f  test_acc %.3f (+/- %.3f over seeds)\n",
                            m.aggregates.train_accuracy_mean, m.aggregates.test_accuracy_mean,
                            m.aggregates.test_accuracy_std);
            else {
                std::printf(" train_mse %.3f  mean_error %.3f", m.aggregates.train_mse_mean,
                            m.aggregates.mean_error_mean);
                if (m.aggregates.std_error_mean)
                    std::printf("  std_error %.3f", *m.aggregates.std_error_mean);
                std::printf("\n");
            }
        }
        std::printf("report written to %s\n", cfg.out_dir.c_str());
    }
    return 0;
}

int cmd_gen(const std::string& config_path, long long seed, const std::string& out, bool quiet) {
    ExperimentConfig cfg = load_config(config_path);
    if (seed >= 0) cfg.seeds = {static_cast<std::uint64_t>(seed)};
    std::vector<Dataset> envs;
    const std::uint64_t s = cfg.seeds.front();
    if (cfg.task == "spurious_classification") {
        SpuriousClsConfig g;
        g.block_dim = cfg.block_dim;
        g.sigma_s2 = cfg.sigma_s2;
        g.sigma_v2 = cfg.sigma_v2;
        g.bias_rates = cfg.bias_rates;
        g.env_sizes = cfg.env_sizes;
        g.scramble = cfg.scramble_kind();
        g.seed = s;
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
        g.seed = s;
        envs = gen_selection_bias(g);
    } else if (cfg.task == "example41") {
        Example41Config g;
        g.dim = cfg.ex41_dim;
        g.noise_cov = cfg.ex41_noise;
        g.betas = cfg.ex41_betas;
        g.env_sizes = cfg.env_sizes;
        g.seed = s;
        envs = gen_example41(g).envs;
    } else if (cfg.task == "colored_mnist") {
        RawMnist raw = load_mnist_idx(cfg.mnist_images, cfg.mnist_labels);
        ColoredMnistConfig g;
        g.flip_e = cfg.mnist_flips;
        g.label_noise = cfg.mnist_label_noise;
        g.n_per_env = cfg.mnist_n_per_env;
        g.down_rows = cfg.mnist_downsample;
        g.down_cols = cfg.mnist_downsample;
        g.seed = s;
        envs = make_colored_mnist(raw, g);
    } else {
        throw ConfigError("gen: task '" + cfg.task + "' has no generator");
    }
    const std::string path = out.empty() ? "dataset.csv" : out;
    write_dataset_csv(path, envs);
    if (!quiet && !cfg.quiet) {
        Eigen::Index total = 0;
        for (const auto& e : envs) total += e.n();
        std::printf("wrote %lld samples across %zu environments to %s\n",
                    static_cast<long long>(total), envs.size(), path.c_str());
    }
    return 0;
}

bool check_line(const char* name, bool ok, bool quiet) {
    if (!quiet) std::printf("[%s] %s\n", ok ? "PASS" : "FAIL", name);
    return ok;
}

// Fast invariant battery over the numerical core; exits nonzero on failure.
int cmd_check(bool quiet) {
    bool all = true;
    Rng rng(7);

    { // tangent rows against central finite differences (smooth activation)
        MlpConfig mc{3, 5, Activation::Tanh, 11};
        MlpState m = MlpState::init(mc);
        Eigen::MatrixXd x = gaussian_matrix(rng, 4, 3);
        Eigen::MatrixXd rows = ntf_rows(m, x);
        const double h = 1e-5;
        double worst = 0.0;
        Eigen::VectorXd w0 = m.w0();
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            Eigen::VectorXd fd(m.param_count());
            for (Eigen::Index p = 0; p < m.param_count(); ++p) {
                MlpState plus = m, minus = m;
                Eigen::VectorXd wp = w0, wm = w0;
                wp[p] += h;
                wm[p] -= h;
                plus.unflatten(wp);
                minus.unflatten(wm);
                fd[p] = (forward(plus, x.row(r))[0] - forward(minus, x.row(r))[0]) / (2 * h);
            }
            worst = std::max(worst, (fd - rows.row(r).transpose()).norm() / fd.norm());
        }
        all &= check_line("tangent features match finite differences", worst < 1e-6, quiet);
    }

    { // gram eigensolve against a dense SVD
        Eigen::MatrixXd feat = gaussian_matrix(rng, 18, 40);
        NtfSpace space = decompose(build_gram(dense_row_source(feat), 18, 5), 18);
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(feat);
        double worst = 0.0;
        for (Eigen::Index j = 0; j < space.k; ++j)
            worst = std::max(worst, std::abs(space.S[j] - svd.singularValues()[j]));
        all &= check_line("gram spectral factors match dense SVD", worst < 1e-8, quiet);
    }

    { // orthogonality after a kernel update
        Eigen::MatrixXd feat = gaussian_matrix(rng, 30, 12);
        NtfSpace space = decompose(build_gram(dense_row_source(feat), 30, 7), 8);
        KernelState st = initial_kernel_state(space);
        Eigen::VectorXd theta = gaussian_vector(rng, space.k);
        st = orthogonal_update(space, st, theta, UpdateMode::Fresh);
        all &= check_line("kernel update orthogonal to the removed direction",
                          max_normalized_alignment(st.PsiV, theta) <= 1e-8, quiet);
    }

    { // EM objective is non-increasing on a two-relation mixture
        Eigen::MatrixXd feat(60, 2);
        Eigen::VectorXd y(60);
        for (int i = 0; i < 60; ++i) {
            feat(i, 0) = std::normal_distribution<double>(0, 1)(rng);
            feat(i, 1) = std::normal_distribution<double>(0, 1)(rng);
            const double sgn = i < 30 ? 1.0 : -1.0;
            y[i] = sgn * feat(i, 0) + 0.05 * std::normal_distribution<double>(0, 1)(rng);
        }
        NtfSpace space = decompose(build_gram(dense_row_source(feat), 60, 16), 2);
        ClusteringOptions opts;
        opts.K = 2;
        opts.seed = 3;
        auto [model, part] = run_clustering(initial_kernel_state(space), y, opts);
        bool mono = true;
        for (std::size_t i = 1; i < part.objective_trace.size(); ++i)
            mono &= part.objective_trace[i] <= part.objective_trace[i - 1] + 1e-7;
        all &= check_line("EM objective non-increasing", mono, quiet);
    }

    { // flatten round-trip and reduced-coordinate inverse
        MlpConfig mc{4, 6, Activation::Relu, 5};
        MlpState m = MlpState::init(mc);
        MlpState copy = m;
        copy.unflatten(m.flatten());
        bool ok = (copy.flatten() - m.flatten()).lpNorm<Eigen::Infinity>() == 0.0;
        Eigen::MatrixXd feat = gaussian_matrix(rng, 12, 9);
        NtfSpace space = decompose(build_gram(dense_row_source(feat), 12, 4), 5);
        Eigen::VectorXd theta = gaussian_vector(rng, space.k);
        Eigen::VectorXd back = reduced_coords(space, space.Psi * theta);
        ok &= (back - theta).lpNorm<Eigen::Infinity>() < 1e-9;
        all &= check_line("flatten round-trip and reduced-coordinate inverse", ok, quiet);
    }

    if (!quiet) std::printf(all ? "all checks passed\n" : "CHECK FAILURES\n");
    return all ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Kernelized heterogeneous risk minimization benchmark harness"};
    app.require_subcommand(1);

    std::string config_path, out, method;
    long long seed = -1;
    bool quiet = false;

    auto* run = app.add_subcommand("run", "run an experiment from a config file");
    run->add_option("--config", config_path, "path to key=value config")->required();
    run->add_option("--seed", seed, "override the config's seed list with one seed");
    run->add_option("--out", out, "output directory override");
    run->add_option("--method", method, "restrict to one method")
        ->check(CLI::IsMember({"kerhrm", "kerhrm-static", "erm", "irm"}));
    run->add_flag("--quiet", quiet, "suppress console summary");

    auto* gen = app.add_subcommand("gen", "emit a generated dataset as CSV");
    gen->add_option("--config", config_path, "path to key=value config")->required();
    gen->add_option("--seed", seed, "override the config's seed list with one seed");
    gen->add_option("--out", out, "output CSV path (default dataset.csv)");
    gen->add_flag("--quiet", quiet, "suppress console summary");

    auto* check = app.add_subcommand("check", "run the numerical invariant battery");
    check->add_flag("--quiet", quiet, "suppress per-check lines");

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand(run)) return cmd_run(config_path, seed, out, method, quiet);
        if (app.got_subcommand(gen)) return cmd_gen(config_path, seed, out, quiet);
        return cmd_check(quiet);
    } catch (const kerhrm::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
