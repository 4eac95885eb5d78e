#include <catch2/catch_amalgamated.hpp>

#include "kerhrm/clustering.hpp"
#include "kerhrm/metrics.hpp"
#include "oracles.hpp"

using namespace kerhrm;
using Catch::Approx;

namespace {

// Two linearly separable relations with opposite signs on one feature.
struct TwoRelationFixture {
    KernelState state;
    Eigen::VectorXd y;
    Eigen::VectorXi truth;

    explicit TwoRelationFixture(Eigen::Index n_half, std::uint64_t seed, double noise = 0.05) {
        Rng rng(seed);
        const Eigen::Index n = 2 * n_half;
        Eigen::MatrixXd feat = gaussian_matrix(rng, n, 2);
        y.resize(n);
        truth.resize(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            // keep the discriminating feature away from zero so the two
            // relations stay separable
            feat(i, 0) = (feat(i, 0) >= 0 ? 1.0 : -1.0) *
                         (0.5 + std::abs(feat(i, 0)));
            const double sgn = i < n_half ? 1.0 : -1.0;
            truth[i] = i < n_half ? 0 : 1;
            y[i] = sgn * feat(i, 0) + noise * std::normal_distribution<double>(0, 1)(rng);
        }
        NtfSpace space = decompose(build_gram(dense_row_source(feat), n, 16), 2);
        state = initial_kernel_state(space);
    }
};

ClusterModel toy_model(int k, Eigen::Index n, double sigma) {
    ClusterModel m;
    m.K = k;
    m.alpha_coeffs = Eigen::MatrixXd::Zero(k, n);
    m.q = Eigen::VectorXd::Constant(k, 1.0 / k);
    m.sigma = sigma;
    m.ridge = 1e-3;
    return m;
}

} // namespace

TEST_CASE("center_density: Gaussian peak and one-sigma point") {
    ClusterModel m = toy_model(2, 3, 1.0);
    Eigen::VectorXd kvec = Eigen::VectorXd::Zero(3);
    REQUIRE(center_density(m, 0, kvec, 0.0) == Approx(0.398942).epsilon(1e-5));
    REQUIRE(center_density(m, 0, kvec, 1.0) == Approx(0.241971).epsilon(1e-5));
    // zero coefficients predict zero, so y = 0 sits at the peak
    REQUIRE(center_density(m, 1, kvec, 0.0) == Approx(0.398942).epsilon(1e-5));
    m.sigma = -1.0;
    REQUIRE_THROWS_AS(center_density(m, 0, kvec, 0.0), ConfigError);
}

TEST_CASE("em_e_step: symmetry and degenerate mixtures") {
    const Eigen::Index n = 6;
    Eigen::MatrixXd kmat = Eigen::MatrixXd::Identity(n, n);
    Eigen::VectorXd y = Eigen::VectorXd::Ones(n);
    ClusterModel m = toy_model(2, n, 1.0);
    Eigen::MatrixXd r = em_e_step(m, kmat, y);
    for (Eigen::Index i = 0; i < n; ++i) {
        REQUIRE(r(i, 0) == Approx(0.5));
        REQUIRE(r(i, 1) == Approx(0.5));
    }
    m.q << 1.0, 0.0;
    r = em_e_step(m, kmat, y);
    for (Eigen::Index i = 0; i < n; ++i) {
        REQUIRE(r(i, 0) == Approx(1.0));
        REQUIRE(r(i, 1) == Approx(0.0).margin(1e-300));
    }
}

TEST_CASE("em_e_step: log-space result matches direct evaluation") {
    Rng rng(41);
    const Eigen::Index n = 12;
    Eigen::MatrixXd feat = gaussian_matrix(rng, n, 3);
    Eigen::MatrixXd kmat = feat * feat.transpose();
    Eigen::VectorXd y = gaussian_vector(rng, n);
    ClusterModel m = toy_model(3, n, 0.7);
    m.alpha_coeffs = 0.1 * gaussian_matrix(rng, 3, n);
    m.q << 0.5, 0.3, 0.2;
    Eigen::MatrixXd r = em_e_step(m, kmat, y);
    for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::VectorXd direct(3);
        for (int j = 0; j < 3; ++j)
            direct[j] = m.q[j] * center_density(m, j, kmat.col(i), y[i]);
        direct /= direct.sum();
        REQUIRE((r.row(i).transpose() - direct).lpNorm<Eigen::Infinity>() <= 1e-10);
        REQUIRE(r.row(i).sum() == Approx(1.0).margin(1e-12));
    }
}

TEST_CASE("em_m_step: identity kernel with vanishing ridge interpolates") {
    const Eigen::Index n = 8;
    Eigen::MatrixXd kmat = Eigen::MatrixXd::Identity(n, n);
    Rng rng(42);
    Eigen::VectorXd y = gaussian_vector(rng, n);
    Eigen::MatrixXd r = Eigen::MatrixXd::Constant(n, 2, 0.5);
    ClusterModel m = em_m_step(r, kmat, y, 1e-10, 1.0);
    for (int j = 0; j < 2; ++j)
        REQUIRE((kmat * m.alpha_coeffs.row(j).transpose() - y).lpNorm<Eigen::Infinity>() <= 1e-7);
    REQUIRE(m.q[0] == Approx(0.5));
}

TEST_CASE("em_m_step: concentrated responsibilities fit only their cluster") {
    Rng rng(43);
    const Eigen::Index n = 20;
    Eigen::MatrixXd feat = gaussian_matrix(rng, n, 6);
    Eigen::MatrixXd kmat = feat * feat.transpose();
    kmat.diagonal().array() += 1.0; // strictly PD so tiny ridge interpolates
    Eigen::VectorXd y = gaussian_vector(rng, n);
    Eigen::MatrixXd r(n, 2);
    r.col(0).setConstant(1.0 - 1e-12);
    r.col(1).setConstant(1e-12);
    ClusterModel m = em_m_step(r, kmat, y, 1e-9, 1.0);
    REQUIRE((kmat * m.alpha_coeffs.row(0).transpose() - y).lpNorm<Eigen::Infinity>() <= 1e-5);
    // the starved cluster keeps only its (vanishing) prior weight
    REQUIRE(m.q[1] <= 1e-11);
    REQUIRE(m.q[0] == Approx(1.0).margin(1e-11));
}

TEST_CASE("em_m_step: dual coefficients match the dense-solver oracle") {
    Rng rng(44);
    const Eigen::Index n = 20;
    Eigen::MatrixXd feat = gaussian_matrix(rng, n, 5);
    Eigen::MatrixXd kmat = feat * feat.transpose();
    Eigen::VectorXd y = gaussian_vector(rng, n);
    Eigen::MatrixXd r(n, 3);
    for (Eigen::Index i = 0; i < n; ++i) {
        r(i, 0) = 0.2 + 0.6 * ((i * 7) % 10) / 10.0;
        r(i, 1) = 0.7 * (1.0 - r(i, 0));
        r(i, 2) = 1.0 - r(i, 0) - r(i, 1);
    }
    const double ridge = 0.05;
    // low-rank (Woodbury) path vs the dense LU oracle on the same system
    ClusterModel fast = em_m_step(r, kmat, y, ridge, 1.0, &feat);
    for (int j = 0; j < 3; ++j) {
        const double mass = r.col(j).sum();
        Eigen::VectorXd dense = oracles::dense_weighted_ridge(kmat, r.col(j), y, ridge * mass);
        REQUIRE((fast.alpha_coeffs.row(j).transpose() - dense).lpNorm<Eigen::Infinity>() <= 1e-8);
    }
    REQUIRE_THROWS_AS(em_m_step(r, kmat, y, 0.0, 1.0), ConfigError);
}

TEST_CASE("em_m_step: ridge scaling keeps centers duplication-invariant") {
    Rng rng(45);
    const Eigen::Index n = 15;
    Eigen::MatrixXd feat = gaussian_matrix(rng, n, 4);
    Eigen::MatrixXd kmat = feat * feat.transpose();
    Eigen::VectorXd y = gaussian_vector(rng, n);
    Eigen::MatrixXd r(n, 2);
    for (Eigen::Index i = 0; i < n; ++i) {
        r(i, 0) = (i % 3 == 0) ? 0.8 : 0.3;
        r(i, 1) = 1.0 - r(i, 0);
    }
    ClusterModel base = em_m_step(r, kmat, y, 0.02, 1.0);

    Eigen::MatrixXd feat2(2 * n, 4);
    feat2 << feat, feat;
    Eigen::MatrixXd kmat2 = feat2 * feat2.transpose();
    Eigen::VectorXd y2(2 * n);
    y2 << y, y;
    Eigen::MatrixXd r2(2 * n, 2);
    r2 << r, r;
    ClusterModel dup = em_m_step(r2, kmat2, y2, 0.02, 1.0);

    Eigen::VectorXd pred1 = kmat * base.alpha_coeffs.row(0).transpose();
    Eigen::VectorXd pred2 = (kmat2 * dup.alpha_coeffs.row(0).transpose()).head(n);
    REQUIRE((pred1 - pred2).lpNorm<Eigen::Infinity>() <= 1e-9);
}

TEST_CASE("run_clustering: recovers two opposite-sign relations") {
    TwoRelationFixture fx(60, 46);
    ClusteringOptions opts;
    opts.K = 2;
    opts.seed = 9;
    opts.restarts = 3;
    auto [model, part] = run_clustering(fx.state, fx.y, opts);
    model.validate();
    DiagnosticRecord diag = [&] {
        Dataset d;
        d.X = Eigen::MatrixXd::Zero(fx.y.size(), 1);
        d.Y = fx.y;
        d.latent_env = fx.truth;
        return env_diagnostics(part.hard_labels, d);
    }();
    REQUIRE(diag.purity.has_value());
    REQUIRE(*diag.purity >= 0.95);
    // objective trace non-increasing within tolerance
    for (std::size_t i = 1; i < part.objective_trace.size(); ++i)
        REQUIRE(part.objective_trace[i] <= part.objective_trace[i - 1] + 1e-7);
    // responsibilities on the simplex
    for (Eigen::Index i = 0; i < part.R.rows(); ++i)
        REQUIRE(part.R.row(i).sum() == Approx(1.0).margin(1e-10));
}

TEST_CASE("run_clustering: K = 1 and n < K are rejected") {
    TwoRelationFixture fx(10, 47);
    ClusteringOptions opts;
    opts.K = 1;
    REQUIRE_THROWS_AS(run_clustering(fx.state, fx.y, opts), ConfigError);
    opts.K = 50;
    REQUIRE_THROWS_AS(run_clustering(fx.state, fx.y, opts), ConfigError);
}

TEST_CASE("run_clustering: duplicated data reproduces the original centers") {
    TwoRelationFixture fx(25, 48);
    const Eigen::Index n = fx.y.size();
    ClusteringOptions opts;
    opts.K = 2;
    opts.max_iter = 40;
    // fixed explicit start so both runs walk the same EM path
    Eigen::MatrixXd r0(n, 2);
    for (Eigen::Index i = 0; i < n; ++i) {
        r0(i, 0) = 0.5 + 0.2 * std::sin(static_cast<double>(i));
        r0(i, 1) = 1.0 - r0(i, 0);
    }
    opts.init_responsibilities = r0;
    auto [model, part] = run_clustering(fx.state, fx.y, opts);

    KernelState dup_state;
    dup_state.PsiV.resize(2 * n, fx.state.PsiV.cols());
    dup_state.PsiV << fx.state.PsiV, fx.state.PsiV;
    Eigen::VectorXd y2(2 * n);
    y2 << fx.y, fx.y;
    Eigen::MatrixXd r0d(2 * n, 2);
    r0d << r0, r0;
    ClusteringOptions opts2 = opts;
    opts2.init_responsibilities = r0d;
    auto [model2, part2] = run_clustering(dup_state, y2, opts2);

    Eigen::MatrixXd k1 = kernel_matrix(fx.state);
    Eigen::MatrixXd k2 = kernel_matrix(dup_state);
    for (int j = 0; j < 2; ++j) {
        Eigen::VectorXd pred1 = k1 * model.alpha_coeffs.row(j).transpose();
        Eigen::VectorXd pred2 = (k2 * model2.alpha_coeffs.row(j).transpose()).head(n);
        REQUIRE((pred1 - pred2).lpNorm<Eigen::Infinity>() <= 1e-6);
    }
}

TEST_CASE("clustering objective: label permutation leaves it unchanged") {
    TwoRelationFixture fx(20, 49);
    ClusteringOptions opts;
    opts.K = 3;
    opts.seed = 11;
    auto [model, part] = run_clustering(fx.state, fx.y, opts);
    Eigen::MatrixXd kmat = kernel_matrix(fx.state);
    const double before = clustering_objective(model, kmat, fx.y);
    ClusterModel permuted = model;
    std::swap(permuted.q[0], permuted.q[2]);
    permuted.alpha_coeffs.row(0).swap(permuted.alpha_coeffs.row(2));
    REQUIRE(clustering_objective(permuted, kmat, fx.y) == Approx(before).epsilon(1e-12));
}

TEST_CASE("assign_environments: argmax, tie rule, and sampling frequencies") {
    EnvPartition part;
    part.R.resize(3, 2);
    part.R << 0.9, 0.1, 0.5, 0.5, 0.2, 0.8;
    part.hard_labels = hard_assign_argmax(part.R);
    Eigen::VectorXi labels = assign_environments(part, AssignMode::Argmax);
    REQUIRE(labels[0] == 0);
    REQUIRE(labels[1] == 0); // tie goes to the lowest id
    REQUIRE(labels[2] == 1);

    EnvPartition mc;
    mc.R = Eigen::MatrixXd::Zero(100000, 2);
    mc.R.col(0).setConstant(0.3);
    mc.R.col(1).setConstant(0.7);
    Eigen::VectorXi s1 = assign_environments(mc, AssignMode::Sample, 123);
    Eigen::VectorXi s2 = assign_environments(mc, AssignMode::Sample, 123);
    REQUIRE((s1 - s2).lpNorm<Eigen::Infinity>() == 0); // reproducible per seed
    const double frac0 =
        static_cast<double>((s1.array() == 0).count()) / static_cast<double>(s1.size());
    REQUIRE(frac0 == Approx(0.3).margin(0.01));
}
