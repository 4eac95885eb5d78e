#include <catch2/catch_amalgamated.hpp>

#include "kerhrm/datagen.hpp"
#include "kerhrm/invariant.hpp"
#include "oracles.hpp"

using namespace kerhrm;
using Catch::Approx;

namespace {

std::vector<Eigen::Index> all_rows(Eigen::Index n) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    return idx;
}

NtfSpace space_from_features(const Eigen::MatrixXd& feat, Eigen::Index k) {
    return decompose(build_gram(dense_row_source(feat), feat.rows(), 8), k);
}

} // namespace

TEST_CASE("env_loss_and_grad: zero everything") {
    Eigen::MatrixXd psi = Eigen::MatrixXd::Random(4, 3);
    auto [loss, grad] = env_loss_and_grad(Eigen::VectorXd::Zero(3), psi,
                                          Eigen::VectorXd::Zero(4), all_rows(4));
    REQUIRE(loss == 0.0);
    REQUIRE(grad.lpNorm<Eigen::Infinity>() == 0.0);
}

TEST_CASE("env_loss_and_grad: single-point hand computation") {
    Eigen::MatrixXd psi(1, 2);
    psi << 1, 0;
    Eigen::VectorXd y(1);
    y << 1;
    auto [loss, grad] = env_loss_and_grad(Eigen::VectorXd::Zero(2), psi, y, {0});
    REQUIRE(loss == Approx(1.0));
    REQUIRE(grad[0] == Approx(-2.0));
    REQUIRE(grad[1] == Approx(0.0));
    REQUIRE_THROWS_AS(env_loss_and_grad(Eigen::VectorXd::Zero(2), psi, y, {}), DegenerateError);
}

TEST_CASE("env_loss_and_grad: gradient matches finite differences") {
    Rng rng(31);
    double worst = 0.0;
    for (int rep = 0; rep < 100; ++rep) {
        Eigen::MatrixXd psi = gaussian_matrix(rng, 12, 4);
        Eigen::VectorXd y = gaussian_vector(rng, 12);
        Eigen::VectorXd theta = gaussian_vector(rng, 4);
        std::vector<Eigen::Index> idx = {0, 2, 3, 5, 8, 11};
        auto [loss, grad] = env_loss_and_grad(theta, psi, y, idx);
        auto f = [&](const Eigen::VectorXd& t) {
            return env_loss_and_grad(t, psi, y, idx).first;
        };
        Eigen::VectorXd fd = oracles::finite_diff_gradient(f, theta, 1e-6);
        worst = std::max(worst, (fd - grad).norm() / std::max(1e-12, fd.norm()));
    }
    REQUIRE(worst <= 1e-6);
}

TEST_CASE("gradient_variance: identical and hand-computed cases") {
    Eigen::VectorXd g1(2), g2(2);
    g1 << 1, 0;
    g2 << 3, 0;
    REQUIRE(gradient_variance({g1, g1, g1}) == Approx(0.0));
    REQUIRE(gradient_variance({g1, g2}) == Approx(1.0)); // mean [2,0], (1+1)/2
    REQUIRE_THROWS_AS(gradient_variance({g1}), DegenerateError);
}

TEST_CASE("variance penalty: analytic theta-gradient matches finite differences") {
    Rng rng(32);
    double worst = 0.0;
    for (int rep = 0; rep < 100; ++rep) {
        Eigen::MatrixXd psi = gaussian_matrix(rng, 18, 5);
        Eigen::VectorXd y = gaussian_vector(rng, 18);
        std::vector<std::vector<Eigen::Index>> envs = {{0, 1, 2, 3, 4, 5},
                                                       {6, 7, 8, 9, 10, 11},
                                                       {12, 13, 14, 15, 16, 17}};
        Eigen::VectorXd theta = gaussian_vector(rng, 5);
        const double alpha = 2.0;
        // analytic gradient of the full objective via the affine form
        auto affines = detail::env_affines(psi, y, envs);
        detail::ObjectiveEval ev = detail::eval_objective(affines, alpha, theta);
        auto f = [&](const Eigen::VectorXd& t) {
            double total = 0.0;
            std::vector<Eigen::VectorXd> grads;
            for (const auto& idx : envs) {
                auto [l, g] = env_loss_and_grad(t, psi, y, idx);
                total += l;
                grads.push_back(g);
            }
            return total + alpha * gradient_variance(grads);
        };
        REQUIRE(f(theta) == Approx(ev.objective).epsilon(1e-10));
        Eigen::VectorXd fd = oracles::finite_diff_gradient(f, theta, 1e-6);
        worst = std::max(worst, (fd - ev.grad).norm() / std::max(1e-12, fd.norm()));
    }
    REQUIRE(worst <= 1e-6);
}

TEST_CASE("fit_theta_inv: alpha zero approaches the least-squares solution") {
    Rng rng(33);
    Eigen::MatrixXd feat = gaussian_matrix(rng, 40, 12);
    NtfSpace space = space_from_features(feat, 6);
    Eigen::VectorXd truth = gaussian_vector(rng, space.k);
    Eigen::VectorXd y = space.Psi * truth + 0.05 * gaussian_vector(rng, 40);
    InvariantDirection inv =
        fit_theta_inv(space, y, {all_rows(40)}, 0.0, 0.0, 20000);
    Eigen::VectorXd ls = oracles::least_squares(space.Psi, y);
    const double got = (space.Psi * inv.theta - y).squaredNorm() / 40.0;
    const double best = (space.Psi * ls - y).squaredNorm() / 40.0;
    REQUIRE(got <= best + 1e-3);
    REQUIRE(inv.per_env_losses.size() == 1);
    REQUIRE(inv.penalty_value == 0.0);
}

TEST_CASE("fit_theta_inv: two identical environments match the unpenalized fit") {
    Rng rng(34);
    Eigen::MatrixXd half = gaussian_matrix(rng, 15, 10);
    Eigen::MatrixXd feat(30, 10);
    feat << half, half;
    Eigen::VectorXd yh = gaussian_vector(rng, 15);
    Eigen::VectorXd y(30);
    y << yh, yh;
    NtfSpace space = space_from_features(feat, 5);
    std::vector<Eigen::Index> e1 = all_rows(15);
    std::vector<Eigen::Index> e2;
    for (Eigen::Index i = 15; i < 30; ++i) e2.push_back(i);
    InvariantDirection with_pen = fit_theta_inv(space, y, {e1, e2}, 50.0, 0.0, 8000);
    InvariantDirection no_pen = fit_theta_inv(space, y, {e1, e2}, 0.0, 0.0, 8000);
    REQUIRE((with_pen.theta - no_pen.theta).lpNorm<Eigen::Infinity>() <= 1e-8);
    REQUIRE(with_pen.penalty_value <= 1e-16);
}

TEST_CASE("fit_theta_inv: objective is non-increasing and errors are typed") {
    Rng rng(35);
    Eigen::MatrixXd feat = gaussian_matrix(rng, 20, 8);
    NtfSpace space = space_from_features(feat, 4);
    Eigen::VectorXd y = gaussian_vector(rng, 20);
    REQUIRE_THROWS_AS(fit_theta_inv(space, y, {all_rows(20)}, 1.0, 0.0, 100), DegenerateError);
    REQUIRE_THROWS_AS(fit_theta_inv(space, y, {all_rows(20)}, -1.0, 0.0, 100), ConfigError);
}

TEST_CASE("fit_theta_inv: recovers the invariant direction on two-direction data") {
    // Environments with opposite variant coefficients; identity feature map.
    Example41Config cfg;
    cfg.dim = 10;
    cfg.noise_cov = 0.5;
    cfg.betas = {2.0, -2.0};
    cfg.env_sizes = {1000, 1000};
    cfg.seed = 5;
    Example41Data data = gen_example41(cfg);
    Dataset pooled = pool(data.envs);
    NtfSpace space = space_from_features(pooled.X, cfg.dim);
    auto sets = env_index_sets(*pooled.latent_env);
    InvariantDirection inv = fit_theta_inv(space, pooled.Y, sets, 100.0, 0.0, 20000);
    // map reduced coordinates back to the input basis: dir = X^T U S^-1 theta
    Eigen::VectorXd dir = pooled.X.transpose() *
                          (space.U * (space.S.cwiseInverse().asDiagonal() * inv.theta));
    const double cosv = dir.dot(data.psi_s) / (dir.norm() * data.psi_s.norm());
    REQUIRE(cosv >= 0.95);
}

TEST_CASE("irm_baseline: equals fit_theta_inv on the same partition") {
    Rng rng(36);
    Eigen::MatrixXd feat = gaussian_matrix(rng, 24, 9);
    Eigen::VectorXd y = gaussian_vector(rng, 24);
    NtfSpace space = space_from_features(feat, 5);
    Dataset data;
    data.X = feat;
    data.Y = y;
    Eigen::VectorXi env(24);
    for (Eigen::Index i = 0; i < 24; ++i) env[i] = i < 12 ? 0 : 1;
    data.latent_env = env;
    InvariantDirection a = irm_baseline(data, space, 3.0, 0.0, 5000);
    InvariantDirection b = fit_theta_inv(space, y, env_index_sets(env), 3.0, 0.0, 5000);
    REQUIRE((a.theta - b.theta).lpNorm<Eigen::Infinity>() == 0.0);

    Dataset no_env = data;
    no_env.latent_env.reset();
    REQUIRE_THROWS_AS(irm_baseline(no_env, space, 3.0, 0.0, 100), ConfigError);
    Dataset one_env = data;
    one_env.latent_env = Eigen::VectorXi::Zero(24);
    REQUIRE_THROWS_AS(irm_baseline(one_env, space, 3.0, 0.0, 100), DegenerateError);
}
