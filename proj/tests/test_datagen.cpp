#include <catch2/catch_amalgamated.hpp>

#include "kerhrm/datagen.hpp"

using namespace kerhrm;
using Catch::Approx;

namespace {

SpuriousClsConfig cls_config(std::vector<double> rates, std::vector<Eigen::Index> sizes,
                             Scramble scramble, std::uint64_t seed) {
    SpuriousClsConfig cfg;
    cfg.bias_rates = std::move(rates);
    cfg.env_sizes = std::move(sizes);
    cfg.scramble = scramble;
    cfg.seed = seed;
    return cfg;
}

} // namespace

TEST_CASE("spurious classification: exact agreement counts per bias rate") {
    auto envs = gen_spurious_classification(cls_config({0.9}, {1000}, Scramble::Identity, 1));
    const Dataset& d = envs[0];
    Eigen::Index agree = 0;
    for (Eigen::Index i = 0; i < d.n(); ++i)
        if ((*d.spurious_attr)[i] == static_cast<int>(d.Y[i])) ++agree;
    REQUIRE(agree == 900);
}

TEST_CASE("spurious classification: no correlation at r = 0.5") {
    auto envs = gen_spurious_classification(cls_config({0.5}, {4000}, Scramble::Identity, 2));
    const Dataset& d = envs[0];
    double corr = 0.0;
    for (Eigen::Index i = 0; i < d.n(); ++i) corr += d.Y[i] * (*d.spurious_attr)[i];
    corr /= static_cast<double>(d.n());
    REQUIRE(std::abs(corr) <= 3.0 / std::sqrt(4000.0));
}

TEST_CASE("spurious classification: per-class mean of the stable block") {
    SpuriousClsConfig cfg = cls_config({0.8}, {4000}, Scramble::Identity, 3);
    auto envs = gen_spurious_classification(cfg);
    const Dataset& d = envs[0];
    // with identity scramble the first block is S, with mean Y per class
    for (double cls : {1.0, -1.0}) {
        Eigen::VectorXd mean = Eigen::VectorXd::Zero(cfg.block_dim);
        Eigen::Index count = 0;
        for (Eigen::Index i = 0; i < d.n(); ++i)
            if (d.Y[i] == cls) {
                mean += d.X.row(i).head(cfg.block_dim).transpose();
                ++count;
            }
        mean /= static_cast<double>(count);
        const double bound = 3.0 * std::sqrt(cfg.sigma_s2) / std::sqrt(static_cast<double>(count));
        for (Eigen::Index j = 0; j < cfg.block_dim; ++j)
            REQUIRE(std::abs(mean[j] - cls) <= bound);
    }
}

TEST_CASE("spurious classification: scramble is orthogonal and shared") {
    SpuriousClsConfig cfg = cls_config({0.9, 0.1}, {50, 50}, Scramble::RandomOrthogonal, 4);
    auto envs = gen_spurious_classification(cfg);
    REQUIRE(envs.size() == 2);
    REQUIRE(envs[0].dim() == 2 * cfg.block_dim);
    // determinism per seed
    auto envs2 = gen_spurious_classification(cfg);
    REQUIRE((envs[0].X - envs2[0].X).lpNorm<Eigen::Infinity>() == 0.0);
    REQUIRE((envs[1].X - envs2[1].X).lpNorm<Eigen::Infinity>() == 0.0);

    REQUIRE_THROWS_AS(gen_spurious_classification(cls_config({1.5}, {10}, Scramble::Identity, 0)),
                      ConfigError);
}

TEST_CASE("random orthogonal scramble satisfies H^T H = I") {
    Rng rng(5);
    Eigen::MatrixXd h = random_orthogonal(rng, 10);
    REQUIRE((h.transpose() * h - Eigen::MatrixXd::Identity(10, 10)).lpNorm<Eigen::Infinity>() <=
            1e-10);
}

TEST_CASE("selection probability: exact values from the acceptance rule") {
    REQUIRE(selection_prob(2.0, 1.0, 1.0) == Approx(1.0));          // y - sign(r) v_b = 0
    REQUIRE(selection_prob(2.0, 1.0, 0.0) == Approx(0.03125));      // 2^-5
    REQUIRE(selection_prob(-2.0, 1.0, -1.0) == Approx(1.0));        // sign(r) = -1
    REQUIRE(selection_prob(-2.0, 0.5, 0.5) == Approx(std::pow(2.0, -5.0)));
}

TEST_CASE("selection bias: kept samples track v_b more closely than the raw pool") {
    SelBiasConfig cfg;
    cfg.r_values = {1.9};
    cfg.env_sizes = {1500};
    cfg.seed = 6;
    auto envs = gen_selection_bias(cfg);
    const Dataset& d = envs[0];
    // identity scramble: v_b is the first variant coordinate
    double kept_gap = 0.0;
    for (Eigen::Index i = 0; i < d.n(); ++i)
        kept_gap += std::abs(d.Y[i] - d.X(i, cfg.n_s));
    kept_gap /= static_cast<double>(d.n());

    // unselected pool with the same mechanics
    Rng rng(99);
    std::normal_distribution<double> gauss(0.0, 1.0);
    double raw_gap = 0.0;
    const int trials = 4000;
    Eigen::VectorXd theta = cfg.effective_theta_s();
    for (int t = 0; t < trials; ++t) {
        Eigen::VectorXd z(cfg.n_s + 1), s(cfg.n_s);
        for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = gauss(rng);
        for (Eigen::Index i = 0; i < cfg.n_s; ++i) s[i] = 0.8 * z[i] + 0.2 * z[i + 1];
        const double vb = gauss(rng);
        const double y = theta.dot(s) + cfg.beta * s[0] * s[1] * s[2] + cfg.noise_sd * gauss(rng);
        raw_gap += std::abs(y - vb);
    }
    raw_gap /= trials;
    REQUIRE(kept_gap < raw_gap);
}

TEST_CASE("selection bias: config validation and determinism") {
    SelBiasConfig cfg;
    cfg.r_values = {1.5};
    cfg.env_sizes = {100};
    cfg.seed = 7;
    auto a = gen_selection_bias(cfg);
    auto b = gen_selection_bias(cfg);
    REQUIRE((a[0].X - b[0].X).lpNorm<Eigen::Infinity>() == 0.0);
    REQUIRE(a[0].n() == 100);

    SelBiasConfig bad = cfg;
    bad.r_values = {0.5};
    REQUIRE_THROWS_AS(gen_selection_bias(bad), ConfigError);
    bad = cfg;
    bad.dim = 5; // needs room for one variant coordinate
    REQUIRE_THROWS_AS(gen_selection_bias(bad), ConfigError);
}

TEST_CASE("example41: exact data with zero noise and zero beta") {
    Example41Config cfg;
    cfg.dim = 6;
    cfg.noise_cov = 0.0;
    cfg.betas = {0.0};
    cfg.env_sizes = {40};
    cfg.seed = 8;
    Example41Data data = gen_example41(cfg);
    REQUIRE(std::abs(data.psi_s.dot(data.psi_v)) <= 1e-12);
    REQUIRE(data.psi_s.norm() == Approx(1.0));
    const Dataset& d = data.envs[0];
    for (Eigen::Index i = 0; i < d.n(); ++i)
        REQUIRE((d.X.row(i).transpose() - d.Y[i] * data.psi_s).lpNorm<Eigen::Infinity>() <= 1e-14);
}

TEST_CASE("example41: pooled variant correlation cancels across opposite betas") {
    Example41Config cfg;
    cfg.dim = 8;
    cfg.noise_cov = 0.25;
    cfg.betas = {2.0, -2.0};
    cfg.env_sizes = {3000, 3000};
    cfg.seed = 9;
    Example41Data data = gen_example41(cfg);
    auto corr = [&](const Dataset& d) {
        double acc = 0.0;
        for (Eigen::Index i = 0; i < d.n(); ++i) acc += d.X.row(i).dot(data.psi_v) * d.Y[i];
        return acc / static_cast<double>(d.n());
    };
    const double c0 = corr(data.envs[0]);
    const double c1 = corr(data.envs[1]);
    REQUIRE(c0 >= 1.5); // per-env correlation near +2 and -2
    REQUIRE(c1 <= -1.5);
    REQUIRE(std::abs(c0 + c1) <= 0.2); // pooled correlation near zero
}
