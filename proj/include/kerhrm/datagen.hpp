#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kerhrm/dataset.hpp"
#include "kerhrm/errors.hpp"
#include "kerhrm/random.hpp"

namespace kerhrm {

enum class Scramble { Identity, RandomOrthogonal };

namespace detail {

inline Eigen::MatrixXd make_scramble(Rng& rng, Eigen::Index dim, Scramble mode) {
    if (mode == Scramble::Identity) return Eigen::MatrixXd::Identity(dim, dim);
    return random_orthogonal(rng, dim);
}

inline double draw_sign(Rng& rng) {
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    return uni(rng) < 0.5 ? -1.0 : 1.0;
}

} // namespace detail

/// Binary classification with a spurious attribute A. Per environment with
/// bias rate r, exactly round(n*r) points have A = Y and the rest A = -Y.
/// Features are X = H [S, V] with S|Y ~ N(Y*1, sigma_s^2 I) and
/// V|A ~ N(A*1, sigma_v^2 I); the scramble H is shared across environments.
struct SpuriousClsConfig {
    Eigen::Index block_dim = 5; // d; X lives in R^{2d}
    double sigma_s2 = 3.0;
    double sigma_v2 = 0.3;
    std::vector<double> bias_rates;
    std::vector<Eigen::Index> env_sizes;
    Scramble scramble = Scramble::Identity;
    std::uint64_t seed = 0;

    void validate() const {
        if (block_dim < 1) throw ConfigError("spurious: block_dim must be >= 1");
        if (!(sigma_s2 > 0.0) || !(sigma_v2 > 0.0))
            throw ConfigError("spurious: variances must be > 0");
        if (bias_rates.empty() || bias_rates.size() != env_sizes.size())
            throw ConfigError("spurious: bias_rates and env_sizes must match and be non-empty");
        for (double r : bias_rates)
            if (!(r > 0.0) || r > 1.0) throw ConfigError("spurious: bias rate must be in (0, 1]");
        for (auto n : env_sizes)
            if (n < 1) throw ConfigError("spurious: env sizes must be >= 1");
    }
};

inline std::vector<Dataset> gen_spurious_classification(const SpuriousClsConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    const Eigen::Index d = cfg.block_dim;
    const Eigen::MatrixXd h = detail::make_scramble(rng, 2 * d, cfg.scramble);
    const double ss = std::sqrt(cfg.sigma_s2), sv = std::sqrt(cfg.sigma_v2);
    std::vector<Dataset> out;
    for (std::size_t e = 0; e < cfg.env_sizes.size(); ++e) {
        const Eigen::Index n = cfg.env_sizes[e];
        const auto agree = static_cast<Eigen::Index>(std::llround(cfg.bias_rates[e] * n));
        Eigen::VectorXd y(n);
        for (Eigen::Index i = 0; i < n; ++i) y[i] = detail::draw_sign(rng);
        std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), Eigen::Index{0});
        std::shuffle(order.begin(), order.end(), rng);
        Eigen::VectorXi a(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const Eigen::Index at = order[static_cast<std::size_t>(i)];
            a[at] = static_cast<int>(i < agree ? y[at] : -y[at]);
        }
        Eigen::MatrixXd sv_block(n, 2 * d);
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index j = 0; j < d; ++j)
                sv_block(i, j) = y[i] + ss * std::normal_distribution<double>(0, 1)(rng);
            for (Eigen::Index j = 0; j < d; ++j)
                sv_block(i, d + j) = a[i] + sv * std::normal_distribution<double>(0, 1)(rng);
        }
        Dataset ds;
        ds.X = sv_block * h.transpose(); // row x_i = H [s_i, v_i]
        ds.Y = y;
        ds.latent_env = Eigen::VectorXi::Constant(n, static_cast<int>(e));
        ds.spurious_attr = a;
        ds.validate();
        out.push_back(std::move(ds));
    }
    return out;
}

/// Regression with selection bias. Data are generated from chained latents,
/// Y picks up a cubic misspecification term, and a sample is kept with
/// probability |r|^(-5 |y - sign(r) * v_b|) where v_b is the first variant
/// coordinate.
struct SelBiasConfig {
    Eigen::Index n_s = 5;
    Eigen::Index dim = 10; // n_v = dim - n_s variant coordinates
    double beta = 5.0;
    Eigen::VectorXd theta_s; // empty: the default alternating pattern
    double noise_sd = std::sqrt(0.3);
    std::vector<double> r_values;
    std::vector<Eigen::Index> env_sizes;
    Scramble scramble = Scramble::Identity;
    std::uint64_t seed = 0;

    Eigen::VectorXd effective_theta_s() const {
        if (theta_s.size() != 0) return theta_s;
        // 0.5, -1, 1, -0.5, 1, -1, ... repeating with period 6
        const double pattern[6] = {0.5, -1.0, 1.0, -0.5, 1.0, -1.0};
        Eigen::VectorXd t(n_s);
        for (Eigen::Index i = 0; i < n_s; ++i) t[i] = pattern[i % 6];
        return t;
    }

    void validate() const {
        if (dim < n_s + 1) throw ConfigError("selection: need dim >= n_s + 1");
        if (n_s < 3) throw ConfigError("selection: need n_s >= 3 for the cubic term");
        if (r_values.empty() || r_values.size() != env_sizes.size())
            throw ConfigError("selection: r_values and env_sizes must match and be non-empty");
        for (double r : r_values)
            if (!(std::abs(r) > 1.0)) throw ConfigError("selection: need |r| > 1");
        if (theta_s.size() != 0 && theta_s.size() != n_s)
            throw ConfigError("selection: theta_s length != n_s");
        if (!(noise_sd >= 0.0)) throw ConfigError("selection: noise_sd must be >= 0");
    }
};

inline double selection_prob(double r, double y, double v_b) {
    const double sgn = r >= 0.0 ? 1.0 : -1.0;
    return std::pow(std::abs(r), -5.0 * std::abs(y - sgn * v_b));
}

inline std::vector<Dataset> gen_selection_bias(const SelBiasConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    const Eigen::Index nv = cfg.dim - cfg.n_s;
    const Eigen::MatrixXd h = detail::make_scramble(rng, cfg.dim, cfg.scramble);
    const Eigen::VectorXd theta = cfg.effective_theta_s();
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::vector<Dataset> out;
    for (std::size_t e = 0; e < cfg.env_sizes.size(); ++e) {
        const Eigen::Index n = cfg.env_sizes[e];
        const double r = cfg.r_values[e];
        Eigen::MatrixXd feats(n, cfg.dim);
        Eigen::VectorXd y(n);
        Eigen::Index accepted = 0;
        long long window_tries = 0, window_accepts = 0;
        while (accepted < n) {
            Eigen::VectorXd z(cfg.n_s + 1), s(cfg.n_s), v(nv);
            for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = gauss(rng);
            for (Eigen::Index i = 0; i < cfg.n_s; ++i) s[i] = 0.8 * z[i] + 0.2 * z[i + 1];
            for (Eigen::Index i = 0; i < nv; ++i) v[i] = gauss(rng);
            const double yi = theta.dot(s) + cfg.beta * s[0] * s[1] * s[2] + cfg.noise_sd * gauss(rng);
            ++window_tries;
            if (uni(rng) <= selection_prob(r, yi, v[0])) {
                feats.row(accepted).head(cfg.n_s) = s;
                feats.row(accepted).tail(nv) = v;
                y[accepted] = yi;
                ++accepted;
                ++window_accepts;
            }
            if (window_tries >= 200000) {
                if (window_accepts < window_tries / 10000)
                    throw NumericError("selection: stuck sampler for r=" + std::to_string(r) +
                                       " (accepted " + std::to_string(window_accepts) + " of " +
                                       std::to_string(window_tries) + " in window, total " +
                                       std::to_string(accepted) + "/" + std::to_string(n) + ")");
                window_tries = window_accepts = 0;
            }
        }
        Dataset ds;
        ds.X = feats * h.transpose();
        ds.Y = y;
        ds.latent_env = Eigen::VectorXi::Constant(n, static_cast<int>(e));
        ds.validate();
        out.push_back(std::move(ds));
    }
    return out;
}

/// Linear two-direction benchmark: X = Y (psi_s + beta_e psi_v) + noise with
/// a fixed seeded orthonormal pair, exposed for ground-truth checks.
struct Example41Config {
    Eigen::Index dim = 10;
    double noise_cov = 0.5; // X noise is N(0, noise_cov * I)
    std::vector<double> betas;
    std::vector<Eigen::Index> env_sizes;
    bool axis_aligned = false;
    std::uint64_t seed = 0;

    void validate() const {
        if (dim < 2) throw ConfigError("example41: need dim >= 2");
        if (betas.empty() || betas.size() != env_sizes.size())
            throw ConfigError("example41: betas and env_sizes must match and be non-empty");
        if (noise_cov < 0.0) throw ConfigError("example41: noise_cov must be >= 0");
    }
};

struct Example41Data {
    std::vector<Dataset> envs;
    Eigen::VectorXd psi_s;
    Eigen::VectorXd psi_v;
};

inline Example41Data gen_example41(const Example41Config& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    Example41Data data;
    if (cfg.axis_aligned) {
        data.psi_s = Eigen::VectorXd::Unit(cfg.dim, 0);
        data.psi_v = Eigen::VectorXd::Unit(cfg.dim, 1);
    } else {
        Eigen::MatrixXd pair = random_orthonormal_columns(rng, cfg.dim, 2);
        data.psi_s = pair.col(0);
        data.psi_v = pair.col(1);
    }
    const double sd = std::sqrt(cfg.noise_cov);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (std::size_t e = 0; e < cfg.env_sizes.size(); ++e) {
        const Eigen::Index n = cfg.env_sizes[e];
        Dataset ds;
        ds.X.resize(n, cfg.dim);
        ds.Y.resize(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            ds.Y[i] = detail::draw_sign(rng);
            Eigen::VectorXd x = ds.Y[i] * (data.psi_s + cfg.betas[e] * data.psi_v);
            for (Eigen::Index j = 0; j < cfg.dim; ++j) x[j] += sd * gauss(rng);
            ds.X.row(i) = x;
        }
        ds.latent_env = Eigen::VectorXi::Constant(n, static_cast<int>(e));
        ds.validate();
        data.envs.push_back(std::move(ds));
    }
    return data;
}

} // namespace kerhrm
