#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kerhrm/errors.hpp"
#include "kerhrm/ntf_space.hpp"
#include "kerhrm/random.hpp"

namespace kerhrm {

/// Mixture of kernel regressors: cluster j predicts through dual
/// coefficients alpha_coeffs.row(j), and emits Y as a Gaussian of width
/// sigma around that prediction. sigma is fixed for the whole run.
struct ClusterModel {
    int K = 0;
    Eigen::MatrixXd alpha_coeffs; // K x n
    Eigen::VectorXd q;            // mixture weights on the simplex
    double sigma = 1.0;
    double ridge = 1e-3;

    void validate() const {
        if (K < 1 || alpha_coeffs.rows() != K || q.size() != K)
            throw ShapeError("cluster model: inconsistent K");
        if (!(sigma > 0.0)) throw ConfigError("cluster model: sigma must be > 0");
        if (!(ridge > 0.0)) throw ConfigError("cluster model: ridge must be > 0");
        if (q.minCoeff() < -1e-12 || std::abs(q.sum() - 1.0) > 1e-10)
            throw NumericError("cluster model: q off the simplex");
    }
};

struct EnvPartition {
    Eigen::MatrixXd R;           // n x K responsibilities, rows on the simplex
    Eigen::VectorXi hard_labels; // argmax cluster per point
    std::vector<double> objective_trace;
    int em_iterations = 0;
    std::vector<std::string> warnings;
};

// Gaussian density of y around the kernel-regression prediction
// sum_i alpha[j][i] * kvec[i].
inline double center_density(const ClusterModel& model, int j, const Eigen::VectorXd& kvec,
                             double y) {
    if (!(model.sigma > 0.0)) throw ConfigError("center_density: sigma must be > 0");
    if (j < 0 || j >= model.K) throw ConfigError("center_density: cluster id out of range");
    const double pred = model.alpha_coeffs.row(j).dot(kvec);
    const double r = y - pred;
    return std::exp(-r * r / (2.0 * model.sigma * model.sigma)) /
           (std::sqrt(2.0 * M_PI) * model.sigma);
}

namespace detail {

// log h_j(x_i, y_i) for every point and cluster.
inline Eigen::MatrixXd log_density_matrix(const ClusterModel& model, const Eigen::MatrixXd& kmat,
                                          const Eigen::VectorXd& y) {
    Eigen::MatrixXd preds = kmat * model.alpha_coeffs.transpose(); // n x K
    const double inv2s2 = 1.0 / (2.0 * model.sigma * model.sigma);
    const double log_norm = -std::log(std::sqrt(2.0 * M_PI) * model.sigma);
    Eigen::MatrixXd logh = (preds.colwise() - y).array().square() * (-inv2s2) + log_norm;
    return logh;
}

} // namespace detail

/// Mixture negative log-likelihood (the clustering objective), evaluated in
/// log space.
inline double clustering_objective(const ClusterModel& model, const Eigen::MatrixXd& kmat,
                                   const Eigen::VectorXd& y) {
    const Eigen::Index n = y.size();
    Eigen::MatrixXd logh = detail::log_density_matrix(model, kmat, y);
    Eigen::VectorXd logq(model.K);
    for (int j = 0; j < model.K; ++j)
        logq[j] = model.q[j] > 0.0 ? std::log(model.q[j]) : -std::numeric_limits<double>::infinity();
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        double m = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < model.K; ++j) m = std::max(m, logq[j] + logh(i, j));
        if (!std::isfinite(m)) return std::numeric_limits<double>::infinity();
        double s = 0.0;
        for (int j = 0; j < model.K; ++j) s += std::exp(logq[j] + logh(i, j) - m);
        total += m + std::log(s);
    }
    return -total / static_cast<double>(n);
}

/// Posterior responsibilities, computed in log space. A point whose every
/// mixture component vanishes gets a uniform row and a warning.
inline Eigen::MatrixXd em_e_step(const ClusterModel& model, const Eigen::MatrixXd& kmat,
                                 const Eigen::VectorXd& y,
                                 std::vector<std::string>* warnings = nullptr) {
    model.validate();
    const Eigen::Index n = y.size();
    Eigen::MatrixXd logh = detail::log_density_matrix(model, kmat, y);
    Eigen::MatrixXd r(n, model.K);
    Eigen::VectorXd logq(model.K);
    for (int j = 0; j < model.K; ++j)
        logq[j] = model.q[j] > 0.0 ? std::log(model.q[j]) : -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < n; ++i) {
        double m = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < model.K; ++j) m = std::max(m, logq[j] + logh(i, j));
        if (!std::isfinite(m)) {
            r.row(i).setConstant(1.0 / model.K);
            if (warnings) warnings->push_back("e-step: all densities vanished for point " +
                                              std::to_string(i) + ", using uniform row");
            continue;
        }
        double s = 0.0;
        for (int j = 0; j < model.K; ++j) {
            r(i, j) = std::exp(logq[j] + logh(i, j) - m);
            s += r(i, j);
        }
        r.row(i) /= s;
    }
    return r;
}

namespace detail {

// Weighted kernel ridge in dual form: (W K + ridge * mass * I) alpha = W y,
// with W = diag(w) and mass = sum(w). Scaling the ridge by the cluster's
// responsibility mass keeps the fitted center invariant under duplicating
// every data point. The low-rank path uses the factor K = Psi Psi^T and a
// Woodbury identity; it is exact, not approximate.
inline Eigen::VectorXd solve_weighted_kernel_ridge(const Eigen::MatrixXd& kmat,
                                                   const Eigen::VectorXd& w,
                                                   const Eigen::VectorXd& y, double lam,
                                                   const Eigen::MatrixXd* lowrank) {
    const Eigen::Index n = y.size();
    Eigen::VectorXd wy = w.cwiseProduct(y);
    Eigen::VectorXd alpha;
    if (lowrank != nullptr && lowrank->rows() == n && lowrank->cols() < n) {
        const Eigen::MatrixXd& psi = *lowrank;
        const Eigen::Index k = psi.cols();
        Eigen::MatrixXd wpsi = psi.array().colwise() * w.array(); // W Psi
        Eigen::MatrixXd inner = lam * Eigen::MatrixXd::Identity(k, k) + psi.transpose() * wpsi;
        Eigen::LDLT<Eigen::MatrixXd> ldlt(inner);
        if (ldlt.info() != Eigen::Success)
            throw NumericError("m-step: singular reduced system after ridging");
        alpha = (wy - wpsi * ldlt.solve(psi.transpose() * wy)) / lam;
    } else {
        Eigen::MatrixXd sys = kmat.array().colwise() * w.array(); // W K
        sys.diagonal().array() += lam;
        alpha = Eigen::PartialPivLU<Eigen::MatrixXd>(sys).solve(wy);
    }
    // Residual check against the full system catches near-singular solves.
    Eigen::VectorXd resid = w.cwiseProduct(kmat * alpha) + lam * alpha - wy;
    const double scale = wy.norm() + lam * alpha.norm() + 1e-30;
    if (!alpha.allFinite() || resid.norm() > 1e-6 * scale)
        throw NumericError("m-step: singular system after ridging");
    return alpha;
}

} // namespace detail

/// M-step: refit every cluster center by responsibility-weighted kernel
/// ridge regression and set the mixture weights to the mean responsibility.
inline ClusterModel em_m_step(const Eigen::MatrixXd& r, const Eigen::MatrixXd& kmat,
                              const Eigen::VectorXd& y, double ridge, double sigma,
                              const Eigen::MatrixXd* lowrank = nullptr) {
    if (!(ridge > 0.0)) throw ConfigError("em_m_step: ridge must be > 0");
    if (!(sigma > 0.0)) throw ConfigError("em_m_step: sigma must be > 0");
    const Eigen::Index n = y.size();
    if (r.rows() != n || kmat.rows() != n || kmat.cols() != n)
        throw ShapeError("em_m_step: shape mismatch");
    ClusterModel model;
    model.K = static_cast<int>(r.cols());
    model.sigma = sigma;
    model.ridge = ridge;
    model.alpha_coeffs.resize(model.K, n);
    for (int j = 0; j < model.K; ++j) {
        Eigen::VectorXd w = r.col(j);
        const double mass = std::max(w.sum(), 1e-12);
        model.alpha_coeffs.row(j) =
            detail::solve_weighted_kernel_ridge(kmat, w, y, ridge * mass, lowrank).transpose();
    }
    model.q = r.colwise().mean();
    model.q /= model.q.sum();
    return model;
}

struct ClusteringOptions {
    int K = 2;
    int max_iter = 200;
    double tol = 1e-6;
    std::uint64_t seed = 0;
    int restarts = 2;
    double ridge = 0.0;  // <= 0: 1e-3 * trace(K)/n
    double sigma = 0.0;  // <= 0: residual scale of a pooled kernel ridge fit
    double init_jitter = 0.5;
    std::optional<Eigen::MatrixXd> init_responsibilities; // overrides jittered start
};

inline Eigen::VectorXi hard_assign_argmax(const Eigen::MatrixXd& r) {
    Eigen::VectorXi labels(r.rows());
    for (Eigen::Index i = 0; i < r.rows(); ++i) {
        int best = 0;
        for (int j = 1; j < r.cols(); ++j)
            if (r(i, j) > r(i, best)) best = j; // ties keep the lowest id
        labels[i] = best;
    }
    return labels;
}

namespace detail {

struct EmRun {
    ClusterModel model;
    Eigen::MatrixXd r;
    std::vector<double> trace;
    int iterations = 0;
    std::vector<std::string> warnings;
};

inline EmRun run_em_once(const Eigen::MatrixXd& kmat, const Eigen::MatrixXd* lowrank,
                         const Eigen::VectorXd& y, const ClusteringOptions& opts,
                         const Eigen::MatrixXd& init_r, double ridge, double sigma) {
    const Eigen::Index n = y.size();
    EmRun run;
    run.r = init_r;
    double prev = std::numeric_limits<double>::infinity();
    ClusterModel prev_model;
    bool reinit_used = false;
    for (int it = 0; it < opts.max_iter; ++it) {
        ClusterModel model = em_m_step(run.r, kmat, y, ridge, sigma, lowrank);
        double obj = clustering_objective(model, kmat, y);
        if (obj > prev + 1e-12 * (1.0 + std::abs(prev))) {
            // The ridge term can nudge a refit uphill on the unpenalized
            // objective; keep the better model and stop.
            run.warnings.push_back("em: refit increased the objective at iteration " +
                                   std::to_string(it) + ", keeping previous model");
            run.model = prev_model;
            break;
        }
        run.trace.push_back(obj);
        run.model = model;
        run.iterations = it + 1;
        run.r = em_e_step(model, kmat, y, &run.warnings);

        // Clusters that lost all responsibility get one restart seeded from
        // the worst-fit points.
        Eigen::VectorXd mass = run.r.colwise().sum();
        for (int j = 0; j < opts.K; ++j) {
            if (mass[j] >= 1e-8 * static_cast<double>(n)) continue;
            if (reinit_used) {
                run.warnings.push_back("em: degenerate clustering, cluster " + std::to_string(j) +
                                       " emptied again");
                continue;
            }
            reinit_used = true;
            Eigen::MatrixXd logh = log_density_matrix(model, kmat, y);
            Eigen::VectorXd best_fit = logh.rowwise().maxCoeff();
            std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
            std::iota(order.begin(), order.end(), Eigen::Index{0});
            std::sort(order.begin(), order.end(),
                      [&](Eigen::Index a, Eigen::Index b) { return best_fit[a] < best_fit[b]; });
            const Eigen::Index take = std::max<Eigen::Index>(1, n / (4 * opts.K));
            for (Eigen::Index t = 0; t < take; ++t) {
                run.r.row(order[static_cast<std::size_t>(t)]).setConstant(0.1 / (opts.K - 1 + 1e-12));
                run.r(order[static_cast<std::size_t>(t)], j) = 0.9;
                run.r.row(order[static_cast<std::size_t>(t)]) /=
                    run.r.row(order[static_cast<std::size_t>(t)]).sum();
            }
            run.warnings.push_back("em: reseeded empty cluster " + std::to_string(j));
        }

        if (std::abs(prev - obj) < opts.tol) break;
        prev = obj;
        prev_model = model;
    }
    return run;
}

} // namespace detail

/// EM over the mixture of kernel regressors on (Psi_V, Y). Restarts keep the
/// best final objective; the recorded trace is non-increasing.
inline std::pair<ClusterModel, EnvPartition> run_clustering(const KernelState& state,
                                                            const Eigen::VectorXd& y,
                                                            const ClusteringOptions& opts) {
    const Eigen::Index n = y.size();
    if (opts.K < 2) throw ConfigError("run_clustering: need K >= 2");
    if (n < opts.K) throw ConfigError("run_clustering: need n >= K");
    if (state.PsiV.rows() != n) throw ShapeError("run_clustering: kernel state rows != n");
    Eigen::MatrixXd kmat = kernel_matrix(state);

    const double ridge =
        opts.ridge > 0.0 ? opts.ridge : std::max(1e-3 * kmat.trace() / static_cast<double>(n), 1e-12);
    double sigma = opts.sigma;
    if (!(sigma > 0.0)) {
        Eigen::VectorXd alpha = detail::solve_weighted_kernel_ridge(
            kmat, Eigen::VectorXd::Ones(n), y, ridge * static_cast<double>(n), &state.PsiV);
        const double rms = std::sqrt((y - kmat * alpha).squaredNorm() / static_cast<double>(n));
        const double ysd = std::sqrt((y.array() - y.mean()).square().sum() / static_cast<double>(n));
        sigma = std::max(rms, 1e-3 * ysd + 1e-12);
    }

    detail::EmRun best;
    double best_obj = std::numeric_limits<double>::infinity();
    const int restarts = std::max(1, opts.restarts);
    for (int rep = 0; rep < restarts; ++rep) {
        Eigen::MatrixXd init;
        if (opts.init_responsibilities) {
            init = *opts.init_responsibilities;
            if (init.rows() != n || init.cols() != opts.K)
                throw ShapeError("run_clustering: init responsibilities shape mismatch");
        } else {
            Rng rng(opts.seed + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(rep + 1));
            std::uniform_real_distribution<double> uni(0.0, 1.0);
            init.resize(n, opts.K);
            for (Eigen::Index i = 0; i < n; ++i) {
                double s = 0.0;
                for (int j = 0; j < opts.K; ++j) {
                    init(i, j) = 1.0 + opts.init_jitter * uni(rng);
                    s += init(i, j);
                }
                init.row(i) /= s;
            }
        }
        detail::EmRun run = detail::run_em_once(kmat, &state.PsiV, y, opts, init, ridge, sigma);
        const double obj = run.trace.empty() ? std::numeric_limits<double>::infinity()
                                             : run.trace.back();
        if (obj < best_obj) {
            best_obj = obj;
            best = std::move(run);
        }
        if (opts.init_responsibilities) break; // explicit start: nothing to restart
    }
    if (!std::isfinite(best_obj)) throw NumericError("run_clustering: no finite objective reached");

    EnvPartition part;
    part.R = best.r;
    part.hard_labels = hard_assign_argmax(best.r);
    part.objective_trace = best.trace;
    part.em_iterations = best.iterations;
    part.warnings = best.warnings;
    return {best.model, part};
}

enum class AssignMode { Argmax, Sample };

/// Hard environment labels from responsibilities: deterministic argmax (ties
/// to the lowest id) or categorical sampling.
inline Eigen::VectorXi assign_environments(const EnvPartition& part, AssignMode mode,
                                           std::uint64_t seed = 0) {
    if (mode == AssignMode::Argmax) return hard_assign_argmax(part.R);
    Rng rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    Eigen::VectorXi labels(part.R.rows());
    for (Eigen::Index i = 0; i < part.R.rows(); ++i) {
        double u = uni(rng), acc = 0.0;
        int pick = static_cast<int>(part.R.cols()) - 1;
        for (int j = 0; j < part.R.cols(); ++j) {
            acc += part.R(i, j);
            if (u <= acc) {
                pick = j;
                break;
            }
        }
        labels[i] = pick;
    }
    return labels;
}

} // namespace kerhrm
