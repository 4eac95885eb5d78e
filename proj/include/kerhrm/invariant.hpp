#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "kerhrm/clustering.hpp"
#include "kerhrm/dataset.hpp"
#include "kerhrm/errors.hpp"
#include "kerhrm/ntf_space.hpp"

namespace kerhrm {

struct InvariantDirection {
    Eigen::VectorXd theta;
    double alpha = 0.0;
    std::vector<double> per_env_losses;
    double penalty_value = 0.0; // gradient variance at the final theta
    double objective = 0.0;
    bool converged = false;
    double lr_used = 0.0;
    int steps_taken = 0;
};

/// Mean squared loss of theta on one environment (a row subset) and its
/// exact gradient (2/m) Psi_e^T (Psi_e theta - y_e).
inline std::pair<double, Eigen::VectorXd> env_loss_and_grad(
    const Eigen::VectorXd& theta, const Eigen::MatrixXd& psi, const Eigen::VectorXd& y,
    const std::vector<Eigen::Index>& idx) {
    if (idx.empty()) throw DegenerateError("env_loss_and_grad: empty environment");
    if (theta.size() != psi.cols()) throw ShapeError("env_loss_and_grad: theta length != k");
    const double m = static_cast<double>(idx.size());
    double loss = 0.0;
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(psi.cols());
    for (Eigen::Index i : idx) {
        const double r = psi.row(i).dot(theta) - y[i];
        loss += r * r;
        grad += r * psi.row(i).transpose();
    }
    return {loss / m, (2.0 / m) * grad};
}

/// Trace-of-covariance variance of per-environment gradients:
/// (1/E) sum_e ||g_e - mean||^2.
inline double gradient_variance(const std::vector<Eigen::VectorXd>& grads) {
    if (grads.size() < 2) throw DegenerateError("gradient_variance: need >= 2 environments");
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(grads.front().size());
    for (const auto& g : grads) mean += g;
    mean /= static_cast<double>(grads.size());
    double var = 0.0;
    for (const auto& g : grads) var += (g - mean).squaredNorm();
    return var / static_cast<double>(grads.size());
}

namespace detail {

// Per-environment affine data: L^e = theta^T (A/2) theta - b^T theta + c,
// gradient g_e = A theta - b, with A = 2 Psi_e^T Psi_e / m.
struct EnvAffine {
    Eigen::MatrixXd A;
    Eigen::VectorXd b;
    double c = 0.0;
};

inline std::vector<EnvAffine> env_affines(const Eigen::MatrixXd& psi, const Eigen::VectorXd& y,
                                          const std::vector<std::vector<Eigen::Index>>& envs) {
    std::vector<EnvAffine> out;
    out.reserve(envs.size());
    const Eigen::Index k = psi.cols();
    for (const auto& idx : envs) {
        if (idx.empty()) throw DegenerateError("fit: empty environment index set");
        EnvAffine e;
        Eigen::MatrixXd pe(static_cast<Eigen::Index>(idx.size()), k);
        Eigen::VectorXd ye(static_cast<Eigen::Index>(idx.size()));
        for (std::size_t t = 0; t < idx.size(); ++t) {
            pe.row(static_cast<Eigen::Index>(t)) = psi.row(idx[t]);
            ye[static_cast<Eigen::Index>(t)] = y[idx[t]];
        }
        const double m = static_cast<double>(idx.size());
        e.A = (2.0 / m) * (pe.transpose() * pe);
        e.b = (2.0 / m) * (pe.transpose() * ye);
        e.c = ye.squaredNorm() / m;
        out.push_back(std::move(e));
    }
    return out;
}

struct ObjectiveEval {
    double objective = 0.0;
    double penalty = 0.0; // variance term, unweighted
    Eigen::VectorXd grad;
    std::vector<double> env_losses;
};

inline ObjectiveEval eval_objective(const std::vector<EnvAffine>& envs, double alpha,
                                    const Eigen::VectorXd& theta) {
    const Eigen::Index k = theta.size();
    const double ecount = static_cast<double>(envs.size());
    ObjectiveEval ev;
    ev.grad = Eigen::VectorXd::Zero(k);
    Eigen::VectorXd gmean = Eigen::VectorXd::Zero(k);
    std::vector<Eigen::VectorXd> gs;
    gs.reserve(envs.size());
    for (const auto& e : envs) {
        Eigen::VectorXd g = e.A * theta - e.b;
        const double loss = 0.5 * theta.dot(e.A * theta) - e.b.dot(theta) + e.c;
        ev.env_losses.push_back(loss);
        ev.objective += loss;
        ev.grad += g;
        gmean += g;
        gs.push_back(std::move(g));
    }
    gmean /= ecount;
    if (alpha != 0.0 && envs.size() >= 2) {
        Eigen::MatrixXd amean = Eigen::MatrixXd::Zero(k, k);
        for (const auto& e : envs) amean += e.A;
        amean /= ecount;
        double var = 0.0;
        Eigen::VectorXd vgrad = Eigen::VectorXd::Zero(k);
        for (std::size_t t = 0; t < envs.size(); ++t) {
            Eigen::VectorXd dev = gs[t] - gmean;
            var += dev.squaredNorm();
            vgrad += (envs[t].A - amean).transpose() * dev;
        }
        var /= ecount;
        ev.penalty = var;
        ev.objective += alpha * var;
        ev.grad += alpha * (2.0 / ecount) * vgrad;
    }
    return ev;
}

inline double hessian_spectral_bound(const std::vector<EnvAffine>& envs, double alpha) {
    const Eigen::Index k = envs.front().A.rows();
    const double ecount = static_cast<double>(envs.size());
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(k, k);
    Eigen::MatrixXd amean = Eigen::MatrixXd::Zero(k, k);
    for (const auto& e : envs) {
        h += e.A;
        amean += e.A;
    }
    amean /= ecount;
    if (alpha != 0.0 && envs.size() >= 2) {
        for (const auto& e : envs) {
            Eigen::MatrixXd dev = e.A - amean;
            h += alpha * (2.0 / ecount) * dev.transpose() * dev;
        }
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(h);
    return es.eigenvalues().maxCoeff();
}

} // namespace detail

/// Invariant direction in reduced coordinates: gradient descent from zero on
/// the pooled per-environment losses plus alpha times the gradient-variance
/// penalty. The step halves whenever the objective would increase; accepted
/// steps are non-increasing. lr <= 0 picks 1/lambda_max of the exact
/// (quadratic) hessian.
inline InvariantDirection fit_theta_inv(const Eigen::MatrixXd& psi, const Eigen::VectorXd& y,
                                        const std::vector<std::vector<Eigen::Index>>& envs,
                                        double alpha, double lr = 0.0, int steps = 4000) {
    if (alpha < 0.0) throw ConfigError("fit_theta_inv: alpha must be >= 0");
    if (envs.empty()) throw DegenerateError("fit_theta_inv: no environments");
    if (envs.size() < 2 && alpha > 0.0)
        throw DegenerateError("fit_theta_inv: variance penalty needs >= 2 environments");
    if (psi.rows() != y.size()) throw ShapeError("fit_theta_inv: Psi rows != Y length");
    auto affines = detail::env_affines(psi, y, envs);
    if (lr <= 0.0) {
        const double lmax = detail::hessian_spectral_bound(affines, alpha);
        lr = lmax > 0.0 ? 1.0 / lmax : 1.0;
    }
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(psi.cols());
    detail::ObjectiveEval cur = detail::eval_objective(affines, alpha, theta);
    const double j0 = cur.objective;
    InvariantDirection out;
    int taken = 0;
    for (int s = 0; s < steps; ++s) {
        Eigen::VectorXd trial = theta - lr * cur.grad;
        detail::ObjectiveEval ev = detail::eval_objective(affines, alpha, trial);
        if (ev.objective > cur.objective + 1e-15 * (1.0 + std::abs(cur.objective))) {
            lr *= 0.5;
            if (lr < 1e-18) break;
            continue;
        }
        theta = std::move(trial);
        cur = std::move(ev);
        ++taken;
        if (cur.grad.lpNorm<Eigen::Infinity>() < 1e-13 * (1.0 + std::abs(j0))) break;
    }
    out.theta = theta;
    out.alpha = alpha;
    out.per_env_losses = cur.env_losses;
    out.penalty_value = cur.penalty;
    out.objective = cur.objective;
    out.lr_used = lr;
    out.steps_taken = taken;
    out.converged = cur.grad.lpNorm<Eigen::Infinity>() < 1e-8 * (1.0 + std::abs(j0));
    return out;
}

inline InvariantDirection fit_theta_inv(const NtfSpace& space, const Eigen::VectorXd& y,
                                        const std::vector<std::vector<Eigen::Index>>& envs,
                                        double alpha, double lr = 0.0, int steps = 4000) {
    return fit_theta_inv(space.Psi, y, envs, alpha, lr, steps);
}

inline InvariantDirection fit_theta_inv(const NtfSpace& space, const Eigen::VectorXd& y,
                                        const EnvPartition& part, double alpha, double lr = 0.0,
                                        int steps = 4000) {
    return fit_theta_inv(space.Psi, y, env_index_sets(part.hard_labels), alpha, lr, steps);
}

/// Same objective with ground-truth environment labels; the baseline the
/// learned partition is compared against.
inline InvariantDirection irm_baseline(const Dataset& data, const NtfSpace& space, double alpha,
                                       double lr = 0.0, int steps = 4000) {
    if (!data.latent_env) throw ConfigError("irm_baseline: dataset has no environment labels");
    auto sets = env_index_sets(*data.latent_env);
    if (sets.size() < 2) throw DegenerateError("irm_baseline: fewer than 2 labeled environments");
    return fit_theta_inv(space.Psi, data.Y, sets, alpha, lr, steps);
}

} // namespace kerhrm
